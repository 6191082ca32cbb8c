mod common;

use common::gradient_errors;

#[test]
fn f32_gradients_match_central_differences() {
    for i in 0..24 {
        let (p, x) = gradient_errors::<f32>(i, 1e-3, 40);
        assert!(p < 1e-3 && x < 1e-3, "instance {i}: params {p:e}, input {x:e}");
    }
}

#[test]
fn f64_gradients_match_central_differences() {
    for i in 0..24 {
        let (p, x) = gradient_errors::<f64>(i, 1e-5, 40);
        assert!(p < 1e-6 && x < 1e-6, "instance {i}: params {p:e}, input {x:e}");
    }
}

