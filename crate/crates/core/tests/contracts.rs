mod common;

use tupcore::attacks::AttackConfig;
use tupcore::container::{load_checkpoint, save_checkpoint};
use tupcore::data::sample_x;
use tupcore::nn::{Architecture, Classifier};
use tupcore::tup::{compute_tup, TupConfig};
use tupcore::Error;

#[test]
fn tup_convergence_flag_and_norm_bound() {
    assert!(common::tup_contract_holds());
}

#[test]
fn rat_loss_with_zero_perturbation_is_the_standard_loss() {
    assert!(common::rat_zero_is_standard());
}

#[test]
fn training_tup_and_reports_are_bit_reproducible() {
    assert!(common::reproducible());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let m = common::trained(Architecture::Mlp2, 2);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&m, &p).unwrap();
    let back: Classifier<f64> = load_checkpoint(&p).unwrap();
    let ds = common::blobs();
    assert_eq!(back.logits(&ds.images).unwrap(), m.logits(&ds.images).unwrap());
    assert!(matches!(load_checkpoint::<f64>(&dir.path().join("missing")), Err(Error::ArtifactNotFound(_))));
}

#[test]
fn tup_rejects_bad_configs() {
    let ds = common::blobs();
    let m = common::trained(Architecture::Linear, 0);
    let x = sample_x(&ds, &m, 0, 10, 0).unwrap();
    for cfg in [
        TupConfig { eta: 0.0, ..Default::default() },
        TupConfig { delta: 1.5, ..Default::default() },
        TupConfig { k: Some(0), ..Default::default() },
        TupConfig { target: 9, ..Default::default() },
        TupConfig { solver: AttackConfig::with_epsilon(-1.0), ..Default::default() },
    ] {
        assert!(compute_tup(&m, &x, &cfg).is_err(), "{cfg:?}");
    }
}
