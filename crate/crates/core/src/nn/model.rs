use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::layers::{ConvGeom, Layer, Saved};
use super::loss;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed network layouts.
///
/// * `Linear` - one dense layer; the substrate for closed-form oracle checks.
/// * `Mlp2` - `n -> 256 -> K` with ReLU.
/// * `Cnn` - LeNet-like: conv5x5x16, ReLU, pool2, conv5x5x32, ReLU, pool2,
///   dense 128, ReLU, dense K. Convolutions are unpadded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Linear,
    Mlp2,
    Cnn,
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Architecture::Linear),
            "mlp" | "mlp2" | "mlp-2" => Ok(Architecture::Mlp2),
            "cnn" | "lenet" => Ok(Architecture::Cnn),
            other => Err(format!("unknown architecture `{other}` (expected linear, mlp or cnn)")),
        }
    }
}

pub const MLP_HIDDEN: usize = 256;
pub const CNN_FILTERS: [usize; 2] = [16, 32];
pub const CNN_KERNEL: usize = 5;
pub const CNN_DENSE: usize = 128;

/// Logits and probabilities for a batch.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Parameter gradients in [`Classifier::parameters`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct LossAndGrads<T> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    pub grad_params: Gradients<T>,
    pub grad_input: Option<Tensor<T>>,
}

/// Forward activations kept for a later [`Classifier::backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    batch: usize,
    saved: Vec<Saved<T>>,
    pub logits: Tensor<T>,
}

impl<T> Trace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// A feed-forward classifier `R^n -> {0..K-1}` with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    architecture: Architecture,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer<T>>,
    /// Seeds and steps that produced these parameters; echoed into checkpoints.
    pub lineage: BTreeMap<String, String>,
}

impl<T: Scalar> Classifier<T> {
    /// Builds the architecture with every parameter set to zero.
    pub fn zeros(architecture: Architecture, input_shape: &[usize], num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid input shape {input_shape:?}")));
        }
        let n: usize = input_shape.iter().product();
        let dense = |name: &str, inputs: usize, outputs: usize| Layer::Dense {
            name: name.to_string(),
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
            inputs,
            outputs,
        };
        let layers = match architecture {
            Architecture::Linear => vec![dense("fc", n, num_classes)],
            Architecture::Mlp2 => vec![
                dense("fc1", n, MLP_HIDDEN),
                Layer::Relu { features: MLP_HIDDEN },
                dense("fc2", MLP_HIDDEN, num_classes),
            ],
            Architecture::Cnn => {
                let [c, h, w] = match *input_shape {
                    [h, w] => [1, h, w],
                    [c, h, w] => [c, h, w],
                    _ => {
                        return Err(Error::Config(format!(
                            "cnn needs a [channels, height, width] input, got {input_shape:?}"
                        )))
                    }
                };
                let g1 = ConvGeom { channels: c, height: h, width: w, filters: CNN_FILTERS[0], kernel: CNN_KERNEL };
                if h < CNN_KERNEL || w < CNN_KERNEL {
                    return Err(Error::Config(format!("input {h}x{w} too small for the cnn")));
                }
                let (p1h, p1w) = (g1.out_h() / 2, g1.out_w() / 2);
                if p1h < CNN_KERNEL || p1w < CNN_KERNEL {
                    return Err(Error::Config(format!("input {h}x{w} too small for the cnn")));
                }
                let g2 = ConvGeom {
                    channels: CNN_FILTERS[0],
                    height: p1h,
                    width: p1w,
                    filters: CNN_FILTERS[1],
                    kernel: CNN_KERNEL,
                };
                let (p2h, p2w) = (g2.out_h() / 2, g2.out_w() / 2);
                if p2h == 0 || p2w == 0 {
                    return Err(Error::Config(format!("input {h}x{w} too small for the cnn")));
                }
                let flat = CNN_FILTERS[1] * p2h * p2w;
                let conv = |name: &str, geom: ConvGeom| Layer::Conv {
                    name: name.to_string(),
                    weight: vec![T::zero(); geom.filters * geom.patch()],
                    bias: vec![T::zero(); geom.filters],
                    geom,
                };
                vec![
                    conv("conv1", g1),
                    Layer::Relu { features: g1.out_features() },
                    Layer::MaxPool2 { channels: g1.filters, height: g1.out_h(), width: g1.out_w() },
                    conv("conv2", g2),
                    Layer::Relu { features: g2.out_features() },
                    Layer::MaxPool2 { channels: g2.filters, height: g2.out_h(), width: g2.out_w() },
                    dense("fc1", flat, CNN_DENSE),
                    Layer::Relu { features: CNN_DENSE },
                    dense("fc2", CNN_DENSE, num_classes),
                ]
            }
        };
        debug_assert!(layers.windows(2).all(|w| w[0].out_features() == w[1].in_features()));
        Ok(Self {
            architecture,
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
            lineage: BTreeMap::new(),
        })
    }

    /// Seeded He-style uniform initialization: weights `U(-a, a)` with
    /// `a = sqrt(6 / fan_in)`, biases zero.
    pub fn new(architecture: Architecture, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(architecture, input_shape, num_classes)?;
        let mut rng = rng::stream(seed, rng::streams::INIT);
        for layer in &mut model.layers {
            let fan_in = match layer {
                Layer::Dense { inputs, .. } => *inputs,
                Layer::Conv { geom, .. } => geom.patch(),
                _ => continue,
            };
            let a = (6.0 / fan_in as f64).sqrt();
            if let Some((w, _)) = layer.params_mut() {
                for v in w.iter_mut() {
                    *v = T::lit(rng.random_range(-a..a));
                }
            }
        }
        model.lineage.insert("init_seed".into(), seed.to_string());
        Ok(model)
    }

    /// Single dense layer with the given `classes x inputs` weight and bias.
    pub fn linear(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [classes, inputs] = match *weight.shape() {
            [k, n] => [k, n],
            _ => return Err(Error::Shape(format!("linear weight must be 2-d, got {:?}", weight.shape()))),
        };
        if bias.shape() != [classes] {
            return Err(Error::Shape(format!("bias shape {:?} != [{classes}]", bias.shape())));
        }
        let mut model = Self::zeros(Architecture::Linear, &[inputs], classes)?;
        model.set_parameters(&[weight, bias])?;
        Ok(model)
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        for layer in &self.layers {
            if let (Some((name, _, _)), Some(ws), Some(bl)) = (layer.params(), layer.weight_shape(), layer.bias_len()) {
                specs.push((format!("{name}.weight"), ws));
                specs.push((format!("{name}.bias"), vec![bl]));
            }
        }
        specs
    }

    /// Copies of all parameter tensors in [`Self::parameter_specs`] order.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let (Some((name, w, b)), Some(ws)) = (layer.params(), layer.weight_shape()) {
                out.push((format!("{name}.weight"), Tensor::new(ws, w.to_vec()).expect("weight shape")));
                out.push((format!("{name}.bias"), Tensor::new(vec![b.len()], b.to_vec()).expect("bias shape")));
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameter_specs().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Replaces all parameters; shapes must match the architecture exactly.
    pub fn set_parameters(&mut self, tensors: &[Tensor<T>]) -> Result<()> {
        let specs = self.parameter_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Format(format!("expected {} parameter tensors, got {}", specs.len(), tensors.len())));
        }
        for ((name, shape), t) in specs.iter().zip(tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ParameterShape { name: name.clone(), expected: shape.clone(), found: t.shape().to_vec() });
            }
        }
        let mut it = tensors.iter();
        for layer in &mut self.layers {
            if let Some((w, b)) = layer.params_mut() {
                w.copy_from_slice(it.next().expect("weight").data());
                b.copy_from_slice(it.next().expect("bias").data());
            }
        }
        Ok(())
    }

    /// Applies `param += scale * step` for every tensor.
    pub(crate) fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut [T])) {
        let mut i = 0;
        for layer in &mut self.layers {
            if let Some((w, b)) = layer.params_mut() {
                f(i, w);
                f(i + 1, b);
                i += 2;
            }
        }
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            tensors: self.parameter_specs().into_iter().map(|(_, s)| Tensor::zeros(&s)).collect(),
        }
    }

    pub fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let s = batch.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::InputShape { expected: self.input_shape.clone(), got: s.to_vec() });
        }
        Ok(s[0])
    }

    /// Runs the network and keeps what the backward pass needs.
    pub fn forward_trace(&self, batch: &Tensor<T>) -> Result<Trace<T>> {
        self.run(batch, true)
    }

    fn run(&self, batch: &Tensor<T>, keep: bool) -> Result<Trace<T>> {
        let b = self.check_batch(batch)?;
        let mut act = batch.data().to_vec();
        let mut saved = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for layer in &self.layers {
            let (next, s) = layer.forward(&act, b, keep);
            if keep {
                saved.push(s);
            }
            act = next;
        }
        let logits = Tensor::new(vec![b, self.num_classes], act)?;
        Ok(Trace { batch: b, saved, logits })
    }

    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(batch, false)?.logits)
    }

    /// Logits and row-wise softmax probabilities.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Forward<T>> {
        let logits = self.logits(batch)?;
        let probs = Tensor::new(logits.shape().to_vec(), loss::softmax_rows(logits.data(), self.num_classes))?;
        Ok(Forward { logits, probs })
    }

    /// Argmax label per row, ties to the lowest class index.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(logits.data().chunks(self.num_classes).map(loss::argmax).collect())
    }

    /// Predicts in chunks to bound memory on large sets.
    pub fn predict_all(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        const CHUNK: usize = 256;
        let n = images.rows();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            out.extend(self.predict(&images.gather_rows(&idx))?);
            start = end;
        }
        Ok(out)
    }

    /// Predicted label of one un-batched sample.
    pub fn predict_one(&self, x: &Tensor<T>) -> Result<usize> {
        Ok(self.predict(&x.unsqueeze())?[0])
    }

    /// Backpropagates `dlogits` through a recorded trace.
    ///
    /// Returns parameter gradients (when requested) and the input gradient,
    /// shaped like the original batch.
    pub fn backward(&self, trace: &Trace<T>, dlogits: &Tensor<T>, want_params: bool) -> Result<(Option<Gradients<T>>, Tensor<T>)> {
        if dlogits.shape() != trace.logits.shape() {
            return Err(Error::Shape(format!("dlogits {:?} vs logits {:?}", dlogits.shape(), trace.logits.shape())));
        }
        if trace.saved.len() != self.layers.len() {
            return Err(Error::Precondition("trace was recorded without saved activations".into()));
        }
        let mut grads = if want_params { Some(self.zero_gradients()) } else { None };
        let mut g = dlogits.data().to_vec();
        let mut pi = grads.as_ref().map_or(0, |gr| gr.tensors.len());
        for (layer, saved) in self.layers.iter().zip(&trace.saved).rev() {
            let slot = match (&mut grads, layer.params()) {
                (Some(gr), Some(_)) => {
                    pi -= 2;
                    let (left, right) = gr.tensors.split_at_mut(pi + 1);
                    Some((left[pi].data_mut(), right[0].data_mut()))
                }
                _ => None,
            };
            g = layer.backward(&g, saved, trace.batch, slot);
        }
        let mut shape = vec![trace.batch];
        shape.extend_from_slice(&self.input_shape);
        Ok((grads, Tensor::new(shape, g)?))
    }

    /// Mean cross-entropy, its parameter gradients, and optionally the input gradient.
    pub fn loss_and_grads(&self, batch: &Tensor<T>, labels: &[usize], wrt_input: bool) -> Result<LossAndGrads<T>> {
        let b = self.check_batch(batch)?;
        self.check_labels(labels, b)?;
        let trace = self.forward_trace(batch)?;
        let per = loss::cross_entropy_per_sample(trace.logits.data(), self.num_classes, labels);
        let scale = T::one() / T::lit(b.max(1) as f64);
        let mean = per.iter().copied().sum::<T>() * scale;
        let dl = Tensor::new(trace.logits.shape().to_vec(), loss::cross_entropy_grad(trace.logits.data(), self.num_classes, labels, scale))?;
        let (grads, dx) = self.backward(&trace, &dl, true)?;
        Ok(LossAndGrads {
            loss: mean,
            grad_params: grads.expect("requested"),
            grad_input: if wrt_input { Some(dx) } else { None },
        })
    }

    /// Per-sample cross-entropy losses.
    pub fn per_sample_loss(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
        let b = self.check_batch(batch)?;
        self.check_labels(labels, b)?;
        let logits = self.logits(batch)?;
        Ok(loss::cross_entropy_per_sample(logits.data(), self.num_classes, labels))
    }

    /// Gradient of the summed cross-entropy with respect to the inputs only.
    pub fn input_gradient(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let b = self.check_batch(batch)?;
        self.check_labels(labels, b)?;
        let trace = self.forward_trace(batch)?;
        let dl = Tensor::new(trace.logits.shape().to_vec(), loss::cross_entropy_grad(trace.logits.data(), self.num_classes, labels, T::one()))?;
        let (_, dx) = self.backward(&trace, &dl, false)?;
        Ok((trace.logits, dx))
    }

    pub(crate) fn check_labels(&self, labels: &[usize], batch: usize) -> Result<()> {
        if labels.len() != batch {
            return Err(Error::Shape(format!("{} labels for a batch of {batch}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes: self.num_classes });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().filter_map(|l| l.params()).all(|(_, w, b)| w.iter().chain(b).all(|v| v.is_finite()))
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        let mut out = Classifier::<U>::zeros(self.architecture, &self.input_shape, self.num_classes).expect("same architecture");
        let tensors: Vec<Tensor<U>> = self.parameters().into_iter().map(|(_, t)| t.cast()).collect();
        out.set_parameters(&tensors).expect("same shapes");
        out.lineage = self.lineage.clone();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architectures_have_expected_parameter_shapes() {
        let mlp = Classifier::<f32>::zeros(Architecture::Mlp2, &[1, 28, 28], 10).unwrap();
        let shapes: Vec<_> = mlp.parameter_specs().into_iter().map(|(_, s)| s).collect();
        assert_eq!(shapes, vec![vec![256, 784], vec![256], vec![10, 256], vec![10]]);

        let cnn = Classifier::<f32>::zeros(Architecture::Cnn, &[1, 28, 28], 10).unwrap();
        let specs = cnn.parameter_specs();
        assert_eq!(specs[0], ("conv1.weight".to_string(), vec![16, 1, 5, 5]));
        assert_eq!(specs[2], ("conv2.weight".to_string(), vec![32, 16, 5, 5]));
        assert_eq!(specs[4], ("fc1.weight".to_string(), vec![128, 32 * 4 * 4]));
        assert_eq!(specs[6], ("fc2.weight".to_string(), vec![10, 128]));
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let mlp = Classifier::<f64>::zeros(Architecture::Mlp2, &[4], 10).unwrap();
        let batch = Tensor::from_f64(&[1, 4], &[0.3, 0.9, 0.1, 0.5]).unwrap();
        let out = mlp.forward(&batch).unwrap();
        for &p in out.probs.data() {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_input_gives_identical_rows() {
        let m = Classifier::<f32>::new(Architecture::Cnn, &[1, 16, 16], 10, 3).unwrap();
        let x: Vec<f32> = (0..256).map(|i| (i % 13) as f32 / 13.0).collect();
        let mut data = x.clone();
        data.extend_from_slice(&x);
        let out = m.forward(&Tensor::new(vec![2, 1, 16, 16], data).unwrap()).unwrap();
        assert_eq!(out.probs.row(0), out.probs.row(1));
    }

    #[test]
    fn rejects_wrong_input_shape_and_labels() {
        let m = Classifier::<f32>::new(Architecture::Mlp2, &[6], 3, 0).unwrap();
        let bad = Tensor::<f32>::zeros(&[2, 5]);
        assert!(matches!(m.forward(&bad), Err(Error::InputShape { .. })));
        let ok = Tensor::<f32>::zeros(&[2, 6]);
        assert!(matches!(m.loss_and_grads(&ok, &[0, 3], false), Err(Error::LabelOutOfRange { label: 3, .. })));
    }

    #[test]
    fn grad_input_only_when_requested() {
        let m = Classifier::<f32>::new(Architecture::Mlp2, &[6], 3, 0).unwrap();
        let x = Tensor::<f32>::filled(&[2, 6], 0.5);
        assert!(m.loss_and_grads(&x, &[0, 1], false).unwrap().grad_input.is_none());
        let g = m.loss_and_grads(&x, &[0, 1], true).unwrap().grad_input.unwrap();
        assert_eq!(g.shape(), x.shape());
    }
}
