//! Layer kernels. Activations are kept flat per sample (`batch x features`).

use crate::scalar::{matmul, Mat, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer<T> {
    /// `weight` is `out x in`, row-major.
    Dense { name: String, weight: Vec<T>, bias: Vec<T>, inputs: usize, outputs: usize },
    /// Valid (unpadded) stride-1 convolution; `weight` is `filters x channels x k x k`.
    Conv { name: String, weight: Vec<T>, bias: Vec<T>, geom: ConvGeom },
    Relu { features: usize },
    /// 2x2 max pooling with stride 2, odd trailing rows/cols dropped.
    MaxPool2 { channels: usize, height: usize, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height - self.kernel + 1
    }
    pub fn out_w(&self) -> usize {
        self.width - self.kernel + 1
    }
    pub fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
    pub fn in_features(&self) -> usize {
        self.channels * self.height * self.width
    }
    pub fn out_features(&self) -> usize {
        self.filters * self.positions()
    }
}

/// Per-layer data retained for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Saved<T> {
    None,
    /// Input activations (dense layers need them for the weight gradient).
    Input(Vec<T>),
    /// im2col matrices, one `patch x positions` block per sample.
    Cols(Vec<T>),
    /// ReLU pass-through mask.
    Mask(Vec<bool>),
    /// Flat input index of the max for every pooled output.
    Argmax(Vec<usize>),
}

impl<T: Scalar> Layer<T> {
    pub fn in_features(&self) -> usize {
        match self {
            Layer::Dense { inputs, .. } => *inputs,
            Layer::Conv { geom, .. } => geom.in_features(),
            Layer::Relu { features } => *features,
            Layer::MaxPool2 { channels, height, width } => channels * height * width,
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            Layer::Dense { outputs, .. } => *outputs,
            Layer::Conv { geom, .. } => geom.out_features(),
            Layer::Relu { features } => *features,
            Layer::MaxPool2 { channels, height, width } => channels * (height / 2) * (width / 2),
        }
    }

    /// `(name, weight, bias)` for parameterized layers.
    pub fn params(&self) -> Option<(&str, &[T], &[T])> {
        match self {
            Layer::Dense { name, weight, bias, .. } | Layer::Conv { name, weight, bias, .. } => {
                Some((name, weight, bias))
            }
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Vec<T>, &mut Vec<T>)> {
        match self {
            Layer::Dense { weight, bias, .. } | Layer::Conv { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            Layer::Dense { inputs, outputs, .. } => Some(vec![*outputs, *inputs]),
            Layer::Conv { geom, .. } => Some(vec![geom.filters, geom.channels, geom.kernel, geom.kernel]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match self {
            Layer::Dense { outputs, .. } => Some(*outputs),
            Layer::Conv { geom, .. } => Some(geom.filters),
            _ => None,
        }
    }

    /// Forward over a flat `batch x in_features` buffer.
    pub fn forward(&self, x: &[T], batch: usize, keep: bool) -> (Vec<T>, Saved<T>) {
        match self {
            Layer::Dense { weight, bias, inputs, outputs, .. } => {
                let mut y = Vec::with_capacity(batch * outputs);
                for _ in 0..batch {
                    y.extend_from_slice(bias);
                }
                matmul(Mat::new(x, batch, *inputs), Mat::new(weight, *outputs, *inputs).t(), &mut y, T::one());
                let saved = if keep { Saved::Input(x.to_vec()) } else { Saved::None };
                (y, saved)
            }
            Layer::Conv { weight, bias, geom, .. } => {
                let (fin, fout) = (geom.in_features(), geom.out_features());
                let (patch, pos) = (geom.patch(), geom.positions());
                let mut y = vec![T::zero(); batch * fout];
                let mut all_cols = if keep { Vec::with_capacity(batch * patch * pos) } else { Vec::new() };
                let mut cols = vec![T::zero(); patch * pos];
                for b in 0..batch {
                    im2col(&x[b * fin..(b + 1) * fin], geom, &mut cols);
                    let out = &mut y[b * fout..(b + 1) * fout];
                    for (f, row) in out.chunks_mut(pos).enumerate() {
                        row.fill(bias[f]);
                    }
                    matmul(Mat::new(weight, geom.filters, patch), Mat::new(&cols, patch, pos), out, T::one());
                    if keep {
                        all_cols.extend_from_slice(&cols);
                    }
                }
                let saved = if keep { Saved::Cols(all_cols) } else { Saved::None };
                (y, saved)
            }
            Layer::Relu { .. } => {
                let y: Vec<T> = x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
                let saved = if keep { Saved::Mask(x.iter().map(|&v| v > T::zero()).collect()) } else { Saved::None };
                (y, saved)
            }
            Layer::MaxPool2 { channels, height, width } => {
                let (oh, ow) = (height / 2, width / 2);
                let fin = channels * height * width;
                let fout = channels * oh * ow;
                let mut y = Vec::with_capacity(batch * fout);
                let mut arg = if keep { Vec::with_capacity(batch * fout) } else { Vec::new() };
                for b in 0..batch {
                    let xb = &x[b * fin..(b + 1) * fin];
                    for c in 0..*channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let base = c * height * width;
                                let mut best_i = base + (2 * oy) * width + 2 * ox;
                                let mut best = xb[best_i];
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let i = base + (2 * oy + dy) * width + 2 * ox + dx;
                                    if xb[i] > best {
                                        best = xb[i];
                                        best_i = i;
                                    }
                                }
                                y.push(best);
                                if keep {
                                    arg.push(b * fin + best_i);
                                }
                            }
                        }
                    }
                }
                let saved = if keep { Saved::Argmax(arg) } else { Saved::None };
                (y, saved)
            }
        }
    }

    /// Backward: returns `d input` and, when `grads` is given, accumulates
    /// `(d weight, d bias)` into it.
    pub fn backward(&self, dy: &[T], saved: &Saved<T>, batch: usize, grads: Option<(&mut [T], &mut [T])>) -> Vec<T> {
        match (self, saved) {
            (Layer::Dense { weight, inputs, outputs, .. }, Saved::Input(x)) => {
                if let Some((dw, db)) = grads {
                    matmul(Mat::new(dy, batch, *outputs).t(), Mat::new(x, batch, *inputs), dw, T::one());
                    for row in dy.chunks(*outputs) {
                        for (g, &v) in db.iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                }
                let mut dx = vec![T::zero(); batch * inputs];
                matmul(Mat::new(dy, batch, *outputs), Mat::new(weight, *outputs, *inputs), &mut dx, T::zero());
                dx
            }
            (Layer::Conv { weight, geom, .. }, Saved::Cols(all_cols)) => {
                let (fin, fout) = (geom.in_features(), geom.out_features());
                let (patch, pos) = (geom.patch(), geom.positions());
                let mut dx = vec![T::zero(); batch * fin];
                let mut dcols = vec![T::zero(); patch * pos];
                let mut grads = grads;
                for b in 0..batch {
                    let dyb = &dy[b * fout..(b + 1) * fout];
                    let cols = &all_cols[b * patch * pos..(b + 1) * patch * pos];
                    if let Some((dw, db)) = grads.as_mut() {
                        matmul(Mat::new(dyb, geom.filters, pos), Mat::new(cols, patch, pos).t(), dw, T::one());
                        for (f, row) in dyb.chunks(pos).enumerate() {
                            db[f] = db[f] + row.iter().copied().sum::<T>();
                        }
                    }
                    matmul(Mat::new(weight, geom.filters, patch).t(), Mat::new(dyb, geom.filters, pos), &mut dcols, T::zero());
                    col2im(&dcols, geom, &mut dx[b * fin..(b + 1) * fin]);
                }
                dx
            }
            (Layer::Relu { .. }, Saved::Mask(mask)) => {
                dy.iter().zip(mask).map(|(&g, &m)| if m { g } else { T::zero() }).collect()
            }
            (Layer::MaxPool2 { channels, height, width }, Saved::Argmax(arg)) => {
                let mut dx = vec![T::zero(); batch * channels * height * width];
                for (&g, &i) in dy.iter().zip(arg) {
                    dx[i] = dx[i] + g;
                }
                dx
            }
            _ => unreachable!("backward called without saved forward state"),
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let pos = oh * ow;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * pos;
                for oy in 0..oh {
                    let src = &plane[(oy + ky) * g.width + kx..(oy + ky) * g.width + kx + ow];
                    cols[row + oy * ow..row + oy * ow + ow].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let pos = oh * ow;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * pos;
                for oy in 0..oh {
                    let dst = &mut plane[(oy + ky) * g.width + kx..(oy + ky) * g.width + kx + ow];
                    for (d, &v) in dst.iter_mut().zip(&cols[row + oy * ow..row + oy * ow + ow]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}
