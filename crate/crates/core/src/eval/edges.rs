//! Canny edge maps and the cosine similarity between `|r|` and edges.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CannyParams {
    pub sigma: f64,
    /// Weak-edge threshold as a fraction of the largest gradient magnitude.
    pub low: f64,
    /// Strong-edge threshold as a fraction of the largest gradient magnitude.
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { sigma: 1.0, low: 0.1, high: 0.3 }
    }
}

fn at(img: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let yy = y.clamp(0, h as isize - 1) as usize;
    let xx = x.clamp(0, w as isize - 1) as usize;
    img[yy * w + xx]
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= z);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-radius..=radius)
                .zip(&kernel)
                .map(|(d, k)| k * at(img, h, w, y as isize, x as isize + d))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-radius..=radius)
                .zip(&kernel)
                .map(|(d, k)| k * at(&tmp, h, w, y as isize + d, x as isize))
                .sum();
        }
    }
    out
}

/// Sobel gradients `(gx, gy)` with replicated borders.
pub fn sobel(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dy: isize, dx: isize| at(img, h, w, y + dy, x + dx);
            let i = y as usize * w + x as usize;
            gx[i] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            gy[i] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
        }
    }
    (gx, gy)
}

/// Binary Canny edge map of a single-channel `h x w` image.
pub fn canny(img: &[f64], h: usize, w: usize, p: &CannyParams) -> Vec<bool> {
    let blurred = gaussian_blur(img, h, w, p.sigma);
    let (gx, gy) = sobel(&blurred, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().copied().fold(0.0, f64::max);
    let mut edges = vec![false; h * w];
    if max <= 0.0 {
        return edges;
    }
    let get = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    // Non-maximum suppression along the gradient direction, quantized to 45°.
    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (yi, xi) = (y as isize, x as isize);
            if m >= get(yi + dy, xi + dx) && m >= get(yi - dy, xi - dx) {
                thin[i] = m;
            }
        }
    }
    // Double threshold with 8-connected hysteresis.
    let (lo, hi) = (p.low * max, p.high * max);
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= hi {
            edges[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges[j] && thin[j] >= lo && thin[j] > 0.0 {
                    edges[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    edges
}

/// `a·b / (‖a‖ ‖b‖)`, defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Splits a sample shape into `(channels, height, width)`.
fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!("edge maps need [h, w] or [c, h, w] samples, got {shape:?}"))),
    }
}

/// Channel mean of one `c x h x w` sample.
fn channel_mean<T: Scalar>(v: &[T], c: usize, hw: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    (0..hw).map(|p| (0..c).map(|ch| f(v[ch * hw + p].as_f64())).sum::<f64>() / c as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeSimilarity {
    /// Mean cosine over the images that have at least one edge pixel.
    pub mean: f64,
    pub used: usize,
    /// Images whose edge map is empty (for example all black).
    pub skipped: usize,
}

/// Mean cosine similarity between `|r|` and the binary Canny edge map of each image.
/// Multi-channel inputs are reduced to their channel mean first.
pub fn edge_cosine_similarity<T: Scalar>(r: &Tensor<T>, images: &Tensor<T>, params: &CannyParams) -> Result<EdgeSimilarity> {
    if images.shape().len() < 2 || &images.shape()[1..] != r.shape() {
        return Err(Error::InputShape { expected: r.shape().to_vec(), got: images.shape().to_vec() });
    }
    let (c, h, w) = chw(r.shape())?;
    let abs_r = channel_mean(r.data(), c, h * w, f64::abs);
    let mut total = 0.0;
    let (mut used, mut skipped) = (0, 0);
    for i in 0..images.rows() {
        let gray = channel_mean(images.row(i), c, h * w, |v| v);
        let edges: Vec<f64> = canny(&gray, h, w, params).into_iter().map(|e| if e { 1.0 } else { 0.0 }).collect();
        if edges.iter().all(|&e| e == 0.0) {
            skipped += 1;
            continue;
        }
        total += cosine(&abs_r, &edges);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Precondition(format!("no image produced an edge map ({skipped} skipped)")));
    }
    Ok(EdgeSimilarity { mean: total / used as f64, used, skipped })
}
