//! Stateless tensor operations and their adjoints.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::init;
use crate::tensor::{gemm, join, FeatureMap, Matrix, Module, Param, Scalar};

pub fn relu<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    crate::nn::kink::record(&x.data);
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `dy` masked by `y > 0`, where `y` is the ReLU output.
pub fn relu_backward<T: Scalar>(y: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    y.zip_map(dy, |o, d| if o > T::zero() { d } else { T::zero() })
}

/// Logistic function, clamped so every output lies strictly inside `(0, 1)`
/// even where the exact value rounds to an endpoint.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::of(2.0);
    y.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(sigmoid_scalar)
}

/// Gradient through the sigmoid given its output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    y.zip_map(dy, |s, d| d * s * (T::one() - s))
}

/// Adaptive partition boundaries `[floor(i*len/g), floor((i+1)*len/g))`.
fn cell_bounds(len: usize, g: usize) -> Vec<(usize, usize)> {
    (0..g).map(|i| (i * len / g, (i + 1) * len / g)).collect()
}

/// Spatial local average pooling onto a `g×g` grid of cell means.
pub fn slap<T: Scalar>(x: &FeatureMap<T>, g: usize) -> Result<FeatureMap<T>> {
    if g == 0 || g > x.h || g > x.w {
        return Err(invalid!("slap grid {g} must be in 1..=min({}, {})", x.h, x.w));
    }
    let rows = cell_bounds(x.h, g);
    let cols = cell_bounds(x.w, g);
    let mut out = FeatureMap::zeros(x.n, x.c, g, g);
    for n in 0..x.n {
        for c in 0..x.c {
            let plane = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (i, &(y0, y1)) in rows.iter().enumerate() {
                for (j, &(x0, x1)) in cols.iter().enumerate() {
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for v in &plane[y * x.w + x0..y * x.w + x1] {
                            acc += *v;
                        }
                    }
                    dst[i * g + j] = acc / T::of(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`slap`] for an input of spatial size `h×w`.
pub fn slap_backward<T: Scalar>(dy: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let g = dy.h;
    let rows = cell_bounds(h, g);
    let cols = cell_bounds(w, g);
    let mut dx = FeatureMap::zeros(dy.n, dy.c, h, w);
    for n in 0..dy.n {
        for c in 0..dy.c {
            let src = dy.plane(n, c);
            let plane = dx.plane_mut(n, c);
            for (i, &(y0, y1)) in rows.iter().enumerate() {
                for (j, &(x0, x1)) in cols.iter().enumerate() {
                    let v = src[i * g + j] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                    for y in y0..y1 {
                        for d in &mut plane[y * w + x0..y * w + x1] {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Per-destination `(lo, hi, frac)` taps of half-pixel-center linear interpolation.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and no corner alignment.
pub fn resize_bilinear<T: Scalar>(x: &FeatureMap<T>, out_h: usize, out_w: usize) -> FeatureMap<T> {
    let ty = linear_taps(x.h, out_h);
    let tx = linear_taps(x.w, out_w);
    let mut out = FeatureMap::zeros(x.n, x.c, out_h, out_w);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::of(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::of(fx);
                    let top = src[y0 * x.w + x0] * (T::one() - fx) + src[y0 * x.w + x1] * fx;
                    let bot = src[y1 * x.w + x0] * (T::one() - fx) + src[y1 * x.w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`] back to an `h×w` source.
pub fn resize_bilinear_backward<T: Scalar>(dy: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let ty = linear_taps(h, dy.h);
    let tx = linear_taps(w, dy.w);
    let mut dx = FeatureMap::zeros(dy.n, dy.c, h, w);
    for n in 0..dy.n {
        for c in 0..dy.c {
            let src = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::of(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::of(fx);
                    let g = src[oy * dy.w + ox];
                    dst[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                    dst[y0 * w + x1] += g * (T::one() - fy) * fx;
                    dst[y1 * w + x0] += g * fy * (T::one() - fx);
                    dst[y1 * w + x1] += g * fy * fx;
                }
            }
        }
    }
    dx
}

fn nearest_index(src: usize, dst: usize) -> Vec<usize> {
    (0..dst).map(|d| d * src / dst).collect()
}

/// Nearest-neighbour resize: destination `d` reads source `floor(d * src / dst)`.
pub fn upsample_nearest<T: Scalar>(x: &FeatureMap<T>, out_h: usize, out_w: usize) -> FeatureMap<T> {
    let iy = nearest_index(x.h, out_h);
    let ix = nearest_index(x.w, out_w);
    let mut out = FeatureMap::zeros(x.n, x.c, out_h, out_w);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &sy) in iy.iter().enumerate() {
                for (ox, &sx) in ix.iter().enumerate() {
                    dst[oy * out_w + ox] = src[sy * x.w + sx];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(dy: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let iy = nearest_index(h, dy.h);
    let ix = nearest_index(w, dy.w);
    let mut dx = FeatureMap::zeros(dy.n, dy.c, h, w);
    for n in 0..dy.n {
        for c in 0..dy.c {
            let src = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for (oy, &sy) in iy.iter().enumerate() {
                for (ox, &sx) in ix.iter().enumerate() {
                    dst[sy * w + sx] += src[oy * dy.w + ox];
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool<T: Scalar>(x: &FeatureMap<T>) -> Matrix<T> {
    let inv = T::one() / T::of(x.plane_len() as f64);
    let mut out = Matrix::zeros(x.n, x.c);
    for n in 0..x.n {
        for c in 0..x.c {
            out.data[n * x.c + c] = x.plane(n, c).iter().copied().sum::<T>() * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Matrix<T>, h: usize, w: usize) -> FeatureMap<T> {
    let inv = T::one() / T::of((h * w) as f64);
    let mut dx = FeatureMap::zeros(dy.rows, dy.cols, h, w);
    for n in 0..dy.rows {
        for c in 0..dy.cols {
            let g = dy.at(n, c) * inv;
            dx.plane_mut(n, c).fill(g);
        }
    }
    dx
}

/// Fully connected layer `y = x Wᵀ + b`.
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Matrix<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self { weight: Param::zeros(vec![out_dim, in_dim]), bias: Param::zeros(vec![out_dim]), input: None }
    }

    /// Uniform `±1/sqrt(in_dim)` weights and bias.
    pub fn init_uniform(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut l = Self::new(in_dim, out_dim);
        l.weight.value = init::uniform(rng, bound, in_dim * out_dim);
        l.bias.value = init::uniform(rng, bound, out_dim);
        l
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward_eval(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        linear(x, &self.weight.value, &self.bias.value, self.out_dim())
    }

    pub fn forward_train(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let y = self.forward_eval(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Matrix<T>) -> Result<Matrix<T>> {
        let x = self.input.take().ok_or_else(|| invalid!("linear backward without forward_train"))?;
        let (k, d) = (self.out_dim(), self.in_dim());
        if self.weight.trainable {
            gemm(k, x.rows, d, &dy.data, true, &x.data, false, &mut self.weight.grad, true);
        }
        let db: Vec<T> = (0..k).map(|j| (0..dy.rows).map(|r| dy.at(r, j)).sum()).collect();
        self.bias.accumulate(&db);
        let mut dx = Matrix::zeros(x.rows, d);
        gemm(x.rows, k, d, &dy.data, false, &self.weight.value, false, &mut dx.data, false);
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `x [N, D] · Wᵀ [D, K] + b`.
pub fn linear<T: Scalar>(x: &Matrix<T>, weight: &[T], bias: &[T], out_dim: usize) -> Result<Matrix<T>> {
    if out_dim == 0 || weight.len() != out_dim * x.cols || bias.len() != out_dim {
        return Err(invalid!(
            "linear: input has {} features, weight has {} values for {out_dim} outputs, bias {}",
            x.cols,
            weight.len(),
            bias.len()
        ));
    }
    let mut y = Matrix::zeros(x.rows, out_dim);
    gemm(x.rows, x.cols, out_dim, &x.data, false, weight, true, &mut y.data, false);
    for row in y.data.chunks_exact_mut(out_dim) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(logits.cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy of `softmax(logits)` against integer labels, with its
/// gradient `(softmax − onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    if labels.len() != logits.rows || logits.rows == 0 {
        return Err(invalid!("{} labels for {} logit rows", labels.len(), logits.rows));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols) {
        return Err(invalid!("label {bad} out of range for {} classes", logits.cols));
    }
    let n = T::of(logits.rows as f64);
    let mut grad = softmax_rows(logits);
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[label];
        grad.data[r * logits.cols + label] -= T::one();
    }
    for g in &mut grad.data {
        *g /= n;
    }
    Ok((loss / n, grad))
}
