//! Convolution blocks: `Conv → [BN] → [ReLU]`, lowered to GEMM via im2col.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::init;
use crate::tensor::{gemm, join, FeatureMap, Module, Param, Scalar};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over `[N, H, W]` per channel.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::zeros(vec![channels]),
            running_mean: Param::buffer(vec![channels], vec![T::zero(); channels]),
            running_var: Param::buffer(vec![channels], vec![T::one(); channels]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    in_shape: [usize; 4],
    ho: usize,
    wo: usize,
    col: Vec<T>,
    /// Normalized pre-affine activations, `[C_out, N*Ho*Wo]`.
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Post-activation output, `[C_out, N*Ho*Wo]`; used as the ReLU mask.
    out: Vec<T>,
}

/// One `k×k` convolution with bias, optionally followed by BN and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub bn: Option<BatchNorm<T>>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub apply_relu: bool,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> ConvBlock<T> {
    /// Zero-initialized block.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        apply_bn: bool,
        apply_relu: bool,
    ) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(invalid!("conv kernel must be 1 or 3, got {kernel}"));
        }
        if c_in == 0 || c_out == 0 || stride == 0 {
            return Err(invalid!("conv needs c_in, c_out, stride >= 1"));
        }
        let mut bias = Param::zeros(vec![c_out]);
        if apply_bn {
            // BN subtracts the batch mean, so a bias here has an exactly zero gradient.
            bias.freeze();
        }
        Ok(Self {
            weight: Param::zeros(vec![c_out, c_in, kernel, kernel]),
            bias,
            bn: apply_bn.then(|| BatchNorm::new(c_out)),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            apply_relu,
            cache: None,
        })
    }

    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn init_he(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        apply_bn: bool,
        apply_relu: bool,
    ) -> Result<Self> {
        let mut block = Self::new(c_in, c_out, kernel, stride, padding, apply_bn, apply_relu)?;
        let fan_in = c_in * kernel * kernel;
        block.weight.value = init::he_normal(rng, fan_in, block.weight.len());
        Ok(block)
    }

    /// 1×1, stride 1, no padding.
    pub fn pointwise(c_in: usize, c_out: usize, apply_bn: bool, apply_relu: bool) -> Result<Self> {
        Self::new(c_in, c_out, 1, 1, 0, apply_bn, apply_relu)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, p, s) = (self.kernel, self.padding, self.stride);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(invalid!("conv input {h}x{w} too small for kernel {k} with padding {p}"));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<(usize, usize)> {
        if x.c != self.c_in {
            return Err(invalid!("conv expects {} input channels, got {}", self.c_in, x.c));
        }
        x.ensure_finite("conv input")?;
        self.output_hw(x.h, x.w)
    }

    /// Dispatches to [`ConvBlock::forward_train`] or [`ConvBlock::forward_eval`].
    pub fn forward(&mut self, x: &FeatureMap<T>, training: bool) -> Result<FeatureMap<T>> {
        if training {
            self.forward_train(x)
        } else {
            self.forward_eval(x)
        }
    }

    /// Batch-statistics BN, updates running stats, caches for backward.
    pub fn forward_train(&mut self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (ho, wo) = self.check_input(x)?;
        let col = im2col(x, self.kernel, self.stride, self.padding, ho, wo);
        let np = x.n * ho * wo;
        let mut mat = self.linear_part(&col, np);
        let (xhat, inv_std) = match &mut self.bn {
            Some(bn) => batch_norm_train(bn, &mut mat, np),
            None => (Vec::new(), Vec::new()),
        };
        if self.apply_relu {
            relu_inplace(&mut mat);
        }
        let out = scatter_nchw(&mat, x.n, self.c_out, ho * wo, ho, wo);
        self.cache = Some(ConvCache { in_shape: x.shape(), ho, wo, col, xhat, inv_std, out: mat });
        Ok(out)
    }

    /// Running-statistics BN; pure function of the parameters.
    pub fn forward_eval(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (ho, wo) = self.check_input(x)?;
        let col = im2col(x, self.kernel, self.stride, self.padding, ho, wo);
        let np = x.n * ho * wo;
        let mut mat = self.linear_part(&col, np);
        if let Some(bn) = &self.bn {
            let eps = T::of(BN_EPS);
            for c in 0..self.c_out {
                let scale = bn.gamma.value[c] / (bn.running_var.value[c] + eps).sqrt();
                let shift = bn.beta.value[c] - bn.running_mean.value[c] * scale;
                for v in &mut mat[c * np..(c + 1) * np] {
                    *v = *v * scale + shift;
                }
            }
        }
        if self.apply_relu {
            relu_inplace(&mut mat);
        }
        Ok(scatter_nchw(&mat, x.n, self.c_out, ho * wo, ho, wo))
    }

    fn linear_part(&self, col: &[T], np: usize) -> Vec<T> {
        let kk = self.c_in * self.kernel * self.kernel;
        let mut mat = vec![T::zero(); self.c_out * np];
        gemm(self.c_out, kk, np, &self.weight.value, false, col, false, &mut mat, false);
        for (c, row) in mat.chunks_exact_mut(np).enumerate() {
            let b = self.bias.value[c];
            for v in row {
                *v += b;
            }
        }
        mat
    }

    /// Accumulates parameter gradients; returns the input gradient when `need_dx`.
    pub fn backward(&mut self, dy: &FeatureMap<T>, need_dx: bool) -> Result<Option<FeatureMap<T>>> {
        let cache = self.cache.take().ok_or_else(|| invalid!("conv backward without forward_train"))?;
        let [n, _, h, w] = cache.in_shape;
        let p = cache.ho * cache.wo;
        let np = n * p;
        if dy.shape() != [n, self.c_out, cache.ho, cache.wo] {
            return Err(invalid!("conv backward got gradient of shape {:?}", dy.shape()));
        }
        let mut dmat = gather_nchw(dy, self.c_out, p);
        if self.apply_relu {
            for (d, &o) in dmat.iter_mut().zip(&cache.out) {
                if o <= T::zero() {
                    *d = T::zero();
                }
            }
        }
        if let Some(bn) = &mut self.bn {
            batch_norm_backward(bn, &mut dmat, &cache.xhat, &cache.inv_std, np);
        }
        let dbias: Vec<T> = dmat.chunks_exact(np).map(|r| r.iter().copied().sum()).collect();
        self.bias.accumulate(&dbias);
        let kk = self.c_in * self.kernel * self.kernel;
        if self.weight.trainable {
            gemm(self.c_out, np, kk, &dmat, false, &cache.col, true, &mut self.weight.grad, true);
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dcol = vec![T::zero(); kk * np];
        gemm(kk, self.c_out, np, &self.weight.value, true, &dmat, false, &mut dcol, false);
        let dx = col2im(&dcol, [n, self.c_in, h, w], self.kernel, self.stride, self.padding, cache.ho, cache.wo);
        Ok(Some(dx))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        if let Some(bn) = &self.bn {
            bn.visit(&join(prefix, "bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&join(prefix, "bn"), f);
        }
    }
}

fn relu_inplace<T: Scalar>(v: &mut [T]) {
    super::kink::record(v);
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Normalizes each row of `mat` in place with batch statistics; returns `(xhat, inv_std)`.
fn batch_norm_train<T: Scalar>(bn: &mut BatchNorm<T>, mat: &mut [T], np: usize) -> (Vec<T>, Vec<T>) {
    let channels = mat.len() / np;
    let inv_m = T::one() / T::of(np as f64);
    let momentum = T::of(BN_MOMENTUM);
    let unbias = if np > 1 { T::of(np as f64 / (np as f64 - 1.0)) } else { T::one() };
    let mut xhat = vec![T::zero(); mat.len()];
    let mut inv_std = vec![T::zero(); channels];
    for c in 0..channels {
        let row = &mut mat[c * np..(c + 1) * np];
        let mean = row.iter().copied().sum::<T>() * inv_m;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
        let istd = T::one() / (var + T::of(BN_EPS)).sqrt();
        inv_std[c] = istd;
        let (g, b) = (bn.gamma.value[c], bn.beta.value[c]);
        for (v, xh) in row.iter_mut().zip(&mut xhat[c * np..(c + 1) * np]) {
            *xh = (*v - mean) * istd;
            *v = g * *xh + b;
        }
        let rm = &mut bn.running_mean.value[c];
        *rm = (T::one() - momentum) * *rm + momentum * mean;
        let rv = &mut bn.running_var.value[c];
        *rv = (T::one() - momentum) * *rv + momentum * var * unbias;
    }
    (xhat, inv_std)
}

/// Replaces `dmat` (gradient w.r.t. BN output) by the gradient w.r.t. BN input.
fn batch_norm_backward<T: Scalar>(bn: &mut BatchNorm<T>, dmat: &mut [T], xhat: &[T], inv_std: &[T], np: usize) {
    let channels = dmat.len() / np;
    let m = T::of(np as f64);
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for c in 0..channels {
        let d = &mut dmat[c * np..(c + 1) * np];
        let xh = &xhat[c * np..(c + 1) * np];
        let sum_d: T = d.iter().copied().sum();
        let sum_dx: T = d.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        dgamma[c] = sum_dx;
        dbeta[c] = sum_d;
        let k = bn.gamma.value[c] * inv_std[c] / m;
        for (dv, &x) in d.iter_mut().zip(xh) {
            *dv = k * (m * *dv - sum_d - x * sum_dx);
        }
    }
    bn.gamma.accumulate(&dgamma);
    bn.beta.accumulate(&dbeta);
}

/// Lowers `x` to a `[C*k*k, N*Ho*Wo]` patch matrix.
pub fn im2col<T: Scalar>(x: &FeatureMap<T>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let np = x.n * ho * wo;
    let mut col = vec![T::zero(); x.c * k * k * np];
    for ci in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * np..(row + 1) * np];
                for b in 0..x.n {
                    let plane = x.plane(b, ci);
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let drow = &mut dst[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(
    col: &[T],
    shape: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> FeatureMap<T> {
    let [n, c, h, w] = shape;
    let np = n * ho * wo;
    let mut dx = FeatureMap::zeros(n, c, h, w);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * np..(row + 1) * np];
                for b in 0..n {
                    let plane = dx.plane_mut(b, ci);
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[C, N*P]` → `[N, C, H, W]`.
fn scatter_nchw<T: Scalar>(mat: &[T], n: usize, c: usize, p: usize, h: usize, w: usize) -> FeatureMap<T> {
    let mut out = FeatureMap::zeros(n, c, h, w);
    let np = n * p;
    for ci in 0..c {
        for b in 0..n {
            out.plane_mut(b, ci).copy_from_slice(&mat[ci * np + b * p..ci * np + (b + 1) * p]);
        }
    }
    out
}

/// `[N, C, H, W]` → `[C, N*P]`.
fn gather_nchw<T: Scalar>(x: &FeatureMap<T>, c: usize, p: usize) -> Vec<T> {
    let np = x.n * p;
    let mut mat = vec![T::zero(); c * np];
    for ci in 0..c {
        for b in 0..x.n {
            mat[ci * np + b * p..ci * np + (b + 1) * p].copy_from_slice(x.plane(b, ci));
        }
    }
    mat
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(h: usize, w: usize, v: Vec<f64>) -> FeatureMap<f64> {
        FeatureMap::from_vec(1, 1, h, w, v).unwrap()
    }

    /// Direct summation over the receptive field.
    fn conv_oracle(x: &FeatureMap<f64>, block: &ConvBlock<f64>) -> FeatureMap<f64> {
        let (ho, wo) = block.output_hw(x.h, x.w).unwrap();
        let k = block.kernel;
        let mut out = FeatureMap::zeros(x.n, block.c_out, ho, wo);
        for b in 0..x.n {
            for co in 0..block.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = block.bias.value[co];
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * block.stride + ky) as isize - block.padding as isize;
                                    let ix = (ox * block.stride + kx) as isize - block.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        acc += block.weight.value[((co * x.c + ci) * k + ky) * k + kx]
                                            * x.at(b, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let i = out.index(b, co, oy, ox);
                        out.data[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut block = ConvBlock::<f64>::pointwise(1, 1, false, false).unwrap();
        block.weight.value = vec![1.0];
        let x = single(3, 2, vec![-1.5, 0.0, 2.0, 3.25, -7.0, 1e-3]);
        let y = block.forward_eval(&x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-7);
    }

    #[test]
    fn zero_weights_with_relu_give_zeros() {
        let mut block = ConvBlock::<f32>::new(2, 3, 3, 1, 1, false, true).unwrap();
        let x = FeatureMap::filled(2, 2, 4, 4, 5.0f32);
        let y = block.forward_train(&x).unwrap();
        assert_eq!(y.shape(), [2, 3, 4, 4]);
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_kernel_counts_receptive_field() {
        let mut block = ConvBlock::<f64>::new(1, 1, 3, 1, 1, false, false).unwrap();
        block.weight.value = vec![1.0; 9];
        let y = block.forward_eval(&single(3, 3, vec![1.0; 9])).unwrap();
        assert_eq!(y.data, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn matches_direct_summation_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p, h, w) in &[(3, 1, 1, 5, 4), (3, 2, 1, 7, 6), (1, 1, 0, 3, 3), (3, 2, 0, 5, 5), (1, 2, 0, 4, 5)] {
            let mut block = ConvBlock::<f64>::init_he(&mut rng, 3, 4, k, s, p, false, false).unwrap();
            block.bias.value = init::uniform(&mut rng, 0.5, 4);
            let x = FeatureMap::from_vec(2, 3, h, w, init::uniform(&mut rng, 1.0, 2 * 3 * h * w)).unwrap();
            let got = block.forward_eval(&x).unwrap();
            assert!(got.max_abs_diff(&conv_oracle(&x, &block)) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let block = ConvBlock::<f32>::pointwise(2, 2, false, false).unwrap();
        let x = FeatureMap::zeros(1, 3, 2, 2);
        assert!(matches!(block.forward_eval(&x), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let block = ConvBlock::<f32>::pointwise(1, 1, false, false).unwrap();
        let x = FeatureMap::from_vec(1, 1, 1, 2, vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(block.forward_eval(&x), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn bad_kernel_size_rejected() {
        assert!(ConvBlock::<f32>::new(1, 1, 5, 1, 2, false, false).is_err());
    }

    #[test]
    fn train_bn_normalizes_and_updates_running_stats() {
        let mut block = ConvBlock::<f64>::pointwise(1, 1, true, false).unwrap();
        block.weight.value = vec![1.0];
        let x = single(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = block.forward_train(&x).unwrap();
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        let var: f64 = y.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + BN_EPS)).abs() < 1e-9);
        let bn = block.bn.as_ref().unwrap();
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-12);
        // unbiased variance 5/3 blended into the initial 1.0
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_bn_is_bitwise_deterministic() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut block = ConvBlock::<f32>::init_he(&mut rng, 3, 5, 3, 2, 1, true, true).unwrap();
        let x = FeatureMap::from_vec(2, 3, 6, 6, init::uniform(&mut rng, 1.0, 216)).unwrap();
        block.forward_train(&x).unwrap();
        let a = block.forward_eval(&x).unwrap();
        let b = block.forward_eval(&x).unwrap();
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
