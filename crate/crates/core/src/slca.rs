//! Spatially localized channel attention and the ablation adapters that share
//! its interface.
//!
//! `A = σ(Conv₂(ReLU(Conv₁(SLAP(F, g)))))`, applied to a backbone stage as the
//! gated residual `S + S ⊙ up(A)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{
    init, resize_bilinear, resize_bilinear_backward, sigmoid, sigmoid_backward, slap, slap_backward,
    upsample_nearest, upsample_nearest_backward, ConvBlock,
};
use crate::tensor::{join, FeatureMap, Module, Param, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlcaConfig {
    /// Channel reduction factor.
    pub r: usize,
    /// Pooling grid.
    pub g: usize,
}

impl Default for SlcaConfig {
    fn default() -> Self {
        Self { r: 4, g: 4 }
    }
}

impl SlcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.g == 0 {
            return Err(invalid!("slca r and g must be positive (r={}, g={})", self.r, self.g));
        }
        Ok(())
    }

    pub fn hidden(&self, c_in: usize) -> usize {
        (c_in / self.r).max(1)
    }

    /// Grid actually used on an `h × w` input.
    pub fn grid_for(&self, h: usize, w: usize) -> usize {
        self.g.min(h).min(w)
    }
}

/// Trainable parameter count of one SLCA block (weights, conv2 bias-free,
/// BN scale and shift): `C·h + h·C_out + 2h + 2·C_out`, plus `h + C_out` when
/// the pre-BN biases are counted.
pub fn slca_param_count(c_in: usize, hidden: usize, c_out: usize, count_pre_bn_bias: bool) -> usize {
    let base = c_in * hidden + hidden * c_out + 2 * hidden + 2 * c_out;
    if count_pre_bn_bias {
        base + hidden + c_out
    } else {
        base
    }
}

struct PoolCache<T> {
    in_hw: (usize, usize),
    att: FeatureMap<T>,
}

pub struct SlcaBlock<T> {
    pub conv1: ConvBlock<T>,
    pub conv2: ConvBlock<T>,
    pub g: usize,
    cache: Option<PoolCache<T>>,
}

impl<T: Scalar> SlcaBlock<T> {
    /// Zero weights, identity BN.
    pub fn zeros(c_in: usize, c_out: usize, cfg: SlcaConfig) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden(c_in);
        Ok(Self {
            conv1: ConvBlock::pointwise(c_in, hidden, true, true)?,
            conv2: ConvBlock::pointwise(hidden, c_out, true, false)?,
            g: cfg.g,
            cache: None,
        })
    }

    pub fn init(rng: &mut impl rand::Rng, c_in: usize, c_out: usize, cfg: SlcaConfig) -> Result<Self> {
        let mut b = Self::zeros(c_in, c_out, cfg)?;
        b.conv1.weight.value = init::he_normal(rng, c_in, b.conv1.weight.len());
        b.conv2.weight.value = init::he_normal(rng, b.conv1.c_out, b.conv2.weight.len());
        Ok(b)
    }

    pub fn c_in(&self) -> usize {
        self.conv1.c_in
    }

    pub fn c_out(&self) -> usize {
        self.conv2.c_out
    }

    /// Attention map `[N, c_out, g, g]`, entries in (0, 1).
    pub fn forward(&mut self, f: &FeatureMap<T>, training: bool) -> Result<FeatureMap<T>> {
        f.ensure_finite("slca input")?;
        let pooled = slap(f, self.g)?;
        if !training {
            self.cache = None;
            return self.forward_eval(f);
        }
        let h = self.conv1.forward_train(&pooled)?;
        let att = sigmoid(&self.conv2.forward_train(&h)?);
        self.cache = Some(PoolCache { in_hw: (f.h, f.w), att: att.clone() });
        Ok(att)
    }

    /// Running-statistics forward; does not touch the backward cache.
    pub fn forward_eval(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        f.ensure_finite("slca input")?;
        let h = self.conv1.forward_eval(&slap(f, self.g)?)?;
        Ok(sigmoid(&self.conv2.forward_eval(&h)?))
    }

    /// Backpropagates `dA`; returns `dF` only when requested.
    pub fn backward(&mut self, d_att: &FeatureMap<T>, need_dx: bool) -> Result<Option<FeatureMap<T>>> {
        let cache = self.cache.take().ok_or_else(|| invalid!("slca backward without training forward"))?;
        let dz = sigmoid_backward(&cache.att, d_att);
        let dh = self.conv2.backward(&dz, true)?.expect("requested dx");
        let dp = self.conv1.backward(&dh, need_dx)?;
        Ok(dp.map(|dp| slap_backward(&dp, cache.in_hw.0, cache.in_hw.1)))
    }
}

impl<T: Scalar> Module<T> for SlcaBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// `σ(adapter(SLAP(F, g)))` with a single linear 1×1 conv (no BN, no ReLU).
pub struct SigmoidAttention<T> {
    pub adapter: ConvBlock<T>,
    pub g: usize,
    cache: Option<PoolCache<T>>,
}

impl<T: Scalar> SigmoidAttention<T> {
    pub fn zeros(c_in: usize, c_out: usize, g: usize) -> Result<Self> {
        if g == 0 {
            return Err(invalid!("pooling grid must be positive"));
        }
        Ok(Self { adapter: ConvBlock::pointwise(c_in, c_out, false, false)?, g, cache: None })
    }

    pub fn init(rng: &mut impl rand::Rng, c_in: usize, c_out: usize, g: usize) -> Result<Self> {
        let mut s = Self::zeros(c_in, c_out, g)?;
        s.adapter.weight.value = init::he_normal(rng, c_in, s.adapter.weight.len());
        Ok(s)
    }

    pub fn forward(&mut self, f: &FeatureMap<T>, training: bool) -> Result<FeatureMap<T>> {
        f.ensure_finite("attention input")?;
        let pooled = slap(f, self.g)?;
        if !training {
            self.cache = None;
            return self.forward_eval(f);
        }
        let att = sigmoid(&self.adapter.forward_train(&pooled)?);
        self.cache = Some(PoolCache { in_hw: (f.h, f.w), att: att.clone() });
        Ok(att)
    }

    pub fn forward_eval(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        f.ensure_finite("attention input")?;
        Ok(sigmoid(&self.adapter.forward_eval(&slap(f, self.g)?)?))
    }

    pub fn backward(&mut self, d_att: &FeatureMap<T>, need_dx: bool) -> Result<Option<FeatureMap<T>>> {
        let cache = self.cache.take().ok_or_else(|| invalid!("attention backward without training forward"))?;
        let dz = sigmoid_backward(&cache.att, d_att);
        let dp = self.adapter.backward(&dz, need_dx)?;
        Ok(dp.map(|dp| slap_backward(&dp, cache.in_hw.0, cache.in_hw.1)))
    }
}

impl<T: Scalar> Module<T> for SigmoidAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.adapter.visit(&join(prefix, "adapter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
    }
}

/// `resize_bilinear(adapter(F), H_s, W_s)`, added to the stage ungated.
pub struct AddAdapter<T> {
    pub adapter: ConvBlock<T>,
    cache_hw: Option<(usize, usize)>,
}

impl<T: Scalar> AddAdapter<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self { adapter: ConvBlock::pointwise(c_in, c_out, false, false)?, cache_hw: None })
    }

    pub fn init(rng: &mut impl rand::Rng, c_in: usize, c_out: usize) -> Result<Self> {
        let mut s = Self::zeros(c_in, c_out)?;
        s.adapter.weight.value = init::he_normal(rng, c_in, s.adapter.weight.len());
        Ok(s)
    }

    pub fn forward(&mut self, f: &FeatureMap<T>, h_s: usize, w_s: usize, training: bool) -> Result<FeatureMap<T>> {
        f.ensure_finite("adapter input")?;
        if !training {
            self.cache_hw = None;
            return self.forward_eval(f, h_s, w_s);
        }
        self.cache_hw = Some((f.h, f.w));
        Ok(resize_bilinear(&self.adapter.forward_train(f)?, h_s, w_s))
    }

    pub fn forward_eval(&self, f: &FeatureMap<T>, h_s: usize, w_s: usize) -> Result<FeatureMap<T>> {
        f.ensure_finite("adapter input")?;
        Ok(resize_bilinear(&self.adapter.forward_eval(f)?, h_s, w_s))
    }

    pub fn backward(&mut self, d_out: &FeatureMap<T>, need_dx: bool) -> Result<Option<FeatureMap<T>>> {
        let (h, w) = self.cache_hw.take().ok_or_else(|| invalid!("adapter backward without training forward"))?;
        let dy = resize_bilinear_backward(d_out, h, w);
        self.adapter.backward(&dy, need_dx)
    }
}

impl<T: Scalar> Module<T> for AddAdapter<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.adapter.visit(&join(prefix, "adapter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
    }
}

fn check_attention<T: Scalar>(stage: &FeatureMap<T>, att: &FeatureMap<T>) -> Result<()> {
    if att.n != stage.n || att.c != stage.c {
        return Err(invalid!(
            "attention {:?} does not match stage {:?} in batch/channels",
            att.shape(),
            stage.shape()
        ));
    }
    Ok(())
}

/// `S + S ⊙ upsample_nearest(A, H_s, W_s)`.
pub fn apply_attention_residual<T: Scalar>(stage: &FeatureMap<T>, att: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    check_attention(stage, att)?;
    let up = upsample_nearest(att, stage.h, stage.w);
    Ok(stage.zip_map(&up, |s, a| s + s * a))
}

/// Returns `(dS, dA)` for [`apply_attention_residual`].
pub fn apply_attention_residual_backward<T: Scalar>(
    stage: &FeatureMap<T>,
    att: &FeatureMap<T>,
    d_out: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    check_attention(stage, att)?;
    let up = upsample_nearest(att, stage.h, stage.w);
    let d_stage = d_out.zip_map(&up, |d, a| d * (T::one() + a));
    let d_up = d_out.zip_map(stage, |d, s| d * s);
    Ok((d_stage, upsample_nearest_backward(&d_up, att.h, att.w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{relu, BatchNorm};
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_map(seed: u64, n: usize, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(n, c, h, w, init::uniform(&mut rng(seed), 1.0, n * c * h * w)).unwrap()
    }

    fn randomize_bn(bn: &mut BatchNorm<f64>, seed: u64) {
        let mut r = rng(seed);
        let c = bn.gamma.len();
        bn.gamma.value = init::uniform(&mut r, 1.0, c).iter().map(|v: &f64| 1.0 + 0.5 * v).collect();
        bn.beta.value = init::uniform(&mut r, 0.5, c);
        bn.running_mean.value = init::uniform(&mut r, 0.3, c);
        bn.running_var.value = init::uniform(&mut r, 0.5, c).iter().map(|v: &f64| 1.0 + v).collect();
    }

    #[test]
    fn zero_block_gives_half() {
        let mut b = SlcaBlock::<f64>::zeros(32, 64, SlcaConfig::default()).unwrap();
        let f = random_map(1, 2, 32, 8, 8);
        for training in [false, true] {
            let a = b.forward(&f, training).unwrap();
            assert!(a.data.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn reduction_shape() {
        let mut b = SlcaBlock::<f32>::init(&mut rng(2), 32, 64, SlcaConfig { r: 4, g: 4 }).unwrap();
        assert_eq!(b.conv1.c_out, 8);
        let a = b.forward(&random_map(2, 3, 32, 8, 8).cast(), false).unwrap();
        assert_eq!(a.shape(), [3, 64, 4, 4]);
        assert_eq!(SlcaConfig { r: 64, g: 4 }.hidden(32), 1);
    }

    #[test]
    fn oversized_grid_rejected() {
        let mut b = SlcaBlock::<f64>::zeros(4, 4, SlcaConfig { r: 1, g: 9 }).unwrap();
        assert!(b.forward(&random_map(3, 1, 4, 8, 8), false).is_err());
        assert_eq!(SlcaConfig { r: 1, g: 9 }.grid_for(8, 8), 8);
    }

    #[test]
    fn eval_matches_composition_oracle() {
        let mut b = SlcaBlock::<f64>::init(&mut rng(4), 16, 24, SlcaConfig { r: 4, g: 4 }).unwrap();
        randomize_bn(b.conv1.bn.as_mut().unwrap(), 5);
        randomize_bn(b.conv2.bn.as_mut().unwrap(), 6);
        let f = random_map(7, 2, 16, 8, 8);
        let a = b.forward(&f, false).unwrap();
        // same four primitives invoked independently, ReLU outside the conv block
        let mut c1 = b.conv1.clone();
        c1.apply_relu = false;
        let oracle = sigmoid(&b.conv2.forward_eval(&relu(&c1.forward_eval(&slap(&f, 4).unwrap()).unwrap())).unwrap());
        assert!(a.max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn sigmoid_only_matches_oracle() {
        let mut s = SigmoidAttention::<f64>::init(&mut rng(8), 16, 24, 4).unwrap();
        s.adapter.bias.value = init::uniform(&mut rng(9), 0.5, 24);
        let f = random_map(10, 2, 16, 8, 8);
        let a = s.forward(&f, false).unwrap();
        assert_eq!(a.shape(), [2, 24, 4, 4]);
        let oracle = sigmoid(&s.adapter.forward_eval(&slap(&f, 4).unwrap()).unwrap());
        assert!(a.max_abs_diff(&oracle) < 1e-6);
        let mut z = SigmoidAttention::<f64>::zeros(16, 24, 4).unwrap();
        assert!(z.forward(&f, false).unwrap().data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn add_adapter_cases() {
        let f = random_map(11, 2, 4, 8, 8);
        let mut z = AddAdapter::<f64>::zeros(4, 4).unwrap();
        assert!(z.forward(&f, 16, 16, false).unwrap().data.iter().all(|&v| v == 0.0));
        let mut id = AddAdapter::<f64>::zeros(4, 4).unwrap();
        for c in 0..4 {
            id.adapter.weight.value[c * 4 + c] = 1.0;
        }
        assert_eq!(id.forward(&f, 8, 8, false).unwrap(), f);
        let mut r = AddAdapter::<f64>::init(&mut rng(12), 4, 6).unwrap();
        let out = r.forward(&f, 16, 16, false).unwrap();
        let oracle = resize_bilinear(&r.adapter.forward_eval(&f).unwrap(), 16, 16);
        assert!(out.max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn residual_limits_and_oracle() {
        let stage = random_map(13, 2, 3, 8, 8);
        let zero = FeatureMap::zeros(2, 3, 4, 4);
        assert_eq!(apply_attention_residual(&stage, &zero).unwrap(), stage);
        let one = FeatureMap::filled(2, 3, 4, 4, 1.0);
        assert_eq!(apply_attention_residual(&stage, &one).unwrap(), stage.map(|v| 2.0 * v));
        let att = random_map(14, 2, 3, 4, 4).map(|v| 0.5 + 0.4 * v);
        let out = apply_attention_residual(&stage, &att).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let s = stage.at(n, c, y, x);
                        let expect = s * (1.0 + att.at(n, c, y / 2, x / 2));
                        assert!((out.at(n, c, y, x) - expect).abs() < 1e-6);
                    }
                }
            }
        }
        assert!(apply_attention_residual(&stage, &FeatureMap::zeros(2, 4, 4, 4)).is_err());
    }

    #[test]
    fn residual_backward_matches_fd() {
        let stage = random_map(15, 1, 2, 6, 6);
        let att = random_map(16, 1, 2, 3, 3).map(|v| 0.5 + 0.4 * v);
        let w = random_map(17, 1, 2, 6, 6);
        let loss = |s: &FeatureMap<f64>, a: &FeatureMap<f64>| -> f64 {
            apply_attention_residual(s, a).unwrap().data.iter().zip(&w.data).map(|(x, y)| x * y).sum()
        };
        let (ds, da) = apply_attention_residual_backward(&stage, &att, &w).unwrap();
        let h = 1e-6;
        for i in 0..att.data.len() {
            let (mut p, mut m) = (att.clone(), att.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let num = (loss(&stage, &p) - loss(&stage, &m)) / (2.0 * h);
            assert!((num - da.data[i]).abs() < 1e-6);
        }
        for i in (0..stage.data.len()).step_by(5) {
            let (mut p, mut m) = (stage.clone(), stage.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let num = (loss(&p, &att) - loss(&m, &att)) / (2.0 * h);
            assert!((num - ds.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn param_count_closed_form() {
        let b = SlcaBlock::<f32>::zeros(32, 64, SlcaConfig::default()).unwrap();
        assert_eq!(b.trainable_count(), slca_param_count(32, 8, 64, false));
        assert_eq!(slca_param_count(32, 8, 64, false), 32 * 8 + 8 * 64 + 2 * 8 + 2 * 64);
    }
}
