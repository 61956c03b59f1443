//! Frozen ViT-style image encoder exposing five intermediate feature taps.
//!
//! Tokens are kept as `[N, D, G, G]` feature maps at the module boundary and
//! as token-major `[N*T, D]` matrices inside the blocks. Attention is global
//! over the `G*G` tokens of each image.

use serde::{Deserialize, Serialize};

use crate::digest::module_digest;
use crate::error::{invalid, Error, Result};
use crate::nn::conv::im2col;
use crate::nn::{init, ConvBlock};
use crate::tensor::{gemm, join, FeatureMap, Module, Param, Scalar};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub neck_out_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            patch_size: 8,
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            neck_out_dim: 32,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Geometry of the full-size segmentation encoder: 1024 px input, 16 px
    /// patches, 256 channels, 32 blocks.
    pub fn paper_scale() -> Self {
        Self {
            input_size: 1024,
            patch_size: 16,
            embed_dim: 256,
            num_blocks: 32,
            num_heads: 8,
            mlp_ratio: 4.0,
            neck_out_dim: 256,
            seed: 0,
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(invalid!(
                "encoder input_size {} must be a positive multiple of patch_size {}",
                self.input_size,
                self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(invalid!(
                "encoder embed_dim {} must be divisible by num_heads {}",
                self.embed_dim,
                self.num_heads
            ));
        }
        if self.num_blocks < 2 {
            return Err(invalid!("encoder needs at least two transformer blocks, got {}", self.num_blocks));
        }
        if self.neck_out_dim == 0 || !(self.mlp_ratio > 0.0) {
            return Err(invalid!("encoder neck_out_dim and mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// 1-based block indices of the first, middle and last taps.
    pub fn tap_blocks(&self) -> [usize; 3] {
        tap_block_indices(self.num_blocks)
    }

    /// True when fewer than three blocks make the block taps coincide.
    pub fn taps_alias(&self) -> bool {
        self.num_blocks < 3
    }
}

/// `[1, ceil(B/2), B]`.
pub fn tap_block_indices(num_blocks: usize) -> [usize; 3] {
    [1, num_blocks.div_ceil(2), num_blocks]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapName {
    Pe,
    TFirst,
    TMid,
    TLast,
    Neck,
}

impl TapName {
    pub const ALL: [TapName; 5] = [TapName::Pe, TapName::TFirst, TapName::TMid, TapName::TLast, TapName::Neck];

    pub fn as_str(self) -> &'static str {
        match self {
            TapName::Pe => "pe",
            TapName::TFirst => "t_first",
            TapName::TMid => "t_mid",
            TapName::TLast => "t_last",
            TapName::Neck => "neck",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTapSet<T> {
    pub pe: FeatureMap<T>,
    pub t_first: FeatureMap<T>,
    pub t_mid: FeatureMap<T>,
    pub t_last: FeatureMap<T>,
    pub neck: FeatureMap<T>,
}

impl<T: Scalar> EncoderTapSet<T> {
    pub fn get(&self, tap: TapName) -> &FeatureMap<T> {
        match tap {
            TapName::Pe => &self.pe,
            TapName::TFirst => &self.t_first,
            TapName::TMid => &self.t_mid,
            TapName::TLast => &self.t_last,
            TapName::Neck => &self.neck,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.pe.n
    }

    /// Stacks single-sample (or smaller batch) tap sets along the batch axis.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let pick = |t: TapName| {
            let maps: Vec<&FeatureMap<T>> = parts.iter().map(|p| p.get(t)).collect();
            FeatureMap::concat_batch(&maps)
        };
        Ok(Self {
            pe: pick(TapName::Pe)?,
            t_first: pick(TapName::TFirst)?,
            t_mid: pick(TapName::TMid)?,
            t_last: pick(TapName::TLast)?,
            neck: pick(TapName::Neck)?,
        })
    }

    /// Sample `i` as a batch of one.
    pub fn sample(&self, i: usize) -> Self {
        let one = |m: &FeatureMap<T>| FeatureMap::from_vec(1, m.c, m.h, m.w, m.sample(i).to_vec()).expect("sizes agree");
        Self {
            pe: one(&self.pe),
            t_first: one(&self.t_first),
            t_mid: one(&self.t_mid),
            t_last: one(&self.t_last),
            neck: one(&self.neck),
        }
    }

    pub fn cast<U: Scalar>(&self) -> EncoderTapSet<U> {
        EncoderTapSet {
            pe: self.pe.cast(),
            t_first: self.t_first.cast(),
            t_mid: self.t_mid.cast(),
            t_last: self.t_last.cast(),
            neck: self.neck.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn new(d: usize) -> Self {
        Self { gamma: Param::filled(vec![d], T::one()), beta: Param::zeros(vec![d]) }
    }

    /// Normalizes each `d`-long row of `x`.
    fn apply(&self, x: &[T], d: usize) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        let inv_d = T::one() / T::of(d as f64);
        for (row, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let istd = T::one() / (var + T::of(LN_EPS)).sqrt();
            for i in 0..d {
                dst[i] = (row[i] - mean) * istd * self.gamma.value[i] + self.beta.value[i];
            }
        }
        out
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// `rows × out` = `x (rows × in) · Wᵀ + b` with `W` stored `out × in`.
fn dense<T: Scalar>(x: &[T], rows: usize, w: &Param<T>, b: &Param<T>) -> Vec<T> {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    let mut y = vec![T::zero(); rows * out_dim];
    gemm(rows, in_dim, out_dim, x, false, &w.value, true, &mut y, false);
    for row in y.chunks_exact_mut(out_dim) {
        for (v, &bb) in row.iter_mut().zip(&b.value) {
            *v += bb;
        }
    }
    y
}

fn gelu<T: Scalar>(x: T) -> T {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock<T> {
    pub ln1: LayerNorm<T>,
    pub qkv_weight: Param<T>,
    pub qkv_bias: Param<T>,
    pub proj_weight: Param<T>,
    pub proj_bias: Param<T>,
    pub ln2: LayerNorm<T>,
    pub fc1_weight: Param<T>,
    pub fc1_bias: Param<T>,
    pub fc2_weight: Param<T>,
    pub fc2_bias: Param<T>,
    pub num_heads: usize,
}

impl<T: Scalar> TransformerBlock<T> {
    /// All projections zero, norms at identity.
    pub fn zeros(d: usize, hidden: usize, num_heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            qkv_weight: Param::zeros(vec![3 * d, d]),
            qkv_bias: Param::zeros(vec![3 * d]),
            proj_weight: Param::zeros(vec![d, d]),
            proj_bias: Param::zeros(vec![d]),
            ln2: LayerNorm::new(d),
            fc1_weight: Param::zeros(vec![hidden, d]),
            fc1_bias: Param::zeros(vec![hidden]),
            fc2_weight: Param::zeros(vec![d, hidden]),
            fc2_bias: Param::zeros(vec![d]),
            num_heads,
        }
    }

    fn init(rng: &mut impl rand::Rng, d: usize, hidden: usize, num_heads: usize) -> Self {
        let mut b = Self::zeros(d, hidden, num_heads);
        for w in [&mut b.qkv_weight, &mut b.proj_weight, &mut b.fc1_weight, &mut b.fc2_weight] {
            w.value = init::trunc_normal(rng, INIT_STD, w.len());
        }
        b
    }

    pub fn dim(&self) -> usize {
        self.proj_weight.shape[0]
    }

    /// Applies the block to `[N, D, G, G]`.
    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.forward_with_attention(x, false)?.0)
    }

    /// Also returns attention probabilities `[N, heads, T, T]` when requested.
    pub fn forward_with_attention(&self, x: &FeatureMap<T>, keep_attention: bool) -> Result<(FeatureMap<T>, Vec<T>)> {
        let d = self.dim();
        if x.c != d {
            return Err(invalid!("transformer block expects {d} channels, got {}", x.c));
        }
        if self.num_heads == 0 || d % self.num_heads != 0 {
            return Err(invalid!("embed dim {d} not divisible by {} heads", self.num_heads));
        }
        let t = x.h * x.w;
        let mut tokens = to_tokens(x);
        let (delta, attn) = self.attention(&self.ln1.apply(&tokens, d), x.n, t, keep_attention);
        for (a, b) in tokens.iter_mut().zip(&delta) {
            *a += *b;
        }
        let normed = self.ln2.apply(&tokens, d);
        let mut hidden = dense(&normed, x.n * t, &self.fc1_weight, &self.fc1_bias);
        for v in &mut hidden {
            *v = gelu(*v);
        }
        let mlp = dense(&hidden, x.n * t, &self.fc2_weight, &self.fc2_bias);
        for (a, b) in tokens.iter_mut().zip(&mlp) {
            *a += *b;
        }
        Ok((from_tokens(&tokens, x.n, d, x.h, x.w), attn))
    }

    fn attention(&self, normed: &[T], n: usize, t: usize, keep: bool) -> (Vec<T>, Vec<T>) {
        let d = self.dim();
        let heads = self.num_heads;
        let dh = d / heads;
        let qkv = dense(normed, n * t, &self.qkv_weight, &self.qkv_bias);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut ctx = vec![T::zero(); n * t * d];
        let mut kept = if keep { Vec::with_capacity(n * heads * t * t) } else { Vec::new() };
        let mut q = vec![T::zero(); t * dh];
        let mut k = vec![T::zero(); t * dh];
        let mut v = vec![T::zero(); t * dh];
        let mut scores = vec![T::zero(); t * t];
        let mut out = vec![T::zero(); t * dh];
        for b in 0..n {
            for h in 0..heads {
                for i in 0..t {
                    let row = &qkv[(b * t + i) * 3 * d..(b * t + i + 1) * 3 * d];
                    q[i * dh..(i + 1) * dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                    k[i * dh..(i + 1) * dh].copy_from_slice(&row[d + h * dh..d + (h + 1) * dh]);
                    v[i * dh..(i + 1) * dh].copy_from_slice(&row[2 * d + h * dh..2 * d + (h + 1) * dh]);
                }
                gemm(t, dh, t, &q, false, &k, true, &mut scores, false);
                for row in scores.chunks_exact_mut(t) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for s in row.iter_mut() {
                        *s = ((*s - max) * scale).exp();
                        sum += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= sum;
                    }
                }
                if keep {
                    kept.extend_from_slice(&scores);
                }
                gemm(t, t, dh, &scores, false, &v, false, &mut out, false);
                for i in 0..t {
                    ctx[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh]
                        .copy_from_slice(&out[i * dh..(i + 1) * dh]);
                }
            }
        }
        (dense(&ctx, n * t, &self.proj_weight, &self.proj_bias), kept)
    }
}

impl<T: Scalar> Module<T> for TransformerBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        f(&join(prefix, "qkv.weight"), &self.qkv_weight);
        f(&join(prefix, "qkv.bias"), &self.qkv_bias);
        f(&join(prefix, "proj.weight"), &self.proj_weight);
        f(&join(prefix, "proj.bias"), &self.proj_bias);
        self.ln2.visit(&join(prefix, "ln2"), f);
        f(&join(prefix, "fc1.weight"), &self.fc1_weight);
        f(&join(prefix, "fc1.bias"), &self.fc1_bias);
        f(&join(prefix, "fc2.weight"), &self.fc2_weight);
        f(&join(prefix, "fc2.bias"), &self.fc2_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        f(&join(prefix, "qkv.weight"), &mut self.qkv_weight);
        f(&join(prefix, "qkv.bias"), &mut self.qkv_bias);
        f(&join(prefix, "proj.weight"), &mut self.proj_weight);
        f(&join(prefix, "proj.bias"), &mut self.proj_bias);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        f(&join(prefix, "fc1.weight"), &mut self.fc1_weight);
        f(&join(prefix, "fc1.bias"), &mut self.fc1_bias);
        f(&join(prefix, "fc2.weight"), &mut self.fc2_weight);
        f(&join(prefix, "fc2.bias"), &mut self.fc2_bias);
    }
}

/// `[N, D, H, W]` → token-major `[N*H*W, D]`.
fn to_tokens<T: Scalar>(x: &FeatureMap<T>) -> Vec<T> {
    let t = x.plane_len();
    let mut out = vec![T::zero(); x.n * t * x.c];
    for b in 0..x.n {
        for c in 0..x.c {
            for (i, &v) in x.plane(b, c).iter().enumerate() {
                out[(b * t + i) * x.c + c] = v;
            }
        }
    }
    out
}

fn from_tokens<T: Scalar>(tokens: &[T], n: usize, d: usize, h: usize, w: usize) -> FeatureMap<T> {
    let t = h * w;
    let mut out = FeatureMap::zeros(n, d, h, w);
    for b in 0..n {
        for c in 0..d {
            let plane = out.plane_mut(b, c);
            for (i, p) in plane.iter_mut().enumerate() {
                *p = tokens[(b * t + i) * d + c];
            }
        }
    }
    out
}

pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    pub patch_weight: Param<T>,
    pub patch_bias: Param<T>,
    pub pos_embed: Param<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub neck: ConvBlock<T>,
    frozen: bool,
    digest: u64,
}

impl<T: Scalar> Encoder<T> {
    /// Seeded stand-in weights: truncated normal (std 0.02) projections and
    /// position embedding, identity norms, zero biases. Returned frozen.
    pub fn build(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, p, g) = (cfg.embed_dim, cfg.patch_size, cfg.grid());
        let mut rng = init::stream(cfg.seed, "encoder");
        let patch_weight = Param::trainable(vec![d, 3, p, p], init::trunc_normal(&mut rng, INIT_STD, d * 3 * p * p));
        let pos_embed = Param::trainable(vec![d, g, g], init::trunc_normal(&mut rng, INIT_STD, d * g * g));
        let blocks = (0..cfg.num_blocks)
            .map(|_| TransformerBlock::init(&mut rng, d, cfg.mlp_hidden(), cfg.num_heads))
            .collect();
        let mut neck = ConvBlock::pointwise(d, cfg.neck_out_dim, true, false)?;
        neck.weight.value = init::trunc_normal(&mut rng, INIT_STD, neck.weight.len());
        let mut enc = Self {
            cfg: cfg.clone(),
            patch_weight,
            patch_bias: Param::zeros(vec![d]),
            pos_embed,
            blocks,
            neck,
            frozen: false,
            digest: 0,
        };
        enc.freeze();
        Ok(enc)
    }

    /// Marks every tensor non-trainable and records the content digest.
    pub fn freeze(&mut self) {
        self.visit_mut("", &mut |_, p| p.freeze());
        self.frozen = true;
        self.digest = module_digest(&*self);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Digest recorded at the last [`Encoder::freeze`].
    pub fn recorded_digest(&self) -> u64 {
        self.digest
    }

    /// Recomputes the digest from the current parameter bytes.
    pub fn digest(&self) -> u64 {
        module_digest(self)
    }

    pub fn verify_digest(&self) -> Result<()> {
        let now = self.digest();
        if now == self.digest {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "frozen encoder changed: digest {:016x} != recorded {:016x}",
                now, self.digest
            )))
        }
    }

    /// Non-overlapping patch projection plus learned position embedding.
    pub fn patch_embed(&self, img: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let s = self.cfg.input_size;
        if img.c != 3 || img.h != s || img.w != s {
            return Err(invalid!("encoder expects [N, 3, {s}, {s}] images, got {:?}", img.shape()));
        }
        let (d, p, g) = (self.cfg.embed_dim, self.cfg.patch_size, self.cfg.grid());
        let col = im2col(img, p, p, 0, g, g);
        let np = img.n * g * g;
        let mut mat = vec![T::zero(); d * np];
        gemm(d, 3 * p * p, np, &self.patch_weight.value, false, &col, false, &mut mat, false);
        let mut out = FeatureMap::zeros(img.n, d, g, g);
        for c in 0..d {
            let pos = &self.pos_embed.value[c * g * g..(c + 1) * g * g];
            let bias = self.patch_bias.value[c];
            for b in 0..img.n {
                let src = &mat[c * np + b * g * g..c * np + (b + 1) * g * g];
                for ((o, &v), &pe) in out.plane_mut(b, c).iter_mut().zip(src).zip(pos) {
                    *o = v + bias + pe;
                }
            }
        }
        Ok(out)
    }

    /// Runs the encoder and returns the taps `{PE, block 1, block ceil(B/2), block B, neck}`.
    pub fn encode_with_taps(&self, img: &FeatureMap<T>) -> Result<EncoderTapSet<T>> {
        img.ensure_finite("encoder input")?;
        let pe = self.patch_embed(img)?;
        let [first, mid, last] = self.cfg.tap_blocks();
        let mut taps = [None, None, None];
        let mut x = pe.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            for (slot, &want) in taps.iter_mut().zip(&[first, mid, last]) {
                if i + 1 == want {
                    *slot = Some(x.clone());
                }
            }
        }
        let neck = self.neck.forward_eval(&x)?;
        let [t_first, t_mid, t_last] = taps.map(|t| t.expect("tap indices lie within 1..=num_blocks"));
        Ok(EncoderTapSet { pe, t_first, t_mid, t_last, neck })
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "patch.weight"), &self.patch_weight);
        f(&join(prefix, "patch.bias"), &self.patch_bias);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.neck.visit(&join(prefix, "neck"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "patch.weight"), &mut self.patch_weight);
        f(&join(prefix, "patch.bias"), &mut self.patch_bias);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.neck.visit_mut(&join(prefix, "neck"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_images(seed: u64, n: usize, s: usize) -> FeatureMap<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(n, 3, s, s, init::uniform(&mut rng, 1.0, n * 3 * s * s)).unwrap()
    }

    #[test]
    fn digest_is_seed_determined() {
        let a = Encoder::<f32>::build(&EncoderConfig::default()).unwrap();
        let b = Encoder::<f32>::build(&EncoderConfig::default()).unwrap();
        let c = Encoder::<f32>::build(&EncoderConfig { seed: 1, ..Default::default() }).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest(), a.recorded_digest());
        assert!(a.is_frozen());
        assert_eq!(a.trainable_count(), 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            EncoderConfig { patch_size: 7, ..Default::default() },
            EncoderConfig { num_heads: 5, ..Default::default() },
            EncoderConfig { num_blocks: 1, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(Encoder::<f32>::build(&cfg), Err(Error::InvalidInput(_))));
        }
    }

    #[test]
    fn desk_taps_have_expected_shapes() {
        let enc = Encoder::<f32>::build(&EncoderConfig::default()).unwrap();
        let pe = enc.patch_embed(&random_images(1, 2, 64)).unwrap();
        assert_eq!(pe.shape(), [2, 32, 8, 8]);
        let taps = enc.encode_with_taps(&random_images(1, 2, 64)).unwrap();
        for t in TapName::ALL {
            assert_eq!(taps.get(t).shape(), [2, 32, 8, 8], "{t:?}");
        }
        assert!(enc.patch_embed(&random_images(1, 1, 32)).is_err());
    }

    #[test]
    fn paper_scale_geometry() {
        let cfg = EncoderConfig::paper_scale();
        assert_eq!(cfg.grid(), 64);
        assert_eq!(cfg.tap_blocks(), [1, 16, 32]);
        // Patch embedding alone at full geometry; the transformer stack is not run.
        let mut enc = Encoder::<f32> {
            cfg: cfg.clone(),
            patch_weight: Param::zeros(vec![256, 3, 16, 16]),
            patch_bias: Param::zeros(vec![256]),
            pos_embed: Param::zeros(vec![256, 64, 64]),
            blocks: Vec::new(),
            neck: ConvBlock::pointwise(256, 256, true, false).unwrap(),
            frozen: false,
            digest: 0,
        };
        enc.patch_weight.value[0] = 1.0;
        let img = FeatureMap::filled(1, 3, 1024, 1024, 0.5f32);
        assert_eq!(enc.patch_embed(&img).unwrap().shape(), [1, 256, 64, 64]);
    }

    #[test]
    fn zero_image_gives_bias_broadcast() {
        let mut enc = Encoder::<f64>::build(&EncoderConfig::default()).unwrap();
        enc.pos_embed.value.fill(0.0);
        for (i, b) in enc.patch_bias.value.iter_mut().enumerate() {
            *b = i as f64 * 0.1 - 1.0;
        }
        let pe = enc.patch_embed(&FeatureMap::zeros(1, 3, 64, 64)).unwrap();
        for c in 0..32 {
            assert!(pe.plane(0, c).iter().all(|&v| v == c as f64 * 0.1 - 1.0));
        }
    }

    #[test]
    fn zero_block_is_identity() {
        let block = TransformerBlock::<f64>::zeros(8, 32, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = FeatureMap::from_vec(2, 8, 3, 3, init::uniform(&mut rng, 1.0, 144)).unwrap();
        assert_eq!(block.forward(&x).unwrap(), x);
    }

    #[test]
    fn single_token_identity_attention_doubles_normalized_token() {
        let d = 4;
        let mut block = TransformerBlock::<f64>::zeros(d, 8, 1);
        for i in 0..d {
            for part in 0..3 {
                block.qkv_weight.value[(part * d + i) * d + i] = 1.0;
            }
            block.proj_weight.value[i * d + i] = 1.0;
        }
        // zero-mean, unit-variance token: LN leaves it unchanged up to eps
        let x = FeatureMap::from_vec(1, d, 1, 1, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let (y, attn) = block.forward_with_attention(&x, true).unwrap();
        assert_eq!(attn, vec![1.0]);
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - 2.0 * b).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_normalized() {
        let enc = Encoder::<f64>::build(&EncoderConfig { seed: 3, ..Default::default() }).unwrap();
        let pe = enc.patch_embed(&random_images(4, 2, 64).cast()).unwrap();
        let (_, attn) = enc.blocks[0].forward_with_attention(&pe, true).unwrap();
        assert_eq!(attn.len(), 2 * 4 * 64 * 64);
        for row in attn.chunks_exact(64) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn repeated_encoding_is_bitwise_equal() {
        let enc = Encoder::<f32>::build(&EncoderConfig::default()).unwrap();
        let img = random_images(5, 2, 64);
        assert_eq!(enc.encode_with_taps(&img).unwrap(), enc.encode_with_taps(&img).unwrap());
    }

    #[test]
    fn patch_change_is_local_in_pe_tap() {
        let enc = Encoder::<f32>::build(&EncoderConfig::default()).unwrap();
        let img = random_images(6, 1, 64);
        let mut edited = img.clone();
        // patch at grid cell (2, 5): rows 16..24, cols 40..48
        for c in 0..3 {
            for y in 16..24 {
                for x in 40..48 {
                    let i = edited.index(0, c, y, x);
                    edited.data[i] += 0.3;
                }
            }
        }
        let a = enc.patch_embed(&img).unwrap();
        let b = enc.patch_embed(&edited).unwrap();
        for c in 0..32 {
            for gy in 0..8 {
                for gx in 0..8 {
                    let (u, v) = (a.at(0, c, gy, gx), b.at(0, c, gy, gx));
                    if (gy, gx) != (2, 5) {
                        assert_eq!(u.to_bits(), v.to_bits());
                    }
                }
            }
        }
        assert!((0..32).any(|c| a.at(0, c, 2, 5) != b.at(0, c, 2, 5)));
    }

    #[test]
    fn tiny_encoders_alias_taps() {
        assert_eq!(tap_block_indices(1), [1, 1, 1]);
        assert_eq!(tap_block_indices(2), [1, 1, 2]);
        assert_eq!(tap_block_indices(4), [1, 2, 4]);
        let cfg = EncoderConfig { num_blocks: 2, ..Default::default() };
        assert!(cfg.taps_alias());
        let enc = Encoder::<f32>::build(&cfg).unwrap();
        let taps = enc.encode_with_taps(&random_images(7, 1, 64)).unwrap();
        assert_eq!(taps.t_first, taps.t_mid);
        assert_ne!(taps.t_mid, taps.t_last);
    }
}
