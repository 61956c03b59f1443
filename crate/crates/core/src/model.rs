//! Backbone CNN, projector head and assembly of the fusion variants.
//!
//! Injection points run in network order `[stem, stage1..stage4]` and receive
//! taps in encoder order `[pe, t_first, t_mid, t_last, neck]` by default.

use serde::{Deserialize, Serialize};

use crate::digest::module_digest;
use crate::encoder::{Encoder, EncoderConfig, EncoderTapSet, TapName};
use crate::error::{invalid, Result};
use crate::nn::{global_avg_pool, global_avg_pool_backward, init, resize_bilinear, ConvBlock, Linear};
use crate::slca::{
    apply_attention_residual, apply_attention_residual_backward, AddAdapter, SigmoidAttention, SlcaBlock, SlcaConfig,
};
use crate::tensor::{join, FeatureMap, Matrix, Module, Param, Scalar};

pub const NUM_INJECTION_POINTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    AddNoAttention,
    SigmoidOnly,
    Slca,
    SlcaProjector,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Baseline, Variant::AddNoAttention, Variant::SigmoidOnly, Variant::Slca, Variant::SlcaProjector];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::AddNoAttention => "add_no_attention",
            Variant::SigmoidOnly => "sigmoid_only",
            Variant::Slca => "slca",
            Variant::SlcaProjector => "slca_projector",
        }
    }

    /// Row label in the fusion-ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Backbone",
            Variant::AddNoAttention => "+ add (no attention)",
            Variant::SigmoidOnly => "+ sigmoid",
            Variant::Slca => "+ SLCA",
            Variant::SlcaProjector => "+ SLCA + projector head",
        }
    }

    pub fn uses_encoder(self) -> bool {
        self != Variant::Baseline
    }

    pub fn has_projector(self) -> bool {
        self == Variant::SlcaProjector
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| invalid!("unknown variant {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_size: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { stem_channels: 16, stage_channels: vec![16, 32, 64, 128], blocks_per_stage: 2, input_size: 64, num_classes: 4 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() + 1 != NUM_INJECTION_POINTS {
            return Err(invalid!(
                "backbone needs {} stages (one per encoder tap after the stem), got {}",
                NUM_INJECTION_POINTS - 1,
                self.stage_channels.len()
            ));
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) || self.blocks_per_stage == 0 {
            return Err(invalid!("backbone channel and block counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(invalid!("need at least two classes, got {}", self.num_classes));
        }
        let div = 1usize << NUM_INJECTION_POINTS;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(invalid!("backbone input_size {} must be a positive multiple of {div}", self.input_size));
        }
        Ok(())
    }

    /// `(channels, spatial size)` at each injection point.
    pub fn injection_shapes(&self) -> Vec<(usize, usize)> {
        let mut s = self.input_size / 2;
        let mut out = vec![(self.stem_channels, s)];
        for &c in &self.stage_channels {
            s /= 2;
            out.push((c, s));
        }
        out
    }

    pub fn last_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }

    /// Spatial size of the last stage.
    pub fn final_size(&self) -> usize {
        self.input_size >> NUM_INJECTION_POINTS
    }
}

/// Closed-form trainable parameter count of [`Backbone`].
pub fn backbone_param_count(cfg: &BackboneConfig) -> usize {
    // 3×3 weights plus BN scale/shift; pre-BN biases are frozen
    let conv = |ci: usize, co: usize| ci * co * 9 + 2 * co;
    let mut total = conv(3, cfg.stem_channels);
    let mut prev = cfg.stem_channels;
    for &c in &cfg.stage_channels {
        total += conv(prev, c) + (cfg.blocks_per_stage - 1) * conv(c, c);
        prev = c;
    }
    total
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub resize_target: usize,
    pub mid_channels: usize,
    pub downsample_convs: usize,
}

impl ProjectorConfig {
    pub fn for_backbone(cfg: &BackboneConfig) -> Self {
        Self::for_final(cfg.final_size(), cfg.last_channels())
    }

    pub fn for_final(final_size: usize, channels: usize) -> Self {
        Self { resize_target: 8 * final_size, mid_channels: channels, downsample_convs: 3 }
    }
}

fn default_taps() -> Vec<TapName> {
    TapName::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    #[serde(default = "default_taps")]
    pub tap_assignment: Vec<TapName>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub slca: SlcaConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            variant: Variant::SlcaProjector,
            tap_assignment: default_taps(),
            encoder: EncoderConfig::default(),
            backbone: BackboneConfig::default(),
            slca: SlcaConfig::default(),
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.backbone.validate()?;
        self.slca.validate()?;
        if self.tap_assignment.len() != NUM_INJECTION_POINTS {
            return Err(invalid!(
                "tap_assignment needs {NUM_INJECTION_POINTS} entries, got {}",
                self.tap_assignment.len()
            ));
        }
        if self.encoder.input_size != self.backbone.input_size {
            return Err(invalid!(
                "encoder input_size {} differs from backbone input_size {}",
                self.encoder.input_size,
                self.backbone.input_size
            ));
        }
        Ok(())
    }

    pub fn tap_channels(&self, tap: TapName) -> usize {
        match tap {
            TapName::Neck => self.encoder.neck_out_dim,
            _ => self.encoder.embed_dim,
        }
    }

    /// Pooling grid per injection point: the global `g`, clamped to the tap and stage sizes.
    pub fn fusion_grids(&self) -> Vec<usize> {
        let tap = self.encoder.grid();
        self.backbone.injection_shapes().iter().map(|&(_, s)| self.slca.grid_for(tap, tap).min(s)).collect()
    }

    pub fn classifier_in(&self) -> usize {
        let c = self.backbone.last_channels();
        if self.variant.has_projector() {
            2 * c
        } else {
            c
        }
    }
}

pub struct Backbone<T> {
    pub stem: ConvBlock<T>,
    pub stages: Vec<Vec<ConvBlock<T>>>,
}

impl<T: Scalar> Backbone<T> {
    /// Stem: 3×3 stride 2; each stage: first block stride 2, rest stride 1. All BN + ReLU.
    pub fn build(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init::stream(seed, "backbone");
        let stem = ConvBlock::init_he(&mut rng, 3, cfg.stem_channels, 3, 2, 1, true, true)?;
        let mut prev = cfg.stem_channels;
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        for &c in &cfg.stage_channels {
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let (ci, stride) = if b == 0 { (prev, 2) } else { (c, 1) };
                blocks.push(ConvBlock::init_he(&mut rng, ci, c, 3, stride, 1, true, true)?);
            }
            stages.push(blocks);
            prev = c;
        }
        Ok(Self { stem, stages })
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                block.visit(&join(prefix, &format!("stage{}.{b}", s + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("stage{}.{b}", s + 1)), f);
            }
        }
    }
}

/// Bilinear resize to `8·S_f`, a 3×3 channel lift, then three 3×3 stride-2 blocks.
pub struct Projector<T> {
    pub cfg: ProjectorConfig,
    pub lift: ConvBlock<T>,
    pub down: Vec<ConvBlock<T>>,
}

impl<T: Scalar> Projector<T> {
    pub fn build(rng: &mut impl rand::Rng, c_in: usize, cfg: ProjectorConfig) -> Result<Self> {
        if cfg.resize_target == 0 || cfg.resize_target % 8 != 0 || cfg.downsample_convs != 3 {
            return Err(invalid!("projector needs a resize target divisible by 8 and three downsampling convs"));
        }
        let c = cfg.mid_channels;
        let lift = ConvBlock::init_he(rng, c_in, c, 3, 1, 1, true, true)?;
        let down = (0..cfg.downsample_convs)
            .map(|_| ConvBlock::init_he(rng, c, c, 3, 2, 1, true, true))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, lift, down })
    }

    pub fn output_size(&self) -> usize {
        self.cfg.resize_target / 8
    }

    pub fn forward_train(&mut self, neck: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let r = self.cfg.resize_target;
        let mut x = self.lift.forward_train(&resize_bilinear(neck, r, r))?;
        for d in &mut self.down {
            x = d.forward_train(&x)?;
        }
        Ok(x)
    }

    pub fn forward_eval(&self, neck: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let r = self.cfg.resize_target;
        let mut x = self.lift.forward_eval(&resize_bilinear(neck, r, r))?;
        for d in &self.down {
            x = d.forward_eval(&x)?;
        }
        Ok(x)
    }

    /// Parameter gradients only; the encoder side receives none.
    pub fn backward(&mut self, dy: &FeatureMap<T>) -> Result<()> {
        let mut d = dy.clone();
        for block in self.down.iter_mut().rev() {
            d = block.backward(&d, true)?.expect("requested dx");
        }
        self.lift.backward(&d, false)?;
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Projector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.lift.visit(&join(prefix, "lift"), f);
        for (i, d) in self.down.iter().enumerate() {
            d.visit(&join(prefix, &format!("down{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.lift.visit_mut(&join(prefix, "lift"), f);
        for (i, d) in self.down.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("down{i}")), f);
        }
    }
}

pub enum Fusion<T> {
    Add(AddAdapter<T>),
    Sigmoid(SigmoidAttention<T>),
    Slca(SlcaBlock<T>),
}

impl<T: Scalar> Module<T> for Fusion<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Fusion::Add(m) => m.visit(prefix, f),
            Fusion::Sigmoid(m) => m.visit(prefix, f),
            Fusion::Slca(m) => m.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Fusion::Add(m) => m.visit_mut(prefix, f),
            Fusion::Sigmoid(m) => m.visit_mut(prefix, f),
            Fusion::Slca(m) => m.visit_mut(prefix, f),
        }
    }
}

pub struct FusionPoint<T> {
    pub tap: TapName,
    pub grid: usize,
    pub fusion: Fusion<T>,
    /// Pre-fusion stage and attention, kept for backward.
    cache: Option<(FeatureMap<T>, FeatureMap<T>)>,
}

impl<T: Scalar> FusionPoint<T> {
    /// Attention map for this point, honoring a forced constant.
    fn attention_eval(&self, tap: &FeatureMap<T>, stage: &FeatureMap<T>, forced: Option<T>) -> Result<FeatureMap<T>> {
        if let Some(a) = forced {
            return Ok(FeatureMap::filled(stage.n, stage.c, self.grid, self.grid, a));
        }
        match &self.fusion {
            Fusion::Sigmoid(m) => m.forward_eval(tap),
            Fusion::Slca(m) => m.forward_eval(tap),
            Fusion::Add(_) => unreachable!("add fusion has no attention"),
        }
    }

    fn forward_eval(&self, stage: FeatureMap<T>, tap: &FeatureMap<T>, forced: Option<T>) -> Result<FeatureMap<T>> {
        match &self.fusion {
            Fusion::Add(m) => {
                let add = m.forward_eval(tap, stage.h, stage.w)?;
                Ok(stage.zip_map(&add, |a, b| a + b))
            }
            _ => apply_attention_residual(&stage, &self.attention_eval(tap, &stage, forced)?),
        }
    }

    fn forward_train(&mut self, stage: FeatureMap<T>, tap: &FeatureMap<T>, forced: Option<T>) -> Result<FeatureMap<T>> {
        let att = match (&mut self.fusion, forced) {
            (Fusion::Add(m), _) => {
                let add = m.forward(tap, stage.h, stage.w, true)?;
                return Ok(stage.zip_map(&add, |a, b| a + b));
            }
            (_, Some(a)) => FeatureMap::filled(stage.n, stage.c, self.grid, self.grid, a),
            (Fusion::Sigmoid(m), None) => m.forward(tap, true)?,
            (Fusion::Slca(m), None) => m.forward(tap, true)?,
        };
        let out = apply_attention_residual(&stage, &att)?;
        self.cache = Some((stage, att));
        Ok(out)
    }

    fn backward(&mut self, d_out: FeatureMap<T>, forced: bool) -> Result<FeatureMap<T>> {
        if let Fusion::Add(m) = &mut self.fusion {
            m.backward(&d_out, false)?;
            return Ok(d_out);
        }
        let (stage, att) = self.cache.take().ok_or_else(|| invalid!("fusion backward without forward"))?;
        let (d_stage, d_att) = apply_attention_residual_backward(&stage, &att, &d_out)?;
        if !forced {
            match &mut self.fusion {
                Fusion::Sigmoid(m) => m.backward(&d_att, false)?,
                Fusion::Slca(m) => m.backward(&d_att, false)?,
                Fusion::Add(_) => unreachable!(),
            };
        }
        Ok(d_stage)
    }

    /// Last attention map from a training forward.
    pub fn cached_attention(&self) -> Option<&FeatureMap<T>> {
        self.cache.as_ref().map(|(_, a)| a)
    }
}

struct ForwardCache {
    stage_hw: [(usize, usize); NUM_INJECTION_POINTS],
    final_hw: (usize, usize),
    last_channels: usize,
    forced: bool,
}

/// Per-injection-point intermediate results of an eval forward.
#[derive(Clone, Debug)]
pub struct FusionTrace<T> {
    /// Attention grids `[N, C_s, g, g]`; `None` for the baseline and add variants.
    pub attention: Vec<Option<FeatureMap<T>>>,
    pub taps: Option<EncoderTapSet<T>>,
    pub logits: Matrix<T>,
}

pub struct Model<T> {
    pub spec: ModelSpec,
    pub encoder: Encoder<T>,
    pub backbone: Backbone<T>,
    pub fusions: Vec<FusionPoint<T>>,
    pub projector: Option<Projector<T>>,
    pub classifier: Linear<T>,
    /// Test hook: replaces every attention map by this constant.
    pub attention_override: Option<T>,
    cache: Option<ForwardCache>,
}

impl<T: Scalar> Model<T> {
    /// Builds every part from independent seeded streams, so the backbone and
    /// classifier are identical across variants that share a seed.
    pub fn assemble(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let encoder = Encoder::build(&spec.encoder)?;
        Self::assemble_with_encoder(spec, encoder)
    }

    /// Like [`Model::assemble`] but with externally supplied encoder weights.
    pub fn assemble_with_encoder(spec: &ModelSpec, mut encoder: Encoder<T>) -> Result<Self> {
        spec.validate()?;
        if encoder.cfg != spec.encoder {
            return Err(invalid!("supplied encoder config differs from the model spec"));
        }
        if !encoder.is_frozen() {
            encoder.freeze();
        }
        let backbone = Backbone::build(&spec.backbone, spec.seed)?;
        let mut rng = init::stream(spec.seed, "fusion");
        let mut fusions = Vec::new();
        if spec.variant.uses_encoder() {
            let grids = spec.fusion_grids();
            for (i, (&tap, &(c_s, _))) in spec.tap_assignment.iter().zip(&spec.backbone.injection_shapes()).enumerate() {
                let c_in = spec.tap_channels(tap);
                let g = grids[i];
                let fusion = match spec.variant {
                    Variant::AddNoAttention => Fusion::Add(AddAdapter::init(&mut rng, c_in, c_s)?),
                    Variant::SigmoidOnly => Fusion::Sigmoid(SigmoidAttention::init(&mut rng, c_in, c_s, g)?),
                    _ => Fusion::Slca(SlcaBlock::init(&mut rng, c_in, c_s, SlcaConfig { g, ..spec.slca })?),
                };
                fusions.push(FusionPoint { tap, grid: g, fusion, cache: None });
            }
        }
        let projector = if spec.variant.has_projector() {
            let mut rng = init::stream(spec.seed, "projector");
            let cfg = ProjectorConfig::for_backbone(&spec.backbone);
            Some(Projector::build(&mut rng, spec.encoder.neck_out_dim, cfg)?)
        } else {
            None
        };
        let mut rng = init::stream(spec.seed, "classifier");
        let classifier = Linear::init_uniform(&mut rng, spec.classifier_in(), spec.backbone.num_classes);
        Ok(Self {
            spec: spec.clone(),
            encoder,
            backbone,
            fusions,
            projector,
            classifier,
            attention_override: None,
            cache: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.backbone.num_classes
    }

    pub fn encoder_digest(&self) -> u64 {
        self.encoder.digest()
    }

    pub fn backbone_digest(&self) -> u64 {
        module_digest(&self.backbone)
    }

    fn check_images(&self, images: &FeatureMap<T>) -> Result<()> {
        let s = self.spec.backbone.input_size;
        if images.c != 3 || images.h != s || images.w != s {
            return Err(invalid!("model expects [N, 3, {s}, {s}] images, got {:?}", images.shape()));
        }
        images.ensure_finite("model input")
    }

    /// Encoder taps for `images`, or `None` when the variant never evaluates the encoder.
    pub fn encode(&self, images: &FeatureMap<T>) -> Result<Option<EncoderTapSet<T>>> {
        if self.spec.variant.uses_encoder() {
            self.check_images(images)?;
            Ok(Some(self.encoder.encode_with_taps(images)?))
        } else {
            Ok(None)
        }
    }

    fn require_taps<'a>(&self, taps: Option<&'a EncoderTapSet<T>>, n: usize) -> Result<Option<&'a EncoderTapSet<T>>> {
        match (self.spec.variant.uses_encoder(), taps) {
            (false, _) => Ok(None),
            (true, Some(t)) if t.batch_size() == n => Ok(Some(t)),
            (true, Some(t)) => Err(invalid!("tap batch {} differs from image batch {n}", t.batch_size())),
            (true, None) => Err(invalid!("variant {} needs encoder taps", self.spec.variant.as_str())),
        }
    }

    pub fn forward_classify(&mut self, images: &FeatureMap<T>, training: bool) -> Result<Matrix<T>> {
        let taps = self.encode(images)?;
        if training {
            self.forward_train_with_taps(images, taps.as_ref())
        } else {
            self.forward_eval_with_taps(images, taps.as_ref())
        }
    }

    pub fn forward_train(&mut self, images: &FeatureMap<T>) -> Result<Matrix<T>> {
        self.forward_classify(images, true)
    }

    pub fn forward_eval(&self, images: &FeatureMap<T>) -> Result<Matrix<T>> {
        let taps = self.encode(images)?;
        self.forward_eval_with_taps(images, taps.as_ref())
    }

    /// Training-mode forward with precomputed taps; caches for [`Model::backward`].
    pub fn forward_train_with_taps(&mut self, images: &FeatureMap<T>, taps: Option<&EncoderTapSet<T>>) -> Result<Matrix<T>> {
        self.check_images(images)?;
        let taps = self.require_taps(taps, images.n)?;
        let forced = self.attention_override;
        let mut stage_hw = [(0, 0); NUM_INJECTION_POINTS];
        let mut x = self.backbone.stem.forward_train(images)?;
        for point in 0..NUM_INJECTION_POINTS {
            if point > 0 {
                for block in &mut self.backbone.stages[point - 1] {
                    x = block.forward_train(&x)?;
                }
            }
            stage_hw[point] = (x.h, x.w);
            if let Some(taps) = taps {
                let fp = &mut self.fusions[point];
                x = fp.forward_train(x, taps.get(fp.tap), forced)?;
            }
        }
        let last_channels = x.c;
        let feat = match (&mut self.projector, taps) {
            (Some(p), Some(t)) => FeatureMap::concat_channels(&x, &p.forward_train(&t.neck)?)?,
            _ => x,
        };
        let logits = self.classifier.forward_train(&global_avg_pool(&feat))?;
        self.cache = Some(ForwardCache { stage_hw, final_hw: (feat.h, feat.w), last_channels, forced: forced.is_some() });
        logits.data.iter().all(|v| v.is_finite()).then_some(()).ok_or_else(|| crate::Error::Numeric("non-finite logits".into()))?;
        Ok(logits)
    }

    pub fn forward_eval_with_taps(&self, images: &FeatureMap<T>, taps: Option<&EncoderTapSet<T>>) -> Result<Matrix<T>> {
        Ok(self.trace_eval(images, taps, false)?.logits)
    }

    /// Eval forward that also returns attention maps per injection point.
    pub fn trace(&self, images: &FeatureMap<T>) -> Result<FusionTrace<T>> {
        let taps = self.encode(images)?;
        let mut t = self.trace_eval(images, taps.as_ref(), true)?;
        t.taps = taps;
        Ok(t)
    }

    fn trace_eval(&self, images: &FeatureMap<T>, taps: Option<&EncoderTapSet<T>>, keep: bool) -> Result<FusionTrace<T>> {
        self.check_images(images)?;
        let taps = self.require_taps(taps, images.n)?;
        let forced = self.attention_override;
        let mut attention = Vec::new();
        let mut x = self.backbone.stem.forward_eval(images)?;
        for point in 0..NUM_INJECTION_POINTS {
            if point > 0 {
                for block in &self.backbone.stages[point - 1] {
                    x = block.forward_eval(&x)?;
                }
            }
            if let Some(taps) = taps {
                let fp = &self.fusions[point];
                let tap = taps.get(fp.tap);
                if keep {
                    attention.push(match fp.fusion {
                        Fusion::Add(_) => None,
                        _ => Some(fp.attention_eval(tap, &x, forced)?),
                    });
                }
                x = fp.forward_eval(x, tap, forced)?;
            } else if keep {
                attention.push(None);
            }
        }
        let feat = match (&self.projector, taps) {
            (Some(p), Some(t)) => FeatureMap::concat_channels(&x, &p.forward_eval(&t.neck)?)?,
            _ => x,
        };
        let logits = self.classifier.forward_eval(&global_avg_pool(&feat))?;
        if !logits.data.iter().all(|v| v.is_finite()) {
            return Err(crate::Error::Numeric("non-finite logits".into()));
        }
        Ok(FusionTrace { attention, taps: None, logits })
    }

    /// Accumulates parameter gradients from `d_logits`.
    pub fn backward(&mut self, d_logits: &Matrix<T>) -> Result<()> {
        let cache = self.cache.take().ok_or_else(|| invalid!("model backward without forward_train"))?;
        let d_pool = self.classifier.backward(d_logits)?;
        let d_feat = global_avg_pool_backward(&d_pool, cache.final_hw.0, cache.final_hw.1);
        let mut d = match &mut self.projector {
            Some(p) => {
                let (d_last, d_proj) = d_feat.split_channels(cache.last_channels);
                p.backward(&d_proj)?;
                d_last
            }
            None => d_feat,
        };
        for point in (0..NUM_INJECTION_POINTS).rev() {
            if let Some(fp) = self.fusions.get_mut(point) {
                d = fp.backward(d, cache.forced)?;
            }
            debug_assert_eq!((d.h, d.w), cache.stage_hw[point]);
            if point > 0 {
                for block in self.backbone.stages[point - 1].iter_mut().rev() {
                    d = block.backward(&d, true)?.expect("requested dx");
                }
            }
        }
        self.backbone.stem.backward(&d, false)?;
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.backbone.visit(&join(prefix, "backbone"), f);
        for (i, fp) in self.fusions.iter().enumerate() {
            fp.fusion.visit(&join(prefix, &format!("fusion{i}")), f);
        }
        if let Some(p) = &self.projector {
            p.visit(&join(prefix, "projector"), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        for (i, fp) in self.fusions.iter_mut().enumerate() {
            fp.fusion.visit_mut(&join(prefix, &format!("fusion{i}")), f);
        }
        if let Some(p) = &mut self.projector {
            p.visit_mut(&join(prefix, "projector"), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{softmax_cross_entropy, AdamW, AdamWConfig};
    use rand::SeedableRng;

    fn images(seed: u64, n: usize, s: usize) -> FeatureMap<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(n, 3, s, s, init::uniform(&mut rng, 1.0, n * 3 * s * s)).unwrap()
    }

    #[test]
    fn injection_schedule() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.injection_shapes(), vec![(16, 32), (16, 16), (32, 8), (64, 4), (128, 2)]);
        assert_eq!(cfg.final_size(), 2);
        assert_eq!(ModelSpec::default().fusion_grids(), vec![4, 4, 4, 4, 2]);
    }

    #[test]
    fn backbone_param_count_closed_form() {
        let cfg = BackboneConfig::default();
        let b = Backbone::<f32>::build(&cfg, 3).unwrap();
        assert_eq!(b.trainable_count(), backbone_param_count(&cfg));
        assert_eq!(module_digest(&b), module_digest(&Backbone::<f32>::build(&cfg, 3).unwrap()));
        assert!(BackboneConfig { stage_channels: vec![8, 8], ..cfg.clone() }.validate().is_err());
    }

    #[test]
    fn projector_halving_law() {
        for s_f in [1usize, 2, 4, 7] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
            let p = Projector::<f32>::build(&mut rng, 4, ProjectorConfig::for_final(s_f, 6)).unwrap();
            let out = p.forward_eval(&FeatureMap::filled(1, 4, 5, 5, 0.3)).unwrap();
            assert_eq!(out.shape(), [1, 6, s_f, s_f]);
            assert_eq!(p.output_size(), s_f);
        }
    }

    #[test]
    fn projector_zero_weights_give_bn_constant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = Projector::<f64>::build(&mut rng, 4, ProjectorConfig::for_final(2, 3)).unwrap();
        p.down[2].weight.value.fill(0.0);
        let bn = p.down[2].bn.as_mut().unwrap();
        bn.beta.value = vec![0.7, -0.2, 0.1];
        bn.running_mean.value = vec![0.2, 0.0, 0.0];
        let out = p.forward_eval(&FeatureMap::filled(2, 4, 8, 8, 0.5)).unwrap();
        // relu(gamma * (0 - mean) / sqrt(var + eps) + beta)
        let expect = [(0.7 - 0.2 / (1.0f64 + 1e-5).sqrt()).max(0.0), 0.0, 0.1];
        for n in 0..2 {
            for (c, e) in expect.iter().enumerate() {
                assert!(out.plane(n, c).iter().all(|v| (v - e).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn spec_json_round_trip_and_rejects_unknown_keys() {
        let spec = ModelSpec::default();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ModelSpec>(&json).unwrap(), spec);
        assert!(serde_json::from_str::<ModelSpec>(r#"{"variant":"slca","bogus":1}"#).is_err());
        let s: ModelSpec = serde_json::from_str(r#"{"variant":"baseline"}"#).unwrap();
        assert_eq!(s.tap_assignment, TapName::ALL.to_vec());
        let bad = ModelSpec { tap_assignment: vec![TapName::Pe; 4], ..ModelSpec::default() };
        assert!(Model::<f32>::assemble(&bad).is_err());
    }

    #[test]
    fn classifier_width_per_variant() {
        let m = Model::<f32>::assemble(&ModelSpec::default()).unwrap();
        assert_eq!(m.classifier.in_dim(), 256);
        let b = Model::<f32>::assemble(&ModelSpec::default().with_variant(Variant::Baseline)).unwrap();
        assert_eq!(b.classifier.in_dim(), 128);
        assert!(b.fusions.is_empty());
    }

    #[test]
    fn eval_is_deterministic_and_fusion_is_live() {
        let x = images(1, 3, 64);
        let spec = ModelSpec::default().with_variant(Variant::Slca);
        let m = Model::<f32>::assemble(&spec).unwrap();
        let a = m.forward_eval(&x).unwrap();
        assert_eq!(a.cols, 4);
        assert_eq!(a, m.forward_eval(&x).unwrap());
        let b = Model::<f32>::assemble(&spec.with_variant(Variant::Baseline)).unwrap();
        let base = b.forward_eval(&x).unwrap();
        assert!(a.data.iter().zip(&base.data).any(|(u, v)| u != v));
        // baseline never evaluates the encoder
        assert!(b.encode(&x).unwrap().is_none());
        assert!(m.forward_eval(&images(1, 1, 32)).is_err());
    }

    #[test]
    fn zero_attention_reduces_to_baseline() {
        let x = images(2, 4, 64);
        let spec = ModelSpec::default().with_variant(Variant::Slca);
        let mut m = Model::<f32>::assemble(&spec).unwrap();
        m.attention_override = Some(0.0);
        let mut b = Model::<f32>::assemble(&spec.with_variant(Variant::Baseline)).unwrap();
        for training in [false, true] {
            let u = m.forward_classify(&x, training).unwrap();
            let v = b.forward_classify(&x, training).unwrap();
            let diff = u.data.iter().zip(&v.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(diff < 1e-5, "training={training} diff={diff}");
        }
    }

    #[test]
    fn optimizer_step_leaves_encoder_untouched() {
        let x = images(3, 4, 64);
        let mut m = Model::<f32>::assemble(&ModelSpec::default()).unwrap();
        let (enc, bb) = (m.encoder_digest(), m.backbone_digest());
        let mut opt = AdamW::new(AdamWConfig::new(1e-3, 0.005));
        for _ in 0..2 {
            m.zero_grad();
            let logits = m.forward_train(&x).unwrap();
            let (_, d) = softmax_cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
            m.backward(&d).unwrap();
            opt.step(&mut m);
        }
        assert_eq!(m.encoder_digest(), enc);
        m.encoder.verify_digest().unwrap();
        assert_ne!(m.backbone_digest(), bb);
    }

    #[test]
    fn trace_exposes_attention() {
        let m = Model::<f32>::assemble(&ModelSpec::default()).unwrap();
        let t = m.trace(&images(4, 2, 64)).unwrap();
        let shapes: Vec<_> = t.attention.iter().map(|a| a.as_ref().unwrap().shape()).collect();
        assert_eq!(shapes, vec![[2, 16, 4, 4], [2, 16, 4, 4], [2, 32, 4, 4], [2, 64, 4, 4], [2, 128, 2, 2]]);
        assert!(t.attention.iter().flatten().all(|a| a.data.iter().all(|&v| v > 0.0 && v < 1.0)));
    }
}
