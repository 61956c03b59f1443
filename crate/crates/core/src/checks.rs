//! Finite-difference check targets for the SLCA block, the projector head and
//! the full model, all in 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{Model, Projector, ProjectorConfig};
use crate::nn::{grad_check, init, softmax_cross_entropy, GradCheckOptions, GradCheckTarget, GradReport};
use crate::slca::{apply_attention_residual, SlcaBlock, SlcaConfig};
use crate::tensor::{FeatureMap, Module};
use crate::{EncoderTapSet, ModelSpec, Variant};

/// Pass thresholds on the max relative error.
pub const BLOCK_THRESHOLD: f64 = 1e-4;
pub const FULL_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Slca,
    Projector,
    Full,
}

impl CheckKind {
    pub fn threshold(self) -> f64 {
        match self {
            CheckKind::Full => FULL_THRESHOLD,
            _ => BLOCK_THRESHOLD,
        }
    }
}

impl std::str::FromStr for CheckKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slca" => Ok(CheckKind::Slca),
            "projector" => Ok(CheckKind::Projector),
            "full" => Ok(CheckKind::Full),
            _ => Err(invalid!("unknown gradcheck block {s:?} (expected slca, projector or full)")),
        }
    }
}

fn random_map(rng: &mut impl rand::Rng, n: usize, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap::from_vec(n, c, h, w, init::uniform(rng, 1.0, n * c * h * w)).expect("sizes agree")
}

fn weighted_sum(y: &FeatureMap<f64>, w: &FeatureMap<f64>) -> f64 {
    y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}

/// `Σ W ⊙ (S + S ⊙ up(SLCA(F)))` with train-mode BN.
pub struct SlcaCheck {
    pub block: SlcaBlock<f64>,
    input: FeatureMap<f64>,
    stage: FeatureMap<f64>,
    weights: FeatureMap<f64>,
}

impl SlcaCheck {
    pub fn new(c_in: usize, grid: usize, c_out: usize, stage_size: usize, cfg: SlcaConfig, batch: usize, seed: u64) -> Result<Self> {
        let mut rng = init::stream(seed, "gradcheck.slca");
        let block = SlcaBlock::init(&mut rng, c_in, c_out, cfg)?;
        Ok(Self {
            block,
            input: random_map(&mut rng, batch, c_in, grid, grid),
            stage: random_map(&mut rng, batch, c_out, stage_size, stage_size),
            weights: random_map(&mut rng, batch, c_out, stage_size, stage_size),
        })
    }

    fn forward(&mut self) -> Result<(f64, FeatureMap<f64>)> {
        let att = self.block.forward(&self.input, true)?;
        let y = apply_attention_residual(&self.stage, &att)?;
        Ok((weighted_sum(&y, &self.weights), att))
    }
}

impl GradCheckTarget for SlcaCheck {
    fn loss_and_grad(&mut self) -> Result<f64> {
        let (loss, att) = self.forward()?;
        let (_, d_att) = crate::slca::apply_attention_residual_backward(&self.stage, &att, &self.weights)?;
        self.block.backward(&d_att, false)?;
        Ok(loss)
    }

    fn loss(&mut self) -> Result<f64> {
        Ok(self.forward()?.0)
    }

    fn module(&mut self) -> &mut dyn Module<f64> {
        &mut self.block
    }
}

/// `Σ W ⊙ projector(neck)` with train-mode BN.
pub struct ProjectorCheck {
    pub projector: Projector<f64>,
    neck: FeatureMap<f64>,
    weights: FeatureMap<f64>,
}

impl ProjectorCheck {
    pub fn new(c_in: usize, grid: usize, cfg: ProjectorConfig, batch: usize, seed: u64) -> Result<Self> {
        let mut rng = init::stream(seed, "gradcheck.projector");
        let projector = Projector::build(&mut rng, c_in, cfg)?;
        let (c, s) = (projector.cfg.mid_channels, projector.output_size());
        Ok(Self {
            neck: random_map(&mut rng, batch, c_in, grid, grid),
            weights: random_map(&mut rng, batch, c, s, s),
            projector,
        })
    }
}

impl GradCheckTarget for ProjectorCheck {
    fn loss_and_grad(&mut self) -> Result<f64> {
        let y = self.projector.forward_train(&self.neck)?;
        self.projector.backward(&self.weights)?;
        Ok(weighted_sum(&y, &self.weights))
    }

    fn loss(&mut self) -> Result<f64> {
        Ok(weighted_sum(&self.projector.forward_train(&self.neck)?, &self.weights))
    }

    fn module(&mut self) -> &mut dyn Module<f64> {
        &mut self.projector
    }
}

/// Mean cross-entropy of the assembled model on a fixed random batch.
pub struct ModelCheck {
    pub model: Model<f64>,
    images: FeatureMap<f64>,
    taps: Option<EncoderTapSet<f64>>,
    labels: Vec<usize>,
}

impl ModelCheck {
    pub fn new(spec: &ModelSpec, batch: usize, seed: u64) -> Result<Self> {
        let model = Model::<f64>::assemble(spec)?;
        let mut rng = init::stream(seed, "gradcheck.model");
        let s = spec.backbone.input_size;
        let images = random_map(&mut rng, batch, 3, s, s);
        let taps = model.encode(&images)?;
        let labels = (0..batch).map(|i| i % model.num_classes()).collect();
        Ok(Self { model, images, taps, labels })
    }
}

impl GradCheckTarget for ModelCheck {
    fn loss_and_grad(&mut self) -> Result<f64> {
        let logits = self.model.forward_train_with_taps(&self.images, self.taps.as_ref())?;
        let (loss, d) = softmax_cross_entropy(&logits, &self.labels)?;
        self.model.backward(&d)?;
        Ok(loss)
    }

    fn loss(&mut self) -> Result<f64> {
        let logits = self.model.forward_train_with_taps(&self.images, self.taps.as_ref())?;
        Ok(softmax_cross_entropy(&logits, &self.labels)?.0)
    }

    fn module(&mut self) -> &mut dyn Module<f64> {
        &mut self.model
    }
}

/// Wraps a target and scales the first trainable tensor's analytic gradient.
pub struct Corrupted<G>(pub G);

impl<G: GradCheckTarget> GradCheckTarget for Corrupted<G> {
    fn loss_and_grad(&mut self) -> Result<f64> {
        let l = self.0.loss_and_grad()?;
        let mut first = true;
        self.0.module().visit_mut("", &mut |_, p| {
            if p.trainable && first {
                first = false;
                for g in &mut p.grad {
                    *g = *g * 1.5 + 1e-3;
                }
            }
        });
        Ok(l)
    }

    fn loss(&mut self) -> Result<f64> {
        self.0.loss()
    }

    fn module(&mut self) -> &mut dyn Module<f64> {
        self.0.module()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckSetup {
    pub batch: usize,
    pub seed: u64,
    pub corrupt: bool,
    pub options: GradCheckOptions,
}

impl Default for CheckSetup {
    fn default() -> Self {
        Self { batch: 4, seed: 0, corrupt: false, options: GradCheckOptions::default() }
    }
}

fn run<G: GradCheckTarget>(target: G, setup: &CheckSetup) -> Result<GradReport> {
    if setup.corrupt {
        grad_check(&mut Corrupted(target), setup.options)
    } else {
        let mut target = target;
        grad_check(&mut target, setup.options)
    }
}

/// Builds the requested target from `spec` (the full check always uses the
/// `slca_projector` variant) and runs the finite-difference check.
pub fn run_check(kind: CheckKind, spec: &ModelSpec, setup: &CheckSetup) -> Result<GradReport> {
    spec.validate()?;
    let grid = spec.encoder.grid();
    match kind {
        CheckKind::Slca => {
            let (c_s, s) = spec.backbone.injection_shapes()[0];
            let g = spec.fusion_grids()[0];
            let cfg = SlcaConfig { g, ..spec.slca };
            run(SlcaCheck::new(spec.encoder.embed_dim, grid, c_s, s, cfg, setup.batch, setup.seed)?, setup)
        }
        CheckKind::Projector => {
            let cfg = ProjectorConfig::for_backbone(&spec.backbone);
            run(ProjectorCheck::new(spec.encoder.neck_out_dim, grid, cfg, setup.batch, setup.seed)?, setup)
        }
        CheckKind::Full => run(ModelCheck::new(&spec.with_variant(Variant::SlcaProjector), setup.batch, setup.seed)?, setup),
    }
}
