//! Central finite-difference verification of analytic gradients (64-bit).

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init;
use crate::nn::kink::with_pattern;
use crate::tensor::Module;

/// A scalar-valued computation over trainable `f64` parameters.
pub trait GradCheckTarget {
    /// Forward and backward pass; analytic gradients are left in the parameters.
    fn loss_and_grad(&mut self) -> Result<f64>;
    /// Forward only, identical mode to [`GradCheckTarget::loss_and_grad`].
    fn loss(&mut self) -> Result<f64>;
    fn module(&mut self) -> &mut dyn Module<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose step was shrunk because a ReLU changed state within it.
    pub refined: usize,
    /// Entries still straddling a kink at the smallest step.
    pub unresolved: usize,
    /// Flat index of the entry with the largest error.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub per_param: Vec<ParamError>,
    pub max_rel_error: f64,
    /// Number of trainable scalar parameters that were perturbed.
    pub checked: usize,
    pub refined: usize,
    pub unresolved: usize,
}

impl GradReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Step relative to the RMS of each tensor (1.0 for all-zero tensors).
    pub eps: f64,
    /// Entries checked per tensor; tensors at most this long are checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Times the step may be divided by 10 while a perturbation flips some
    /// ReLU (the difference quotient then straddles a kink).
    pub max_refinements: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-3, samples_per_tensor: 50, seed: 0, max_refinements: 4 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn with_trainable(target: &mut dyn GradCheckTarget, k: usize, f: &mut dyn FnMut(&mut Vec<f64>)) {
    let mut i = 0;
    target.module().visit_mut("", &mut |_, p| {
        if p.trainable {
            if i == k {
                f(&mut p.value);
            }
            i += 1;
        }
    });
}

fn finite_loss(target: &mut dyn GradCheckTarget) -> Result<f64> {
    let l = target.loss()?;
    if l.is_finite() {
        Ok(l)
    } else {
        Err(Error::Numeric("non-finite loss during gradient check".into()))
    }
}

/// Central difference for entry `i` of trainable tensor `k`, restoring θ.
/// Also reports whether both evaluations kept the base ReLU pattern.
fn central(target: &mut dyn GradCheckTarget, k: usize, i: usize, h: f64, base: u64) -> Result<(f64, bool)> {
    let mut orig = 0.0;
    with_trainable(target, k, &mut |v| {
        orig = v[i];
        v[i] = orig + h;
    });
    let (plus, p_plus) = with_pattern(|| finite_loss(target));
    with_trainable(target, k, &mut |v| v[i] = orig - h);
    let (minus, p_minus) = with_pattern(|| finite_loss(target));
    with_trainable(target, k, &mut |v| v[i] = orig);
    Ok(((plus? - minus?) / (2.0 * h), p_plus == base && p_minus == base))
}

pub fn grad_check(target: &mut dyn GradCheckTarget, opts: GradCheckOptions) -> Result<GradReport> {
    target.module().zero_grad();
    let base = target.loss_and_grad()?;
    if !base.is_finite() {
        return Err(Error::Numeric("non-finite loss during gradient check".into()));
    }
    let (_, base_pattern) = with_pattern(|| finite_loss(target));
    let mut tensors = Vec::new();
    target.module().visit("", &mut |name, p| {
        if p.trainable {
            let rms = (p.value.iter().map(|v| v * v).sum::<f64>() / p.len().max(1) as f64).sqrt();
            tensors.push((name.to_string(), p.grad.clone(), if rms > 0.0 { rms } else { 1.0 }));
        }
    });

    let mut rng = init::stream(opts.seed, "grad_check");
    let mut per_param = Vec::with_capacity(tensors.len());
    let mut checked = 0;
    for (k, (name, analytic, scale)) in tensors.iter().enumerate() {
        let len = analytic.len();
        let picks: Vec<usize> = if len <= opts.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut v = index::sample(&mut rng, len, opts.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        let mut refined = 0;
        let mut unresolved = 0;
        let mut worst_index = 0;
        for &i in &picks {
            // Shrink the step until neither side flips a ReLU.
            let mut h = opts.eps * scale;
            let mut attempt = 0;
            let numeric = loop {
                let (numeric, clean) = central(target, k, i, h, base_pattern)?;
                if clean {
                    break numeric;
                }
                if attempt == opts.max_refinements {
                    unresolved += 1;
                    break numeric;
                }
                attempt += 1;
                h /= 10.0;
            };
            refined += usize::from(attempt > 0);
            let err = relative_error(analytic[i], numeric);
            if err > worst {
                worst = err;
                worst_index = i;
            }
        }
        checked += picks.len();
        per_param.push(ParamError { name: name.clone(), max_rel_error: worst, checked: picks.len(), refined, unresolved, worst_index });
    }
    let max_rel_error = per_param.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    let refined = per_param.iter().map(|p| p.refined).sum();
    let unresolved = per_param.iter().map(|p| p.unresolved).sum();
    Ok(GradReport { per_param, max_rel_error, checked, refined, unresolved })
}
