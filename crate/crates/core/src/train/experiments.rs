//! Seed-averaged sweeps: fusion ablation, tap-choice ablation and training
//! data fractions, rendered as JSON tables and Markdown.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::taps::TapCache;
use super::trainer::{run_experiment, ExperimentRecord, HyperParams, TrainFailure};
use crate::data::{Dataset, Split};
use crate::digest::fnv1a;
use crate::encoder::{Encoder, TapName};
use crate::error::{invalid, Error, Result};
use crate::model::NUM_INJECTION_POINTS;
use crate::{ModelSpec, Variant};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.1, 0.5, 1.0];
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Fusion,
    Blocks,
    Fractions,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(AblationMode::Fusion),
            "blocks" => Ok(AblationMode::Blocks),
            "fractions" => Ok(AblationMode::Fractions),
            _ => Err(invalid!("unknown ablation mode {s:?} (expected fusion, blocks or fractions)")),
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }

    fn pct(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// One table cell: a configuration trained under every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub variant: Variant,
    pub fraction: f64,
    pub tap_assignment: Vec<TapName>,
    pub seeds: Vec<u64>,
    pub per_seed_accuracy: Vec<f64>,
    pub per_seed_auc: Vec<f64>,
    pub accuracy: Stat,
    pub auc: Stat,
    pub run_ids: Vec<String>,
}

/// `variant − baseline` at one fraction; the std is over per-seed paired differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub fraction: f64,
    pub accuracy: Stat,
    pub auc: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub mode: AblationMode,
    pub rows: Vec<CellSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub improvements: Vec<Improvement>,
}

impl ResultTable {
    pub fn row(&self, variant: Variant, fraction: f64) -> Option<&CellSummary> {
        self.rows.iter().find(|r| r.variant == variant && r.fraction == fraction)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        match self.mode {
            AblationMode::Fusion | AblationMode::Blocks => {
                let head = if self.mode == AblationMode::Fusion { "Method" } else { "Features" };
                s += &format!("| {head} | Acc (%) | AUC (%) |\n|---|---|---|\n");
                for r in &self.rows {
                    s += &format!("| {} | {} | {} |\n", r.label, r.accuracy.pct(), r.auc.pct());
                }
            }
            AblationMode::Fractions => {
                let mut fractions: Vec<f64> = self.rows.iter().map(|r| r.fraction).collect();
                fractions.dedup();
                s += "| Method |";
                for f in &fractions {
                    s += &format!(" {}% Acc | {}% AUC |", pct_label(*f), pct_label(*f));
                }
                s += "\n|---|";
                s += &"---|---|".repeat(fractions.len());
                s += "\n";
                let mut variants: Vec<Variant> = Vec::new();
                for r in &self.rows {
                    if !variants.contains(&r.variant) {
                        variants.push(r.variant);
                    }
                }
                for v in variants {
                    let label = self.rows.iter().find(|r| r.variant == v).map(|r| r.label.clone()).unwrap_or_default();
                    s += &format!("| {label} |");
                    for &f in &fractions {
                        match self.row(v, f) {
                            Some(r) => s += &format!(" {} | {} |", r.accuracy.pct(), r.auc.pct()),
                            None => s += " – | – |",
                        }
                    }
                    s += "\n";
                }
                if !self.improvements.is_empty() {
                    s += "| Improvement |";
                    for &f in &fractions {
                        match self.improvements.iter().find(|i| i.fraction == f) {
                            Some(i) => s += &format!(" {:+.2} | {:+.2} |", 100.0 * i.accuracy.mean, 100.0 * i.auc.mean),
                            None => s += " – | – |",
                        }
                    }
                    s += "\n";
                }
            }
        }
        s
    }
}

fn pct_label(f: f64) -> String {
    let p = 100.0 * f;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

/// One training run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub spec: ModelSpec,
    pub hyperparams: HyperParams,
    pub fraction: f64,
}

impl RunKey {
    pub fn run_id(&self) -> String {
        let mut id = format!("{}-p{}-s{}", self.spec.variant.as_str(), pct_label(self.fraction), self.hyperparams.seed);
        if self.spec.tap_assignment != TapName::ALL {
            let first = self.spec.tap_assignment[0];
            if self.spec.tap_assignment.iter().all(|&t| t == first) {
                id += &format!("-all_{}", first.as_str());
            } else {
                let names: Vec<&str> = self.spec.tap_assignment.iter().map(|t| t.as_str()).collect();
                id += &format!("-{}", names.join("_"));
            }
        }
        id
    }
}

/// Shared inputs of a sweep.
pub struct Experiment<'a> {
    pub dataset: &'a Dataset,
    pub split: Split,
    pub base_spec: ModelSpec,
    pub hyperparams: HyperParams,
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    pub workers: usize,
    /// Directory of finished records, keyed by configuration and dataset digest.
    pub cache_dir: Option<PathBuf>,
    pub progress: bool,
    /// Share encoder taps across runs (bit-identical to recomputing them).
    pub cache_taps: bool,
    memo: Mutex<HashMap<String, ExperimentRecord>>,
    taps: OnceLock<Option<TapCache<f32>>>,
}

impl<'a> Experiment<'a> {
    pub fn new(dataset: &'a Dataset, split: Split, base_spec: ModelSpec, hyperparams: HyperParams) -> Self {
        Self {
            dataset,
            split,
            base_spec,
            hyperparams,
            seeds: DEFAULT_SEEDS.to_vec(),
            fractions: DEFAULT_FRACTIONS.to_vec(),
            workers: 1,
            cache_dir: None,
            progress: false,
            cache_taps: true,
            memo: Mutex::new(HashMap::new()),
            taps: OnceLock::new(),
        }
    }

    fn key(&self, variant: Variant, taps: &[TapName], fraction: f64, seed: u64) -> RunKey {
        let mut spec = self.base_spec.with_variant(variant);
        spec.tap_assignment = taps.to_vec();
        spec.seed = seed;
        RunKey { spec, hyperparams: HyperParams { seed, ..self.hyperparams.clone() }, fraction }
    }

    fn memo_key(&self, key: &RunKey) -> Result<String> {
        let mut s = serde_json::to_string(key)?;
        s += &format!("|{:016x}|{:?}", self.dataset.digest(), self.split);
        Ok(format!("{:016x}", fnv1a(s.as_bytes())))
    }

    /// Runs (or recalls) one configuration.
    pub fn run(&self, key: &RunKey) -> std::result::Result<ExperimentRecord, TrainFailure> {
        let mk = self.memo_key(key)?;
        if let Some(r) = self.memo.lock().expect("memo lock").get(&mk) {
            return Ok(r.clone());
        }
        let cached = self.cache_dir.as_ref().map(|d| d.join(format!("{}-{mk}.json", key.run_id())));
        if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
            let record: ExperimentRecord = serde_json::from_slice(&std::fs::read(path).map_err(Error::from)?)
                .map_err(Error::from)?;
            self.memo.lock().expect("memo lock").insert(mk, record.clone());
            return Ok(record);
        }
        let id = key.run_id();
        let taps = self
            .taps
            .get_or_init(|| {
                self.cache_taps
                    .then(|| Encoder::build(&self.base_spec.encoder).ok().map(|e| TapCache::new(self.dataset, &e)))
                    .flatten()
            })
            .as_ref();
        let (_, out) =
            run_experiment(&key.spec, &key.hyperparams, self.dataset, &self.split, key.fraction, &id, taps, None)?;
        if self.progress {
            eprintln!(
                "  {id}: test acc {:.4} auc {:.4} (best epoch {})",
                out.record.test_accuracy(),
                out.record.final_test.map(|m| m.auc_macro_ovr).unwrap_or(f64::NAN),
                out.record.best_epoch
            );
        }
        if let Some(path) = cached {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(Error::from)?;
            }
            std::fs::write(&path, serde_json::to_vec_pretty(&out.record).map_err(Error::from)?).map_err(Error::from)?;
        }
        self.memo.lock().expect("memo lock").insert(mk, out.record.clone());
        Ok(out.record)
    }

    /// Runs every key, `workers` at a time, returning records in key order.
    pub fn run_all(&self, keys: &[RunKey]) -> std::result::Result<Vec<ExperimentRecord>, TrainFailure> {
        if self.workers <= 1 {
            return keys.iter().map(|k| self.run(k)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
        pool.install(|| keys.par_iter().map(|k| self.run(k)).collect())
    }

    fn cell(&self, label: String, variant: Variant, taps: &[TapName], fraction: f64) -> std::result::Result<CellSummary, TrainFailure> {
        let keys: Vec<RunKey> = self.seeds.iter().map(|&s| self.key(variant, taps, fraction, s)).collect();
        let records = self.run_all(&keys)?;
        Ok(summarize_cell(label, variant, taps, fraction, &self.seeds, &records))
    }

    fn cells(&self, plan: &[(String, Variant, Vec<TapName>, f64)]) -> std::result::Result<Vec<CellSummary>, TrainFailure> {
        // one flat batch so parallel workers see the whole grid
        let keys: Vec<RunKey> = plan
            .iter()
            .flat_map(|(_, v, t, f)| self.seeds.iter().map(move |&s| self.key(*v, t, *f, s)))
            .collect();
        self.run_all(&keys)?;
        plan.iter().map(|(l, v, t, f)| self.cell(l.clone(), *v, t, *f)).collect()
    }

    /// Table III analogue: every fusion variant on the full training split.
    pub fn run_ablation(&self) -> std::result::Result<ResultTable, TrainFailure> {
        self.run_variants(&Variant::ALL)
    }

    /// The fusion table restricted to `variants`.
    pub fn run_variants(&self, variants: &[Variant]) -> std::result::Result<ResultTable, TrainFailure> {
        let taps = self.base_spec.tap_assignment.clone();
        let plan: Vec<_> = variants.iter().map(|&v| (v.label().to_string(), v, taps.clone(), 1.0)).collect();
        Ok(ResultTable { mode: AblationMode::Fusion, rows: self.cells(&plan)?, improvements: Vec::new() })
    }

    /// Table IV analogue: each tap repeated at all five points, then the mixed default.
    pub fn run_block_ablation(&self) -> std::result::Result<ResultTable, TrainFailure> {
        let mut plan: Vec<_> = TapName::ALL
            .iter()
            .map(|&t| (format!("w/ all five features from {}", tap_label(t)), Variant::Slca, vec![t; NUM_INJECTION_POINTS], 1.0))
            .collect();
        let mixed: Vec<&str> = TapName::ALL.iter().map(|&t| tap_label(t)).collect();
        plan.push((format!("w/ features from {} (ours)", mixed.join(", ")), Variant::Slca, TapName::ALL.to_vec(), 1.0));
        Ok(ResultTable { mode: AblationMode::Blocks, rows: self.cells(&plan)?, improvements: Vec::new() })
    }

    /// Tables I/II analogue: the base variant and the baseline at each fraction.
    pub fn run_fraction_sweep(&self) -> std::result::Result<ResultTable, TrainFailure> {
        let variant = self.base_spec.variant;
        if variant == Variant::Baseline {
            return Err(invalid!("the fraction sweep compares a fusion variant against the baseline").into());
        }
        let taps = self.base_spec.tap_assignment.clone();
        let mut plan = Vec::new();
        for v in [Variant::Baseline, variant] {
            for &f in &self.fractions {
                plan.push((v.label().to_string(), v, taps.clone(), f));
            }
        }
        let rows = self.cells(&plan)?;
        let improvements = self
            .fractions
            .iter()
            .map(|&f| {
                let base = rows.iter().find(|r| r.variant == Variant::Baseline && r.fraction == f).expect("planned");
                let ours = rows.iter().find(|r| r.variant == variant && r.fraction == f).expect("planned");
                let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
                Improvement {
                    fraction: f,
                    accuracy: Stat::of(&diff(&ours.per_seed_accuracy, &base.per_seed_accuracy)),
                    auc: Stat::of(&diff(&ours.per_seed_auc, &base.per_seed_auc)),
                }
            })
            .collect();
        Ok(ResultTable { mode: AblationMode::Fractions, rows, improvements })
    }

    pub fn run_mode(&self, mode: AblationMode) -> std::result::Result<ResultTable, TrainFailure> {
        match mode {
            AblationMode::Fusion => self.run_ablation(),
            AblationMode::Blocks => self.run_block_ablation(),
            AblationMode::Fractions => self.run_fraction_sweep(),
        }
    }
}

pub fn tap_label(t: TapName) -> &'static str {
    match t {
        TapName::Pe => "PE",
        TapName::TFirst => "the first block",
        TapName::TMid => "the middle block",
        TapName::TLast => "the last block",
        TapName::Neck => "the conv neck",
    }
}

pub fn summarize_cell(
    label: String,
    variant: Variant,
    taps: &[TapName],
    fraction: f64,
    seeds: &[u64],
    records: &[ExperimentRecord],
) -> CellSummary {
    let acc: Vec<f64> = records.iter().map(|r| r.test_accuracy()).collect();
    let auc: Vec<f64> = records.iter().map(|r| r.final_test.map(|m| m.auc_macro_ovr).unwrap_or(f64::NAN)).collect();
    CellSummary {
        label,
        variant,
        fraction,
        tap_assignment: taps.to_vec(),
        seeds: seeds.to_vec(),
        accuracy: Stat::of(&acc),
        auc: Stat::of(&auc),
        per_seed_accuracy: acc,
        per_seed_auc: auc,
        run_ids: records.iter().map(|r| r.run_id.clone()).collect(),
    }
}
