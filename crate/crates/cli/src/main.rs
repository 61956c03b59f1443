//! `slca` — dataset generation, training, ablations, gradient checks and
//! attention heatmaps.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or config error,
//! 3 numeric divergence, 4 gradient check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use slca_core::checks::{run_check, CheckKind, CheckSetup};
use slca_core::data::{Dataset, Split};
use slca_core::train::experiments::{AblationMode, Experiment, DEFAULT_FRACTIONS, DEFAULT_SEEDS};
use slca_core::train::{load_encoder, train, HyperParams, RunData, TapCache, TrainFailure};
use slca_core::{Error, Model, ModelSpec};

const OUT_ENV: &str = "SLCA_OUT_DIR";

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CmdResult<T = ()> = Result<T, Failure>;

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn io(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, err: err.into() }
}

/// Library errors: bad input → 2, divergence → 3, everything else → 1.
fn core(err: Error) -> Failure {
    let code = match err {
        Error::InvalidInput(_) | Error::Json(_) => 2,
        Error::Numeric(_) => 3,
        Error::Format(_) | Error::Io(_) | Error::UndefinedMetric(_) => 1,
    };
    Failure { code, err: err.into() }
}

#[derive(Parser)]
#[command(name = "slca", version, about = "Frozen-encoder feature fusion with spatially localized channel attention")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic shape dataset and print its digest.
    GenData {
        /// Output file (default: $SLCA_OUT_DIR/synth.bin).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 2500)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train one model; writes metrics.jsonl, best.ckpt and record.json.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Seed-averaged ablation tables (JSON and Markdown).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Parallel training runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Finite-difference gradient check in 64-bit; exit 4 when it fails.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        block: Block,
        /// Test hook: perturbs the analytic gradient so the check must fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Attention heatmaps (PGM) for one image.
    VizAttn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fusion,
    Blocks,
    Fractions,
}

#[derive(Clone, Copy, ValueEnum)]
enum Block {
    Slca,
    Projector,
    Full,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitConfig {
    train: usize,
    val: usize,
    test: usize,
    #[serde(default)]
    seed: u64,
}

/// Everything a command needs; unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    model: ModelSpec,
    #[serde(default)]
    hyperparams: HyperParams,
    #[serde(default)]
    dataset: Option<PathBuf>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    /// Default: first N − 2·⌊N/6⌋ samples for training, then val and test.
    #[serde(default)]
    split: Option<SplitConfig>,
    #[serde(default = "one")]
    fraction: f64,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_fractions")]
    fractions: Vec<f64>,
    /// Encoder weights in checkpoint format, in place of the seeded stand-in.
    #[serde(default)]
    encoder_weights: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_fractions() -> Vec<f64> {
    DEFAULT_FRACTIONS.to_vec()
}

impl RunConfig {
    fn load(path: &Path) -> CmdResult<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display())).map_err(usage)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display())).map_err(usage)?;
        cfg.model.validate().map_err(core)?;
        cfg.hyperparams.validate().map_err(core)?;
        if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) || cfg.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(usage(anyhow!("fractions must lie in (0, 1]")));
        }
        if cfg.seeds.is_empty() {
            return Err(usage(anyhow!("seeds must not be empty")));
        }
        Ok(cfg)
    }

    fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("slca-out"))
    }

    fn dataset(&self) -> CmdResult<Dataset> {
        let path = self.dataset.as_ref().ok_or_else(|| usage(anyhow!("config has no dataset path")))?;
        if !path.is_file() {
            return Err(usage(anyhow!("dataset {} does not exist", path.display())));
        }
        let d = Dataset::load(path).map_err(core)?;
        let bb = &self.model.backbone;
        if d.image_size() != bb.input_size || d.num_classes() != bb.num_classes {
            return Err(usage(anyhow!(
                "dataset is {0}×{0} with {1} classes but the model expects {2}×{2} with {3}",
                d.image_size(),
                d.num_classes(),
                bb.input_size,
                bb.num_classes
            )));
        }
        Ok(d)
    }

    fn split(&self, d: &Dataset) -> CmdResult<Split> {
        match &self.split {
            Some(s) => Split::contiguous(d.len(), s.train, s.val, s.test).map(|x| x.with_seed(s.seed)),
            None => Split::standard(d.len(), d.num_classes()),
        }
        .map_err(core)
    }

    fn model(&self) -> CmdResult<Model<f32>> {
        match &self.encoder_weights {
            Some(p) => {
                let enc = load_encoder(&self.model.encoder, p).map_err(core)?;
                Model::assemble_with_encoder(&self.model, enc).map_err(core)
            }
            None => Model::assemble(&self.model).map_err(core),
        }
    }
}

fn ensure_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(io)
}

fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display())).map_err(io)
}

fn json<T: Serialize>(v: &T) -> CmdResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(io)?;
    out.push(b'\n');
    Ok(out)
}

fn gen_data(out: Option<PathBuf>, n: usize, size: usize, classes: usize, seed: u64) -> CmdResult {
    let out = out.unwrap_or_else(|| {
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")).join("synth.bin")
    });
    let d = Dataset::generate(n, size, classes, seed).map_err(core)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let bytes = d.to_bytes();
    write(&out, &bytes)?;
    println!("{:016x}  {} ({} bytes)", slca_core::digest::fnv1a(&bytes), out.display(), bytes.len());
    Ok(())
}

fn cmd_train(config: &Path) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let data = cfg.dataset()?;
    let split = cfg.split(&data)?;
    let out = cfg.output_dir();
    ensure_dir(&out)?;
    let train_idx = slca_core::data::stratified_fraction(
        &split.train,
        &data.labels(),
        data.num_classes(),
        cfg.fraction,
        split.seed,
    )
    .map_err(core)?;
    let mut model = cfg.model()?;
    let cache = TapCache::new(&data, &model.encoder);
    let run = RunData {
        dataset: &data,
        train: &train_idx,
        val: &split.val,
        test: Some(&split.test),
        fraction: cfg.fraction,
        taps: Some(&cache),
    };
    let run_id = format!("{}-s{}", cfg.model.variant.as_str(), cfg.hyperparams.seed);
    let mut metrics = Vec::new();
    let start = Instant::now();
    let result = train(&mut model, &run, &cfg.hyperparams, &run_id, Some(&mut metrics));
    let secs = start.elapsed().as_secs_f64();
    write(&out.join("metrics.jsonl"), &metrics)?;
    write(&out.join("timing.json"), &json(&serde_json::json!({ "wall_clock_seconds": secs }))?)?;
    match result {
        Ok(o) => {
            o.best.save(out.join("best.ckpt")).map_err(core)?;
            write(&out.join("record.json"), &json(&o.record)?)?;
            let test = o.record.final_test.expect("test split given");
            println!(
                "best epoch {} val acc {:.4}; test acc {:.4} auc {:.4}; encoder digest {} (unchanged: {})",
                o.record.best_epoch,
                o.record.best_val_accuracy,
                test.accuracy,
                test.auc_macro_ovr,
                o.record.encoder_digest_after,
                o.record.encoder_unchanged()
            );
            Ok(())
        }
        Err(TrainFailure { error, partial }) => {
            if let Some(r) = partial {
                write(&out.join("record.json"), &json(&r)?)?;
            }
            Err(core(error))
        }
    }
}

fn cmd_ablate(config: &Path, mode: Mode, workers: usize) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    if cfg.encoder_weights.is_some() {
        return Err(usage(anyhow!("ablations use the seeded encoder; remove encoder_weights")));
    }
    if workers == 0 {
        return Err(usage(anyhow!("--workers must be at least 1")));
    }
    let data = cfg.dataset()?;
    let split = cfg.split(&data)?;
    let out = cfg.output_dir();
    ensure_dir(&out)?;
    let mut exp = Experiment::new(&data, split, cfg.model.clone(), cfg.hyperparams.clone());
    exp.seeds = cfg.seeds.clone();
    exp.fractions = cfg.fractions.clone();
    exp.workers = workers;
    exp.progress = true;
    let mode = match mode {
        Mode::Fusion => AblationMode::Fusion,
        Mode::Blocks => AblationMode::Blocks,
        Mode::Fractions => AblationMode::Fractions,
    };
    let table = exp.run_mode(mode).map_err(|f| core(f.error))?;
    let name = serde_json::to_value(mode).map_err(io)?;
    let name = name.as_str().expect("unit variant");
    write(&out.join(format!("ablation_{name}.json")), &json(&table)?)?;
    let md = table.to_markdown();
    write(&out.join(format!("ablation_{name}.md")), md.as_bytes())?;
    print!("{md}");
    Ok(())
}

fn cmd_gradcheck(config: &Path, block: Block, corrupt: bool) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let kind = match block {
        Block::Slca => CheckKind::Slca,
        Block::Projector => CheckKind::Projector,
        Block::Full => CheckKind::Full,
    };
    let out = cfg.output_dir();
    ensure_dir(&out)?;
    let setup = CheckSetup { corrupt, ..Default::default() };
    let report = run_check(kind, &cfg.model, &setup).map_err(core)?;
    let threshold = kind.threshold();
    let pass = report.passes(threshold);
    let doc = serde_json::json!({
        "block": serde_json::to_value(kind).map_err(io)?,
        "threshold": threshold,
        "pass": pass,
        "report": report,
    });
    let path = out.join(format!("gradcheck_{}.json", doc["block"].as_str().unwrap_or("block")));
    write(&path, &json(&doc)?)?;
    println!(
        "max relative error {:.3e} over {} entries (threshold {threshold:e}): {}",
        report.max_rel_error,
        report.checked,
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(Failure { code: 4, err: anyhow!("gradient check failed; report at {}", path.display()) })
    }
}

fn cmd_viz(config: &Path, ckpt: &Path, index: usize, out: &Path) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let data = cfg.dataset()?;
    if index >= data.len() {
        return Err(usage(anyhow!("--image-index {index} out of range (dataset has {} samples)", data.len())));
    }
    let mut model = cfg.model()?;
    slca_core::train::load_checkpoint(&mut model, ckpt).map_err(core)?;
    model.encoder.freeze();
    let files = slca_core::viz::attention_heatmaps(&model, &data, index).map_err(core)?;
    ensure_dir(out)?;
    for (name, bytes) in files {
        write(&out.join(&name), &bytes)?;
        println!("{}", out.join(name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.cmd {
        Cmd::GenData { out, n, size, classes, seed } => gen_data(out, n, size, classes, seed),
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Ablate { config, mode, workers } => cmd_ablate(&config, mode, workers),
        Cmd::Gradcheck { config, block, corrupt } => cmd_gradcheck(&config, block, corrupt),
        Cmd::VizAttn { config, ckpt, image_index, out } => cmd_viz(&config, &ckpt, image_index, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
