use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nasklab::ablation::{self, Axis};
use nasklab::config::RunConfig;
use nasklab::eval::{self, format_table, MatchResult, TableRow};
use nasklab::pipeline::{self, Pooling, Stage, CHECKPOINT_FILE};
use nasklab::synth::{self, Sample, SynthSpec};

/// Environment variable naming the default dataset root.
const DATA_ENV: &str = "NASKLAB_DATA";

#[derive(Parser)]
#[command(name = "nasklab", version, about = "Two-stage arbitrary-shape text detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        /// TOML file of generator settings; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Dataset root with images/ and gt/ (and chars/ for geometry supervision).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Detect text in images and write one polygon file per image.
    Detect {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files, directories of PNGs, or dataset roots.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score detection files against ground-truth annotations.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Directory of detection files.
        #[arg(long)]
        preds: PathBuf,
        /// Directory of annotation files, or a dataset root with gt/.
        #[arg(long)]
        gts: PathBuf,
    },
    /// Train and score one model per setting of an ablation axis.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// groups, pooling or stage.
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation dataset root; the training set when omitted.
        #[arg(long)]
        test: Option<PathBuf>,
    },
}

/// Overrides of the run configuration shared by the model commands.
#[derive(Args)]
struct RunArgs {
    /// Run configuration file; the flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total training epochs, split between warm-up and joint training in
    /// the configured ratio.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    pooling: Option<Pooling>,
    #[arg(long)]
    stage: Option<Stage>,
    #[arg(long)]
    iou_thresh: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(total) = self.epochs {
            let configured = cfg.warmup_epochs + cfg.epochs;
            let warmup = if configured == 0 { 0 } else { (total * cfg.warmup_epochs + configured / 2) / configured };
            cfg.warmup_epochs = warmup;
            cfg.epochs = total - warmup;
        }
        if let Some(groups) = self.groups {
            cfg.groups = groups;
        }
        if let Some(pooling) = self.pooling {
            cfg.pooling = pooling;
        }
        if let Some(stage) = self.stage {
            cfg.stage = stage;
        }
        if let Some(t) = self.iou_thresh {
            cfg.iou_thresh = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dataset root: the flag, then the configuration, then the environment.
fn dataset_root(flag: Option<&Path>, configured: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag.or(configured) {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(DATA_ENV) {
        Some(p) => Ok(PathBuf::from(p)),
        None => bail!(nasklab::Error::Config(format!("no dataset given; pass --data or set {DATA_ENV}"))),
    }
}

fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    synth::read_dataset(root).with_context(|| format!("reading dataset {}", root.display()))
}

/// Expands directories (and dataset roots) into their PNG files.
fn image_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if !input.is_dir() {
            out.push(input.clone());
            continue;
        }
        let dir = if input.join("images").is_dir() { input.join("images") } else { input.clone() };
        let mut found: Vec<PathBuf> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        found.retain(|p| p.extension().is_some_and(|e| e == "png"));
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn cmd_synth(spec: Option<&Path>, count: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = match spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<SynthSpec>(&text)
                .map_err(|e| nasklab::Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    synth::write_dataset(&spec, count, out)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn cmd_train(cfg: RunConfig, data: Option<&Path>) -> Result<()> {
    let root = dataset_root(data, cfg.train_dir.as_deref())?;
    let samples = load_dataset(&root)?;
    let cfg = RunConfig {
        train_dir: Some(root),
        ..cfg
    };
    cfg.save_to_dir(&cfg.out_dir)?;
    let trained = pipeline::train(&samples, &cfg.model_config(), &cfg.schedule(), Some(&cfg.out_dir))?;
    match trained.log.last() {
        Some(r) => println!("{} steps, final loss {:.4}", trained.log.len(), r.total),
        None => println!("0 steps"),
    }
    println!("checkpoint: {}", cfg.out_dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn cmd_detect(cfg: RunConfig, checkpoint: &Path, images: &[PathBuf]) -> Result<()> {
    let mut model = pipeline::load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    // thresholds and the stage layout are inference-time settings
    model.config.stage = cfg.stage;
    model.config.pooling = cfg.pooling;
    model.config.t_tr = cfg.t_tr;
    model.config.t_tcl = cfg.t_tcl;
    let out = &cfg.out_dir;
    RunConfig::from_parts(&model.config, &cfg.schedule()).save_to_dir(out)?;
    let mut failures = 0;
    for path in image_paths(images)? {
        let image = synth::read_image(&path).with_context(|| format!("reading {}", path.display()))?;
        let result = model.detect(&image)?;
        failures += result.failures;
        let stem = path.file_stem().context("image path without a file name")?;
        let dest = out.join(Path::new(stem).with_extension("txt"));
        eval::write_detections(&dest, &result.detections)?;
        println!("{}: {} detections", path.display(), result.detections.len());
    }
    if failures > 0 {
        log::warn!("{failures} text regions could not be decoded");
    }
    Ok(())
}

fn cmd_eval(cfg: RunConfig, preds: &Path, gts: &Path) -> Result<()> {
    let gt_dir = if gts.join("gt").is_dir() { gts.join("gt") } else { gts.to_path_buf() };
    let mut names: Vec<PathBuf> = fs::read_dir(&gt_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| p.extension().is_some_and(|e| e == "txt"));
    names.sort();
    let mut per_image = Vec::with_capacity(names.len());
    for gt_path in names {
        let gt = synth::read_polygons(&gt_path)?;
        let pred_path = preds.join(gt_path.file_name().expect("file name"));
        let dets = if pred_path.exists() { eval::read_detections(&pred_path)? } else { Vec::new() };
        per_image.push(eval::evaluate(&dets, &gt, cfg.iou_thresh)?);
    }
    let result = MatchResult::merge(&per_image);
    println!("R={:.3} P={:.3} H={:.3}", result.recall, result.precision, result.hmean);
    if let Some(out) = cfg_out(&cfg) {
        cfg.save_to_dir(out)?;
        let row = TableRow {
            setting: "eval".into(),
            result,
            fps: f64::NAN,
        };
        fs::write(out.join("results.tsv"), format_table(&[row]))?;
    }
    Ok(())
}

/// Output directory if the user asked for one; evaluation prints by default.
fn cfg_out(cfg: &RunConfig) -> Option<&Path> {
    (cfg.out_dir != RunConfig::default().out_dir).then_some(cfg.out_dir.as_path())
}

fn cmd_ablate(cfg: RunConfig, axis: Axis, data: Option<&Path>, test: Option<&Path>) -> Result<()> {
    let root = dataset_root(data, cfg.train_dir.as_deref())?;
    let train_set = load_dataset(&root)?;
    let test_root = test.map(Path::to_path_buf).or_else(|| cfg.test_dir.clone());
    let test_set = match &test_root {
        Some(t) => load_dataset(t)?,
        None => train_set.clone(),
    };
    let cfg = RunConfig {
        train_dir: Some(root),
        test_dir: test_root,
        ..cfg
    };
    cfg.save_to_dir(&cfg.out_dir)?;
    let rows = ablation::run(axis, &cfg.model_config(), &cfg.schedule(), &train_set, &test_set, cfg.iou_thresh)?;
    let table = format_table(&rows);
    fs::write(cfg.out_dir.join(format!("ablation_{axis}.tsv")), &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, count, seed, out } => cmd_synth(spec.as_deref(), count, seed, &out),
        Command::Train { run, data } => cmd_train(run.resolve()?, data.as_deref()),
        Command::Detect { run, checkpoint, images } => cmd_detect(run.resolve()?, &checkpoint, &images),
        Command::Eval { run, preds, gts } => cmd_eval(run.resolve()?, &preds, &gts),
        Command::Ablate { run, axis, data, test } => cmd_ablate(run.resolve()?, axis, data.as_deref(), test.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // configuration mistakes are usage errors, like bad flags
            let usage = e.chain().any(|c| matches!(c.downcast_ref(), Some(nasklab::Error::Config(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
