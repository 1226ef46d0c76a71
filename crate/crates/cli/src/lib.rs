//! Command-line driver: data generation, base training, incremental
//! training, evaluation, the ablation table and the gradient suite.
//!
//! Settings resolve in three layers: built-in defaults, then the JSON file
//! given with `--config`, then command-line flags. Progress and the resolved
//! configuration go to stderr; results are written to files under `--out`
//! (data and checkpoints default to `<out>/data` and `<out>/checkpoints`).
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tridet::detector::{load_checkpoint, param_hash, save_checkpoint};
use tridet::eval::{ablation_variants, evaluate_model, run_experiment, EvalOptions, Protocol};
use tridet::gradsuite::{run_suite, SuiteEntry};
use tridet::synthdata::{
    classes_by_id, generate_cooccurring, generate_dataset, IMAGE_SIZE, incremental_subset, load_dataset, save_dataset, Scene,
};
use tridet::trainer::{train_base, train_incremental, write_epoch_log, LossSwitches, Monitor, TrainConfig};
use tridet::{DetectorConfig, DetectorModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out: PathBuf,
    /// Defaults to `<out>/data`.
    pub data_dir: Option<PathBuf>,
    /// Defaults to `<out>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
    pub old_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub base_images: usize,
    pub incremental_images: usize,
    pub test_images: usize,
    /// Probability that an incremental scene also shows old-class objects.
    pub cooccurrence: f64,
    /// Base scenes use this seed, incremental scenes `+2`, test scenes `+3`.
    pub data_seed: u64,
    pub detector: DetectorConfig,
    pub base: TrainConfig,
    pub incremental: TrainConfig,
    /// Seeds of the ablation runs.
    pub seeds: Vec<u64>,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            data_dir: None,
            checkpoint_dir: None,
            old_classes: vec![1, 2, 3],
            new_classes: vec![4],
            base_images: 200,
            incremental_images: 100,
            test_images: 100,
            cooccurrence: 0.5,
            data_seed: 1,
            detector: DetectorConfig::default(),
            base: TrainConfig::base(),
            incremental: TrainConfig::incremental(),
            seeds: vec![0, 1, 2],
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.out.join("checkpoints"))
    }

    /// Old classes must be `1..=A` and new classes `A+1..=A+B`, matching the
    /// contiguous logit layout of the incremental model.
    pub fn validate(&self) -> anyhow::Result<()> {
        let a = self.old_classes.len();
        let b = self.new_classes.len();
        if a == 0 || b == 0 {
            bail!("need at least one old and one new class");
        }
        if self.old_classes != (1..=a).collect::<Vec<_>>() || self.new_classes != (a + 1..=a + b).collect::<Vec<_>>() {
            bail!(
                "classes must be contiguous: old 1..={a}, new {}..={}; got old {:?}, new {:?}",
                a + 1,
                a + b,
                self.old_classes,
                self.new_classes
            );
        }
        if self.detector.image_size != IMAGE_SIZE {
            bail!("detector image_size must be {IMAGE_SIZE} to match the generated scenes");
        }
        if !(0.0..=1.0).contains(&self.cooccurrence) {
            bail!("cooccurrence must lie in [0, 1], got {}", self.cooccurrence);
        }
        self.base.validate()?;
        self.incremental.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl From<Toggle> for bool {
    fn from(t: Toggle) -> bool {
        t == Toggle::On
    }
}

#[derive(Debug, Parser)]
#[command(name = "tridet", about = "Incremental object detection with old, incremental and residual models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for training; for `ablate`, replaces the seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long = "d-fea", global = true, value_enum)]
    pub d_fea: Option<Toggle>,
    #[arg(long = "d-res", global = true, value_enum)]
    pub d_res: Option<Toggle>,
    #[arg(long = "d-cls", global = true, value_enum)]
    pub d_cls: Option<Toggle>,
    #[arg(long = "two-threshold", global = true, value_enum)]
    pub two_threshold: Option<Toggle>,
    #[arg(long = "theta-low", global = true)]
    pub theta_low: Option<f64>,
    #[arg(long = "theta-high", global = true)]
    pub theta_high: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate base, incremental and test scenes.
    GenData,
    /// Train the old model on the base scenes.
    TrainBase,
    /// Train the incremental model on new-class annotations only, no distillation.
    Finetune,
    /// Train the triple network.
    Incremental,
    /// Evaluate a checkpoint on the test scenes.
    Eval {
        /// Checkpoint directory; defaults to the incremental model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the loss-component and threshold ablation.
    Ablate,
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
}

/// Applies `--config` and the override flags on top of the defaults.
pub fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.base.seed = seed;
        cfg.incremental.seed = seed;
        cfg.seeds = vec![seed];
    }
    let sw = &mut cfg.incremental.switches;
    for (flag, field) in [
        (cli.d_fea, &mut sw.d_fea),
        (cli.d_res, &mut sw.d_res),
        (cli.d_cls, &mut sw.d_cls),
        (cli.two_threshold, &mut sw.two_threshold),
    ] {
        if let Some(t) = flag {
            *field = t.into();
        }
    }
    if let Some(v) = cli.theta_low {
        cfg.incremental.thresholds.theta_low = v;
    }
    if let Some(v) = cli.theta_high {
        cfg.incremental.thresholds.theta_high = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 1;
        }
    };
    match execute(&cli.command, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(dir: &Path) -> anyhow::Result<Vec<Scene>> {
    load_dataset(dir).with_context(|| format!("loading scenes from {}; run gen-data first", dir.display()))
}

fn load_model(dir: &Path) -> anyhow::Result<DetectorModel> {
    load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn execute(command: &Command, cfg: &RunConfig) -> anyhow::Result<()> {
    eprintln!("command: {command:?}");
    eprintln!("config: {}", serde_json::to_string(cfg)?);
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let data = cfg.data_dir();
    let ckpt = cfg.checkpoint_dir();
    let (old, new) = (&cfg.old_classes, &cfg.new_classes);
    match command {
        Command::GenData => {
            eprintln!("seed: {}", cfg.data_seed);
            let old_defs = classes_by_id(old)?;
            let new_defs = classes_by_id(new)?;
            let all_defs: Vec<_> = old_defs.iter().chain(&new_defs).copied().collect();
            let s = cfg.data_seed;
            let base = generate_dataset(&old_defs, cfg.base_images, s)?;
            let inc = generate_cooccurring(&new_defs, &old_defs, cfg.incremental_images, cfg.cooccurrence, s + 2)?;
            let inc = incremental_subset(&inc, new);
            let test = generate_dataset(&all_defs, cfg.test_images, s + 3)?;
            for (name, scenes) in [("base", &base), ("incremental", &inc), ("test", &test)] {
                save_dataset(scenes, &data.join(name))?;
                eprintln!("wrote {} {name} scenes", scenes.len());
            }
        }
        Command::TrainBase => {
            eprintln!("seed: {}", cfg.base.seed);
            let base = load(&data.join("base"))?;
            let test = old_only(&load(&data.join("test"))?, old.len());
            let mon = Monitor {
                scenes: &test,
                old,
                new: &[],
            };
            let (om, log) = train_base(&base, old.len(), cfg.detector.clone(), &cfg.base, Some(&mon))?;
            report_epochs(&log);
            save_checkpoint(&om, &ckpt.join("om"))?;
            write_epoch_log(&log, &cfg.out.join("base_log.csv"))?;
            eprintln!("old model hash {}", param_hash(&om));
        }
        Command::Finetune | Command::Incremental => {
            let finetune = matches!(command, Command::Finetune);
            let mut tc = cfg.incremental.clone();
            if finetune {
                tc.switches = LossSwitches::NONE;
            }
            eprintln!("seed: {}", tc.seed);
            let om = load_model(&ckpt.join("om"))?;
            if om.num_classes != old.len() {
                bail!("old model has {} classes, config lists {} old classes", om.num_classes, old.len());
            }
            let hash = param_hash(&om);
            let inc = load(&data.join("incremental"))?;
            let test = load(&data.join("test"))?;
            let mon = Monitor { scenes: &test, old, new };
            let (triple, log) = train_incremental(om, &inc, &tc, Some(&mon))?;
            if param_hash(triple.om()) != hash {
                bail!("old model changed during training");
            }
            report_epochs(&log);
            let name = if finetune { "finetune" } else { "incremental" };
            save_checkpoint(&triple.im, &ckpt.join(if finetune { "finetune" } else { "im" }))?;
            if !finetune {
                save_checkpoint(&triple.rm, &ckpt.join("rm"))?;
            }
            write_epoch_log(&log, &cfg.out.join(format!("{name}_log.csv")))?;
            let report = evaluate_model(&triple.im, &test, old, new, &cfg.eval)?;
            write_json(&report, &cfg.out.join(format!("{name}_report.json")))?;
            eprintln!(
                "{name}: old mAP {:.4}, new mAP {:.4}, all mAP {:.4}",
                report.map_old, report.map_new, report.map_all
            );
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.clone().unwrap_or_else(|| ckpt.join("im"));
            let model = load_model(&path)?;
            let test = load(&data.join("test"))?;
            let new_eval: Vec<usize> = new.iter().copied().filter(|&c| c <= model.num_classes).collect();
            let report = evaluate_model(&model, &test, old, &new_eval, &cfg.eval)?;
            write_json(&report, &cfg.out.join("eval.json"))?;
            eprintln!(
                "{}: old mAP {:.4}, new mAP {:.4}, all mAP {:.4}",
                path.display(),
                report.map_old,
                report.map_new,
                report.map_all
            );
        }
        Command::Ablate => {
            eprintln!("seeds: {:?}", cfg.seeds);
            let om = load_model(&ckpt.join("om"))?;
            let inc = load(&data.join("incremental"))?;
            let test = load(&data.join("test"))?;
            let protocol = Protocol {
                variants: ablation_variants(),
                seeds: cfg.seeds.clone(),
                train: cfg.incremental.clone(),
                eval: cfg.eval,
            };
            let table = run_experiment(&protocol, &om, &inc, &test, new, |row| match &row.failed {
                Some(e) => eprintln!("{} seed {:?}: failed: {e}", row.variant, row.seed),
                None => eprintln!(
                    "{} seed {:?}: old {:.4} new {:.4} all {:.4} ({:.1}s)",
                    row.variant, row.seed, row.map_old, row.map_new, row.map_all, row.secs
                ),
            });
            let csv = cfg.out.join("ablation.csv");
            fs::write(&csv, table.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
            write_json(&table, &cfg.out.join("ablation.json"))?;
        }
        Command::Gradcheck { instances } => {
            let seed = cfg.incremental.seed;
            eprintln!("seed: {seed}");
            let entries = run_suite(*instances, seed)?;
            for e in &entries {
                eprintln!(
                    "{:<16} instances {:>3}  max rel error {:.3e}  {}",
                    e.name,
                    e.instances,
                    e.max_rel_error,
                    if e.passed() { "ok" } else { "FAIL" }
                );
            }
            write_json(&entries, &cfg.out.join("gradcheck.json"))?;
            let failed: Vec<&SuiteEntry> = entries.iter().filter(|e| !e.passed()).collect();
            if !failed.is_empty() {
                bail!("{} gradient checks exceeded the tolerance", failed.len());
            }
        }
    }
    Ok(())
}

fn report_epochs(log: &[tridet::trainer::EpochRecord]) {
    for r in log {
        eprintln!(
            "epoch {:>3} lr {:.0e} loss {:.4} old mAP {}",
            r.epoch,
            r.lr,
            r.losses.total,
            r.map_old.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
}

/// Test scenes restricted to old-class annotations, for monitoring the old model.
fn old_only(scenes: &[Scene], num_old: usize) -> Vec<Scene> {
    scenes
        .iter()
        .map(|s| Scene {
            image: s.image.clone(),
            annotations: s.annotations.iter().filter(|a| a.class_id <= num_old).copied().collect(),
        })
        .collect()
}
