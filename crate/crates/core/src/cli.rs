//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{self, MethodReport, Phase};
use crate::gradsuite;
use crate::model::ModelBundle;
use crate::pipeline::histogram::{boundary_counts, f1_score};
use crate::pipeline::{detect_shot_boundaries, write_shards};
use crate::trainer::{checkpoint_path, write_metrics, TrainMode, Trainer};

pub const RESOLVED_CONFIG: &str = "resolved-config.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Parser, Debug)]
#[command(name = "vivi", version, about = "Hierarchical self-supervised learning from synthetic video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// `dotted.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Data-pipeline worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus and write it as shards.
    GenData(Common),
    /// Detect shot boundaries from color histograms and score them against ground truth.
    DetectShots(Common),
    /// Train a model.
    Train(Common),
    /// Transfer evaluation of a trained checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to `<out>/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Method name recorded in the report.
        #[arg(long)]
        method: Option<String>,
    },
    /// Finite-difference check of every primitive and loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = gradsuite::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Merge report directories into one report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directories containing `report.json`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::DetectShots(c) | Command::Train(c) => c,
            Command::Eval { common, .. } | Command::Gradcheck { common, .. } | Command::Report { common, .. } => common,
        }
    }
}

/// Parses `argv` and runs the command: 0 on success, 1 on failure, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("train.workers={w}"));
    }
    ExperimentConfig::load(common.config.as_deref(), &overrides)
}

fn snapshot(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(RESOLVED_CONFIG);
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

pub fn execute(command: &Command) -> Result<()> {
    let common = command.common();
    let cfg = resolve(common)?;
    let out = &common.out;
    snapshot(&cfg, out)?;
    match command {
        Command::GenData(_) => gen_data(&cfg, out),
        Command::DetectShots(_) => detect_shots(&cfg, out),
        Command::Train(_) => train(&cfg, out),
        Command::Eval { checkpoint, method, .. } => {
            let ck = checkpoint.clone().unwrap_or_else(|| out.join(FINAL_CHECKPOINT));
            evaluate(&cfg, &ck, method.as_deref(), out)
        }
        Command::Gradcheck { tolerance, .. } => gradcheck(&cfg, *tolerance),
        Command::Report { inputs, .. } => report(inputs, out),
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let corpus = crate::videogen::generate_corpus(&cfg.data, cfg.seed)?;
    let shards = write_shards(&corpus, &out.join("shards"), cfg.storage.videos_per_shard)?;
    println!("wrote {} videos to {} shards in {}", corpus.len(), shards.len(), out.join("shards").display());
    Ok(())
}

fn detect_shots(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let corpus = cfg.corpus()?;
    let path = out.join("boundaries.jsonl");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for v in &corpus.videos {
        let found = detect_shot_boundaries(&v.frames, v.frame_len(), v.channels, cfg.storage.shot_threshold);
        let (a, b, c) = boundary_counts(&found, &v.boundaries);
        (tp, fp, fn_) = (tp + a, fp + b, fn_ + c);
        let line = serde_json::json!({"video_id": v.video_id, "detected": found, "truth": v.boundaries});
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!(
        "videos {} tp {tp} fp {fp} fn {fn_} f1 {:.4}",
        corpus.len(),
        f1_score(tp, fp, fn_)
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let corpus = Arc::new(cfg.corpus()?);
    let labeled = match cfg.train.mode {
        TrainMode::Cotrain => Some(Arc::new(cfg.labeled_set()?)),
        TrainMode::Ssl => None,
    };
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.seed, corpus, labeled)?;
    if cfg.train.checkpoint_every > 0 {
        let dir = out.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        trainer.checkpoint_dir = Some(dir);
    }
    let every = cfg.train.eval_every;
    trainer.run_until(cfg.train.iterations, &mut |_, row| {
        if every > 0 && row.step % every == 0 {
            println!("{row}");
        }
        Ok(())
    })?;
    write_metrics(&trainer.metrics, &out.join(METRICS_CSV))?;
    trainer.checkpoint().save(&out.join(FINAL_CHECKPOINT))?;
    if let Some(last) = trainer.metrics.last() {
        println!("{last}");
    }
    Ok(())
}

fn kebab<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn default_method(cfg: &ExperimentConfig) -> String {
    let t = &cfg.train;
    format!("{}-{}-{}", kebab(&t.frame_loss), kebab(&t.exemplar_source), kebab(&t.video_loss))
}

fn evaluate(cfg: &ExperimentConfig, ck: &Path, method: Option<&str>, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ck)?;
    let (bundle, _) = ModelBundle::<f32>::from_checkpoint(&ck)?;
    let heldout = cfg.heldout()?;
    let tasks = eval::build_downstream_tasks(&heldout, &cfg.eval, cfg.seed)?;
    let results = eval::transfer_evaluate(&bundle, &tasks, &cfg.eval, cfg.seed, &mut |_: Phase| {})?;
    let shape = &tasks[0];
    let hp = results[0].chosen_hp[0];
    let pmk = eval::robustness_eval(&bundle, &heldout, shape, hp, &cfg.eval, cfg.seed)?;
    let mut report = MethodReport::new(method.map_or_else(|| default_method(cfg), str::to_string), results);
    report.robustness = Some(pmk);
    for t in &report.tasks {
        println!("{:<12} {:<10} median {:.4} runs {:?}", t.name, t.kind.name(), t.median, t.runs);
    }
    if let Some(p) = &report.robustness {
        println!(
            "pm-{} shape: anchor {:.4} pm-k {:.4} delta {:.4}",
            cfg.eval.pmk_k, p.anchor_accuracy, p.pmk_accuracy, p.delta
        );
    }
    eval::emit_report(&[report], out)
}

fn gradcheck(cfg: &ExperimentConfig, tolerance: f64) -> Result<()> {
    let reports = gradsuite::run_suite(tolerance, cfg.seed)?;
    println!("{:<28} {:>12} {:>8}  result", "check", "max rel err", "elems");
    for r in &reports {
        println!(
            "{:<28} {:>12.3e} {:>8}  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::invalid(format!("{failed} gradient checks exceeded tolerance {tolerance:e}")));
    }
    Ok(())
}

fn report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut all = Vec::new();
    for dir in inputs {
        all.extend(eval::read_report(dir)?);
    }
    eval::emit_report(&all, out)?;
    for m in &all {
        println!("{:<32} overall {:.4} {:?}", m.method, m.overall_mean, m.category_means);
    }
    Ok(())
}

/// Path of the periodic checkpoint for `step` under a run directory.
pub fn run_checkpoint(out: &Path, step: usize) -> PathBuf {
    checkpoint_path(&out.join("checkpoints"), step)
}
