//! Trains each method preset on the same corpus and prints linear-probe
//! accuracy per downstream task.
//!
//! ```text
//! cargo run --release --example compare_methods -- --seeds 3 --config configs/desk.toml
//! ```

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::Parser;
use vivi_core::config::ExperimentConfig;
use vivi_core::eval::{build_downstream_tasks, transfer_evaluate};
use vivi_core::trainer::{train, Method};

#[derive(Parser)]
struct Args {
    /// Number of training seeds per method, starting at `--first-seed`.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "override")]
    overrides: Vec<String>,
}

fn main() -> vivi_core::Result<()> {
    let args = Args::parse();
    let cfg = ExperimentConfig::load(args.config.as_deref(), &args.overrides)?;
    let corpus = Arc::new(cfg.corpus()?);
    let tasks = build_downstream_tasks(&cfg.heldout()?, &cfg.eval, cfg.seed)?;
    let t0 = Instant::now();
    for m in Method::ALL {
        let tc = m.configure(&cfg.train);
        for seed in args.first_seed..args.first_seed + args.seeds {
            let (model, _) = train(&tc, seed, corpus.clone(), None)?;
            let r = transfer_evaluate(&model, &tasks, &cfg.eval, seed, &mut |_| {})?;
            let mean = r.iter().map(|t| t.median).sum::<f64>() / r.len() as f64;
            let cols: Vec<String> = r.iter().map(|t| format!("{} {:.3}", t.name, t.median)).collect();
            println!(
                "{:<15} seed {seed} | {} | mean {mean:.4} | {:.0}s",
                m.name(),
                cols.join(" "),
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
