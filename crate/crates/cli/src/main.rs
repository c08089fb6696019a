use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use balfusion::checkpoint;
use balfusion::datagen;
use balfusion::harness::experiments::{missing_csv, sweep_csv, CompareOptions};
use balfusion::harness::{compare, missing_modality_eval, probe_all, sweep_bs_lr, train_on, RunConfig};
use balfusion::metrics;
use balfusion::modulation::Strategy;

#[derive(Parser)]
#[command(name = "balfusion", version, about = "Balanced late-fusion multimodal training")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); the built-in imbalanced example when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed and the synthetic data seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the configuration's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and export it as CSV plus a JSON spec.
    GenData,
    /// Train one model; writes runlog.csv, epochlog.csv, metrics.json and checkpoint.json.
    Train,
    /// Evaluate a checkpoint on the test split; writes metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fit linear probes on a checkpoint's frozen encoders; writes probes.json.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy under randomly missing modalities; writes missing.csv.
    MissingEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid points separated by ';', each a comma list of per-modality probabilities.
        #[arg(long, default_value = "0,0;0.2,0.2;0.5,0.5;1,1")]
        grid: String,
        #[arg(long, default_value_t = 5)]
        corruption_seeds: usize,
    },
    /// Batch-size/learning-rate sweep; writes sweep.csv.
    Sweep {
        /// Cells separated by ',', each `batch_size:lr`.
        #[arg(long, default_value = "32:1e-3,128:1e-3,32:1e-5")]
        grid: String,
        /// Seeds as a comma list or a half-open range `a..b`.
        #[arg(long, default_value = "0..5")]
        seeds: String,
    },
    /// Paired baseline-versus-modulated comparison; writes compare.json.
    Compare {
        #[arg(long, default_value = "none,opm,ogm")]
        strategies: String,
        #[arg(long, default_value = "0..5")]
        seeds: String,
        #[arg(long, default_value_t = 0.2)]
        miss_prob: f64,
        #[arg(long, default_value_t = 5)]
        corruption_seeds: usize,
        /// Also train each modality alone and probe its encoder.
        #[arg(long)]
        solo: bool,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {s}");
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|x| x.trim().parse().with_context(|| format!("bad seed {x:?}")))
        .collect()
}

fn parse_sweep_grid(s: &str) -> Result<Vec<(usize, f64)>> {
    s.split(',')
        .map(|cell| {
            let (b, lr) = cell
                .split_once(':')
                .with_context(|| format!("cell {cell:?} is not batch_size:lr"))?;
            Ok((b.trim().parse()?, lr.trim().parse()?))
        })
        .collect()
}

fn parse_missing_grid(s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';')
        .map(|pt| {
            pt.split(',')
                .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad probability {p:?}")))
                .collect()
        })
        .collect()
}

fn parse_strategies(s: &str) -> Result<Vec<Strategy>> {
    s.split(',').map(|x| Ok(x.trim().parse::<Strategy>()?)).collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::imbalanced_default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = cli.common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    match cli.command {
        Command::GenData => {
            let ds = cfg.load_dataset()?;
            datagen::export(&ds, &out)?;
            println!("wrote {} train / {} test samples to {}", ds.train.len(), ds.test.len(), out.display());
        }
        Command::Train => {
            let ds = cfg.load_dataset()?;
            let run = train_on(&cfg, &ds)?;
            run.log.write(&out)?;
            checkpoint::save(&run.model, &out.join("checkpoint.json"))?;
            write(&out.join("config.toml"), &cfg.to_toml_string()?)?;
            write(&out.join("metrics.json"), &serde_json::to_string_pretty(&run.test_metrics)?)?;
            println!(
                "train accuracy {:.4}, test accuracy {:.4}, mAP {:.4}",
                run.train_accuracy(),
                run.test_metrics.accuracy,
                run.test_metrics.map
            );
            if let Some(reason) = run.diverged {
                bail!("training diverged: {reason}");
            }
        }
        Command::Eval { checkpoint: ckpt } => {
            let model = checkpoint::load(&ckpt)?;
            let ds = cfg.load_dataset()?;
            let report = metrics::evaluate(&model, &ds.test)?;
            write(&out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
            println!("accuracy {:.4}, mAP {:.4}", report.accuracy, report.map);
        }
        Command::Probe { checkpoint: ckpt } => {
            let model = checkpoint::load(&ckpt)?;
            let ds = cfg.load_dataset()?;
            let probes = probe_all(&cfg, &model, &ds, cfg.optimizer.epochs)?;
            write(&out.join("probes.json"), &serde_json::to_string_pretty(&probes)?)?;
            for (m, p) in probes.iter().enumerate() {
                println!("modality {m}: probe accuracy {p:.4}");
            }
        }
        Command::MissingEval { checkpoint: ckpt, grid, corruption_seeds } => {
            let model = checkpoint::load(&ckpt)?;
            let ds = cfg.load_dataset()?;
            let rows = missing_modality_eval(&model, &ds.test, &parse_missing_grid(&grid)?, corruption_seeds, cfg.seed)?;
            let text = missing_csv(&rows);
            write(&out.join("missing.csv"), &text)?;
            print!("{text}");
        }
        Command::Sweep { grid, seeds } => {
            let rows = sweep_bs_lr(&cfg, &parse_sweep_grid(&grid)?, &parse_seeds(&seeds)?)?;
            let text = sweep_csv(&rows);
            write(&out.join("sweep.csv"), &text)?;
            print!("{text}");
        }
        Command::Compare { strategies, seeds, miss_prob, corruption_seeds, solo } => {
            let opts = CompareOptions {
                strategies: parse_strategies(&strategies)?,
                seeds: parse_seeds(&seeds)?,
                miss_prob: Some(miss_prob),
                corruption_seeds,
                solo,
            };
            let report = compare(&cfg, &opts)?;
            write(&out.join("compare.json"), &serde_json::to_string_pretty(&report)?)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}
