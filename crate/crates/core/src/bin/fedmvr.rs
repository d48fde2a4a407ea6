use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedmvr::cli::{
    default_config, describe, emit_metrics_csv, parse_config, partition_stats,
    preset_ablation, resolve_out_dir, CliError, CliResult,
};
use fedmvr::harness::{
    median_rounds, prepare, probe_assumptions, rounds_to_threshold, run_prepared, Algorithm,
    ExperimentConfig, MetricField, Prepared, RunRecord,
};

/// Federated learning simulator with momentum-based variance reduction.
#[derive(Parser)]
#[command(name = "fedmvr", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run one experiment and write its metrics CSV.
    Run {
        #[command(flatten)]
        common: Common,
        /// Use ablation row N's preset instead of a config file.
        #[arg(long, value_name = "N", conflicts_with = "config")]
        preset_row: Option<usize>,
        #[arg(long)]
        paper_scale: bool,
    },
    /// Run ablation rows on the preset (or config) scale.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
        rows: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long)]
        paper_scale: bool,
    },
    /// Compare the proposed method against FedAvg and FedProx.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Test accuracy whose first hitting round is reported.
        #[arg(long, default_value_t = 0.85)]
        threshold: f64,
    },
    /// Estimate smoothness, variance and dissimilarity constants.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        pairs: usize,
    },
    /// Report per-client label histograms of the partition.
    PartitionStats {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Flat TOML config; defaults to the desk-scale MNIST setup.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (default: $FEDMVR_OUT_DIR, then the current one).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Overrides the master seed and the partition seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for client training.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl Common {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(path)?,
            None => default_config(),
        };
        if let Some(seed) = self.seed {
            reseed(&mut cfg, seed);
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> CliResult<PathBuf> {
        let dir = resolve_out_dir(self.out.clone());
        std::fs::create_dir_all(&dir).map_err(|e| {
            CliError::Runtime(fedmvr::Error::Io {
                path: dir.clone(),
                source: e,
            })
        })?;
        Ok(dir)
    }
}

fn reseed(cfg: &mut ExperimentConfig, seed: u64) {
    cfg.seed = seed;
    cfg.partition.seed = seed;
}

fn run_one(
    cfg: &ExperimentConfig,
    data: &Prepared,
    threads: usize,
    csv: &Path,
) -> CliResult<RunRecord> {
    let record = run_prepared(cfg, data, threads)?;
    emit_metrics_csv(&record.metrics, csv)?;
    Ok(record)
}

fn summary_line(label: &str, record: &RunRecord, threshold: f64) -> String {
    let last = record.metrics.last();
    let hit = rounds_to_threshold(&record.metrics, MetricField::TestAcc, threshold);
    format!(
        "{label:<24} test_acc {:.4}  train_loss {:.4}  rounds_to_{threshold} {}  floats/round {}",
        last.map_or(f64::NAN, |m| m.test_acc),
        last.map_or(f64::NAN, |m| m.train_loss),
        hit.map_or("never".to_string(), |r| r.to_string()),
        last.map_or(0, |m| m.floats_sent)
    )
}

fn execute(verb: Verb) -> CliResult<()> {
    match verb {
        Verb::Run {
            common,
            preset_row,
            paper_scale,
        } => {
            let mut cfg = match preset_row {
                Some(row) => preset_ablation(row, paper_scale)?,
                None => common.load()?,
            };
            if let (Some(seed), Some(_)) = (common.seed, preset_row) {
                reseed(&mut cfg, seed);
            }
            let out = common.out_dir()?;
            println!("{}", describe(&cfg));
            let data = prepare(&cfg)?;
            let csv = out.join(format!("{}-seed{}.csv", cfg.algorithm.name(), cfg.seed));
            let record = run_one(&cfg, &data, common.threads, &csv)?;
            println!("{}", summary_line(&cfg.algorithm.name(), &record, 0.85));
            println!("wrote {}", csv.display());
        }
        Verb::Ablate {
            common,
            rows,
            seeds,
            paper_scale,
        } => {
            let base = match &common.config {
                Some(path) => parse_config(path)?,
                None => preset_ablation(7, paper_scale)?,
            };
            if let Some(&row) = rows.iter().find(|&&r| !(1..=7).contains(&r)) {
                return Err(CliError::Usage(format!("ablation row must be in 1..=7 (got {row})")));
            }
            let out = common.out_dir()?;
            for &seed in &seeds {
                let mut cfg = base.clone();
                reseed(&mut cfg, seed);
                let data = prepare(&cfg)?;
                for &row in &rows {
                    cfg.algorithm = Algorithm::Ablation(row);
                    let csv = out.join(format!("ablation-row{row}-seed{seed}.csv"));
                    let record = run_one(&cfg, &data, common.threads, &csv)?;
                    println!("{}", summary_line(&format!("row {row} seed {seed}"), &record, 0.85));
                }
            }
        }
        Verb::Compare {
            common,
            seeds,
            threshold,
        } => {
            let base = common.load()?;
            let out = common.out_dir()?;
            let algorithms = [Algorithm::Proposed, Algorithm::FedAvg, Algorithm::FedProx];
            let mut hits = vec![Vec::new(); algorithms.len()];
            for &seed in &seeds {
                let mut cfg = base.clone();
                reseed(&mut cfg, seed);
                let data = prepare(&cfg)?;
                for (i, &alg) in algorithms.iter().enumerate() {
                    cfg.algorithm = alg;
                    let csv = out.join(format!("{}-seed{seed}.csv", alg.name()));
                    let record = run_one(&cfg, &data, common.threads, &csv)?;
                    hits[i].push(rounds_to_threshold(
                        &record.metrics,
                        MetricField::TestAcc,
                        threshold,
                    ));
                    let label = format!("{} seed {seed}", alg.name());
                    println!("{}", summary_line(&label, &record, threshold));
                }
            }
            for (alg, h) in algorithms.iter().zip(&hits) {
                let median = median_rounds(h).map_or("never".to_string(), |r| r.to_string());
                println!("{:<10} median rounds to {threshold}: {median}", alg.name());
            }
        }
        Verb::Probe { common, pairs } => {
            let cfg = common.load()?;
            let data = prepare(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let est = probe_assumptions(
                &data.spec,
                &data.train,
                &data.shards,
                pairs,
                cfg.local.batch_size,
                &mut rng,
            )?;
            println!("L_hat          {:.6e}", est.l_hat);
            println!("sigma_hat      {:.6e}", est.sigma_hat);
            println!("G_hat          {:.6e}", est.g_hat);
            println!("global_var_hat {:.6e}", est.global_var_hat);
        }
        Verb::PartitionStats { common } => {
            let cfg = common.load()?;
            print!("{}", partition_stats(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match execute(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
