//! Config files, presets, CSV output and partition reports behind the
//! `fedmvr` binary.
//!
//! A config file is flat TOML: one `key = value` per line, no sections.
//! Every key is optional; [`CONFIG_KEYS`] lists the keys with their
//! defaults.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use crate::datagen::{mean_tv_distance, PartitionConfig};
use crate::error::Error;
use crate::harness::{
    load_data, Algorithm, DataSource, ExperimentConfig, Mechanisms, ModelConfig, RoundMetrics,
};
use crate::local_update::LocalHyper;
use crate::nummath::ModelKind;
use crate::server_update::{BetaMode, ServerHyper, Weighting};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "FEDMVR_OUT_DIR";

pub const CSV_HEADER: &str =
    "round,train_loss,train_acc,test_loss,test_acc,grad_norm_sq,mean_lr,participating,floats_sent";

/// Config keys, their defaults and a one-line description.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("algorithm", "\"proposed\"", "proposed, fedavg, fedprox, custom or ablation-1 .. ablation-7"),
    ("rounds", "60", "communication rounds T"),
    ("seed", "1", "master seed for initialization, sampling and batches"),
    ("eval_every", "1", "evaluate every n rounds"),
    ("model", "\"mlp2\"", "mlp2 or logistic"),
    ("hidden", "600", "hidden units of mlp2"),
    ("l2", "1e-4", "l2 penalty on all parameters"),
    ("data", "\"mnist\"", "mnist or synthetic"),
    ("mnist_dir", "\"data/mnist\"", "directory holding the four IDX files (.gz optional)"),
    ("train_limit", "2000", "keep the first n training images, 0 keeps all"),
    ("test_limit", "1000", "keep the first n test images, 0 keeps all"),
    ("synthetic_train", "2000", "synthetic training samples"),
    ("synthetic_test", "500", "synthetic test samples"),
    ("synthetic_dim", "20", "synthetic feature count"),
    ("synthetic_classes", "10", "synthetic class count"),
    ("synthetic_noise", "1.0", "synthetic noise scale around each class centroid"),
    ("clients", "10", "number of clients N"),
    ("participants", "5", "clients sampled per round R"),
    ("alpha", "0.5", "Dirichlet concentration of the label partition"),
    ("partition_seed", "seed", "seed of the partition, defaults to `seed`"),
    ("batch_size", "50", "local minibatch size B"),
    ("epochs", "2", "local epochs E"),
    ("k", "0.1", "adaptive rate numerator"),
    ("w", "1.0", "adaptive rate offset"),
    ("fixed_lr", "0.1", "step size when the adaptive rate is off"),
    ("momentum_beta", "0.1", "weight of the fresh gradient in local EMA momentum"),
    ("fedprox_mu", "0.0", "proximal weight, fedprox uses 0.01 when left at 0"),
    ("adaptive_lr", "true", "custom only: adaptive local rate"),
    ("local_momentum", "true", "custom only: local momentum"),
    ("local_mvr", "true", "custom only: recursive local variance reduction"),
    ("global_mvr", "true", "custom only: server variance-reduced momentum"),
    ("beta_mode", "\"constant\"", "constant or decaying server momentum weight"),
    ("beta0", "0.9", "server momentum weight"),
    ("weighting", "\"uniform\"", "FedAvg aggregation weights: uniform or sample_size"),
];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Config {
        path: String,
        line: Option<usize>,
        message: String,
    },
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    /// 2 for usage errors, 3 for config errors, 4 for failures while
    /// loading data or running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config { .. } => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// The configuration an empty file produces: the desk-scale MNIST setup.
pub fn default_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::default(),
        data: DataSource::Mnist {
            dir: PathBuf::from("data/mnist"),
            train_limit: Some(2000),
            test_limit: Some(1000),
        },
        partition: PartitionConfig {
            n_clients: 10,
            alpha: 0.5,
            seed: 1,
        },
        local: LocalHyper::default(),
        server: ServerHyper {
            n_clients: 10,
            participants: 5,
            ..ServerHyper::default()
        },
        rounds: 60,
        seed: 1,
        eval_every: 1,
        algorithm: Algorithm::Proposed,
    }
}

/// Desk-scale config with the mechanism flags of ablation row `row`;
/// `paper_scale` switches to 100 clients, 80 local epochs and 400 rounds on
/// the full MNIST files.
pub fn preset_ablation(row: usize, paper_scale: bool) -> CliResult<ExperimentConfig> {
    Mechanisms::ablation_row(row).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut cfg = if paper_scale {
        paper_scale_config()
    } else {
        default_config()
    };
    cfg.algorithm = Algorithm::Ablation(row);
    Ok(cfg)
}

pub fn paper_scale_config() -> ExperimentConfig {
    let mut cfg = default_config();
    cfg.data = DataSource::Mnist {
        dir: PathBuf::from("data/mnist"),
        train_limit: None,
        test_limit: None,
    };
    cfg.partition.n_clients = 100;
    cfg.server.n_clients = 100;
    cfg.server.participants = 10;
    cfg.local.epochs = 80;
    cfg.local.batch_size = 50;
    cfg.rounds = 400;
    cfg
}

pub fn parse_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        line: None,
        message: e.to_string(),
    })?;
    parse_config_str(&text, &path.display().to_string())
}

/// Parses config text; `origin` names the source in error messages.
pub fn parse_config_str(text: &str, origin: &str) -> CliResult<ExperimentConfig> {
    let fail = |line: Option<usize>, message: String| CliError::Config {
        path: origin.to_string(),
        line,
        message,
    };
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e.span().map(|s| line_of(text, s.start));
        fail(line, e.message().to_string())
    })?;

    let mut cfg = default_config();
    let mut partition_seed = None;
    let mut data_kind = "mnist".to_string();
    let mut mnist_dir = PathBuf::from("data/mnist");
    let (mut train_limit, mut test_limit) = (Some(2000), Some(1000));
    let (mut syn_train, mut syn_test, mut syn_dim, mut syn_classes, mut syn_noise) =
        (2000, 500, 20, 10, 1.0);

    for (key, value) in &table {
        let line = key_line(text, key);
        let err = |m: String| fail(line, format!("{key}: {m}"));
        let v = Value { value, err: &err };
        match key.as_str() {
            "algorithm" => cfg.algorithm = v.parsed()?,
            "rounds" => cfg.rounds = v.usize()?,
            "seed" => cfg.seed = v.u64()?,
            "eval_every" => cfg.eval_every = v.usize()?,
            "model" => cfg.model.kind = v.parsed()?,
            "hidden" => cfg.model.hidden_dim = v.usize()?,
            "l2" => cfg.model.l2_lambda = v.f64()?,
            "data" => data_kind = v.str()?.to_string(),
            "mnist_dir" => mnist_dir = PathBuf::from(v.str()?),
            "train_limit" => train_limit = Some(v.usize()?).filter(|&n| n > 0),
            "test_limit" => test_limit = Some(v.usize()?).filter(|&n| n > 0),
            "synthetic_train" => syn_train = v.usize()?,
            "synthetic_test" => syn_test = v.usize()?,
            "synthetic_dim" => syn_dim = v.usize()?,
            "synthetic_classes" => syn_classes = v.usize()?,
            "synthetic_noise" => syn_noise = v.f64()?,
            "clients" => {
                cfg.partition.n_clients = v.usize()?;
                cfg.server.n_clients = cfg.partition.n_clients;
            }
            "participants" => cfg.server.participants = v.usize()?,
            "alpha" => cfg.partition.alpha = v.f64()?,
            "partition_seed" => partition_seed = Some(v.u64()?),
            "batch_size" => cfg.local.batch_size = v.usize()?,
            "epochs" => cfg.local.epochs = v.usize()?,
            "k" => cfg.local.k = v.f64()?,
            "w" => cfg.local.w = v.f64()?,
            "fixed_lr" => cfg.local.fixed_lr = v.f64()?,
            "momentum_beta" => cfg.local.local_momentum_beta = v.f64()?,
            "fedprox_mu" => cfg.local.fedprox_mu = v.f64()?,
            "adaptive_lr" => cfg.local.adaptive_lr = v.bool()?,
            "local_momentum" => cfg.local.local_momentum = v.bool()?,
            "local_mvr" => cfg.local.local_mvr = v.bool()?,
            "global_mvr" => cfg.server.global_mvr = v.bool()?,
            "beta_mode" => cfg.server.beta_mode = v.parsed::<BetaMode>()?,
            "beta0" => cfg.server.beta0 = v.f64()?,
            "weighting" => cfg.server.weighting = v.parsed::<Weighting>()?,
            _ => {
                let hint = nearest_key(key)
                    .map(|k| format!(" (did you mean `{k}`?)"))
                    .unwrap_or_default();
                return Err(fail(line, format!("unknown key `{key}`{hint}")));
            }
        }
    }
    cfg.partition.seed = partition_seed.unwrap_or(cfg.seed);
    cfg.data = match data_kind.as_str() {
        "mnist" => DataSource::Mnist {
            dir: mnist_dir,
            train_limit,
            test_limit,
        },
        "synthetic" => DataSource::Synthetic {
            n_train: syn_train,
            n_test: syn_test,
            input_dim: syn_dim,
            num_classes: syn_classes,
            noise: syn_noise,
        },
        other => {
            return Err(fail(
                key_line(text, "data"),
                format!("data: expected \"mnist\" or \"synthetic\" (got {other:?})"),
            ))
        }
    };
    if cfg.model.kind == ModelKind::Logistic {
        cfg.model.hidden_dim = 0;
    }
    validate(&cfg).map_err(|e| fail(None, e.to_string()))?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> crate::Result<()> {
    cfg.validate()?;
    if let DataSource::Synthetic {
        n_train,
        n_test,
        input_dim,
        num_classes,
        noise,
    } = cfg.data
    {
        if n_train == 0 || n_test == 0 || input_dim == 0 || num_classes < 2 {
            return Err(Error::InvalidArgument(
                "synthetic data needs samples in both splits, features and >= 2 classes".into(),
            ));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "synthetic_noise must be finite and >= 0 (got {noise})"
            )));
        }
    }
    if cfg.model.kind == ModelKind::Mlp2 && cfg.model.hidden_dim == 0 {
        return Err(Error::InvalidArgument("mlp2 needs hidden >= 1".into()));
    }
    if !(cfg.model.l2_lambda >= 0.0 && cfg.model.l2_lambda.is_finite()) {
        return Err(Error::InvalidArgument("l2 must be finite and >= 0".into()));
    }
    Ok(())
}

struct Value<'a, F> {
    value: &'a toml::Value,
    err: &'a F,
}

impl<F: Fn(String) -> CliError> Value<'_, F> {
    fn usize(&self) -> CliResult<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| (self.err)(format!("{n} is too large")))
    }

    fn u64(&self) -> CliResult<u64> {
        match self.value {
            toml::Value::Integer(n) if *n >= 0 => Ok(*n as u64),
            other => Err((self.err)(format!("expected a non-negative integer, found {other}"))),
        }
    }

    fn f64(&self) -> CliResult<f64> {
        match self.value {
            toml::Value::Float(x) => Ok(*x),
            toml::Value::Integer(n) => Ok(*n as f64),
            other => Err((self.err)(format!("expected a number, found {other}"))),
        }
    }

    fn bool(&self) -> CliResult<bool> {
        match self.value {
            toml::Value::Boolean(b) => Ok(*b),
            other => Err((self.err)(format!("expected true or false, found {other}"))),
        }
    }

    fn str(&self) -> CliResult<&str> {
        match self.value {
            toml::Value::String(s) => Ok(s),
            other => Err((self.err)(format!("expected a string, found {other}"))),
        }
    }

    fn parsed<T: std::str::FromStr<Err = Error>>(&self) -> CliResult<T> {
        self.str()?.parse().map_err(|e: Error| (self.err)(e.to_string()))
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        let bare = l.strip_prefix(key);
        let quoted = l
            .strip_prefix('"')
            .and_then(|r| r.strip_prefix(key))
            .and_then(|r| r.strip_prefix('"'));
        bare.or(quoted)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

/// Closest known key by edit distance, if any is reasonably close.
pub fn nearest_key(key: &str) -> Option<&'static str> {
    CONFIG_KEYS
        .iter()
        .map(|(k, _, _)| (*k, strsim::normalized_damerau_levenshtein(key, k)))
        .filter(|(_, score)| *score >= 0.5)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

/// Writes `cfg` as config text that parses back to an equal config.
pub fn config_to_toml(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    let q = |s: &str| format!("{s:?}");
    let f = |x: f64| format!("{x:?}");
    put("algorithm", q(&cfg.algorithm.name()));
    put("rounds", cfg.rounds.to_string());
    put("seed", cfg.seed.to_string());
    put("eval_every", cfg.eval_every.to_string());
    put("model", q(cfg.model.kind.as_str()));
    put("hidden", cfg.model.hidden_dim.to_string());
    put("l2", f(cfg.model.l2_lambda));
    match &cfg.data {
        DataSource::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            put("data", q("mnist"));
            put("mnist_dir", q(&dir.to_string_lossy()));
            put("train_limit", train_limit.unwrap_or(0).to_string());
            put("test_limit", test_limit.unwrap_or(0).to_string());
        }
        DataSource::Synthetic {
            n_train,
            n_test,
            input_dim,
            num_classes,
            noise,
        } => {
            put("data", q("synthetic"));
            put("synthetic_train", n_train.to_string());
            put("synthetic_test", n_test.to_string());
            put("synthetic_dim", input_dim.to_string());
            put("synthetic_classes", num_classes.to_string());
            put("synthetic_noise", f(*noise));
        }
    }
    put("clients", cfg.partition.n_clients.to_string());
    put("participants", cfg.server.participants.to_string());
    put("alpha", f(cfg.partition.alpha));
    put("partition_seed", cfg.partition.seed.to_string());
    put("batch_size", cfg.local.batch_size.to_string());
    put("epochs", cfg.local.epochs.to_string());
    put("k", f(cfg.local.k));
    put("w", f(cfg.local.w));
    put("fixed_lr", f(cfg.local.fixed_lr));
    put("momentum_beta", f(cfg.local.local_momentum_beta));
    put("fedprox_mu", f(cfg.local.fedprox_mu));
    put("adaptive_lr", cfg.local.adaptive_lr.to_string());
    put("local_momentum", cfg.local.local_momentum.to_string());
    put("local_mvr", cfg.local.local_mvr.to_string());
    put("global_mvr", cfg.server.global_mvr.to_string());
    put("beta_mode", q(cfg.server.beta_mode.as_str()));
    put("beta0", f(cfg.server.beta0));
    put("weighting", q(cfg.server.weighting.as_str()));
    out
}

/// Writes the metrics CSV; reals carry 17 significant digits.
pub fn write_metrics_csv<W: Write>(metrics: &[RoundMetrics], mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for m in metrics {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
            m.round,
            m.train_loss,
            m.train_acc,
            m.test_loss,
            m.test_acc,
            m.grad_norm_sq,
            m.mean_lr,
            m.participating,
            m.floats_sent
        )?;
    }
    out.flush()
}

pub fn emit_metrics_csv(metrics: &[RoundMetrics], path: &Path) -> crate::Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(metrics, io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`emit_metrics_csv`]. The cumulative step count
/// is not part of the format and comes back as 0.
pub fn read_metrics_csv(path: &Path) -> crate::Result<Vec<RoundMetrics>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, what: &str| {
        Error::InvalidArgument(format!("{}:{line}: {what}", path.display()))
    };
    let mut rows = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line != CSV_HEADER {
                return Err(bad(1, "unexpected header"));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(i + 1, "expected 9 fields"));
        }
        let real = |j: usize| f[j].parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        let int = |j: usize| f[j].parse::<usize>().map_err(|_| bad(i + 1, "bad integer"));
        rows.push(RoundMetrics {
            round: int(0)?,
            train_loss: real(1)?,
            train_acc: real(2)?,
            test_loss: real(3)?,
            test_acc: real(4)?,
            grad_norm_sq: real(5)?,
            mean_lr: real(6)?,
            participating: int(7)?,
            floats_sent: int(8)?,
            cumulative_local_steps: 0,
        });
    }
    Ok(rows)
}

/// Per-client sample counts and class histograms plus the mean
/// total-variation distance between client and global label distributions.
pub fn partition_stats(cfg: &ExperimentConfig) -> crate::Result<String> {
    cfg.partition.validate()?;
    let (train, _) = load_data(&cfg.data, cfg.seed)?;
    let shards = crate::datagen::dirichlet_partition(&train, &cfg.partition)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "clients {}  alpha {}  seed {}  samples {}",
        cfg.partition.n_clients,
        cfg.partition.alpha,
        cfg.partition.seed,
        train.len()
    );
    let _ = writeln!(out, "client  samples  class counts");
    for shard in &shards {
        let counts: Vec<String> = shard
            .class_counts(&train)
            .iter()
            .map(|c| c.to_string())
            .collect();
        let _ = writeln!(
            out,
            "{:>6}  {:>7}  {}",
            shard.client_id,
            shard.sample_count(),
            counts.join(" ")
        );
    }
    let global: Vec<String> = train.class_counts().iter().map(|c| c.to_string()).collect();
    let _ = writeln!(out, "{:>6}  {:>7}  {}", "all", train.len(), global.join(" "));
    let _ = writeln!(out, "mean TV distance {:.6}", mean_tv_distance(&train, &shards));
    Ok(out)
}

/// Directory for output files: the flag, then [`OUT_DIR_ENV`], then the
/// current directory.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// One-line summary of the effective settings.
pub fn describe(cfg: &ExperimentConfig) -> String {
    let (local, server) = match cfg.effective_hypers() {
        Ok(h) => h,
        Err(e) => return e.to_string(),
    };
    format!(
        "{} | {} | adaptive {} momentum {} local-vr {} global-vr {} | N={} R={} B={} E={} T={}",
        cfg.algorithm.name(),
        cfg.model.kind.as_str(),
        local.adaptive_lr,
        local.local_momentum,
        local.local_mvr,
        server.global_mvr,
        server.n_clients,
        server.participants,
        local.batch_size,
        local.epochs,
        cfg.rounds
    )
}
