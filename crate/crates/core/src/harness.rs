//! Experiment orchestration: data preparation, the broadcast / local
//! training / aggregation loop, evaluation and diagnostics.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, round, client)`, so a run is a pure function of its config no
//! matter how many worker threads execute the clients.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::datagen::{
    dirichlet_partition, gen_synthetic, load_mnist_dir, sample_batch, ClientShard, Dataset,
    MnistSplit, PartitionConfig,
};
use crate::error::{Error, Result};
use crate::local_update::{
    first_update, init_client_round, mvr_step, run_local_round, ClientReport, LocalHyper,
};
use crate::nummath::{
    eval_loss, grad, grad_norm_sq, loss_and_grad, LossReport, ModelKind, ModelSpec, ParamVector,
};
use crate::server_update::{
    aggregate_first, aggregate_mvr, apply_global, beta_schedule, fedavg_aggregate,
    sample_participants, ServerHyper, ServerState, Weighting,
};

/// The four switchable mechanisms of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mechanisms {
    pub adaptive_lr: bool,
    pub momentum: bool,
    pub local_mvr: bool,
    pub global_mvr: bool,
}

impl Mechanisms {
    pub const ALL: Mechanisms = Mechanisms {
        adaptive_lr: true,
        momentum: true,
        local_mvr: true,
        global_mvr: true,
    };

    pub const NONE: Mechanisms = Mechanisms {
        adaptive_lr: false,
        momentum: false,
        local_mvr: false,
        global_mvr: false,
    };

    pub const ABLATION_ROWS: usize = 7;

    /// Rows of the ablation table, top to bottom: (adaptive, momentum,
    /// local VR, global VR).
    pub fn ablation_row(row: usize) -> Result<Mechanisms> {
        let (a, m, l, g) = match row {
            1 => (false, false, false, false),
            2 => (false, true, false, false),
            3 => (true, false, false, false),
            4 => (true, true, false, false),
            5 => (false, true, true, false),
            6 => (false, true, true, true),
            7 => (true, true, true, true),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "ablation row must be in 1..=7 (got {row})"
                )))
            }
        };
        Ok(Mechanisms {
            adaptive_lr: a,
            momentum: m,
            local_mvr: l,
            global_mvr: g,
        })
    }

    fn apply(self, local: &mut LocalHyper, server: &mut ServerHyper) {
        local.adaptive_lr = self.adaptive_lr;
        local.local_momentum = self.momentum;
        local.local_mvr = self.local_mvr;
        server.global_mvr = self.global_mvr;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Every mechanism on.
    Proposed,
    FedAvg,
    /// FedAvg with a proximal local term.
    FedProx,
    /// A row of the ablation grid, 1..=7.
    Ablation(usize),
    /// Use the mechanism flags exactly as configured.
    Custom,
}

impl Algorithm {
    pub const FEDPROX_DEFAULT_MU: f64 = 0.01;

    pub fn name(self) -> String {
        match self {
            Algorithm::Proposed => "proposed".into(),
            Algorithm::FedAvg => "fedavg".into(),
            Algorithm::FedProx => "fedprox".into(),
            Algorithm::Ablation(r) => format!("ablation-{r}"),
            Algorithm::Custom => "custom".into(),
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Algorithm::Proposed),
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedprox" => Ok(Algorithm::FedProx),
            "custom" => Ok(Algorithm::Custom),
            other => {
                let row = other
                    .strip_prefix("ablation-")
                    .and_then(|r| r.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "unknown algorithm {other:?} (expected proposed, fedavg, fedprox, \
                             custom or ablation-1..ablation-7)"
                        ))
                    })?;
                Mechanisms::ablation_row(row)?;
                Ok(Algorithm::Ablation(row))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// IDX files in `dir`; the limits keep the first `n` samples.
    Mnist {
        dir: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    /// Gaussian blobs; the test split is drawn from the same generator.
    Synthetic {
        n_train: usize,
        n_test: usize,
        input_dim: usize,
        num_classes: usize,
        noise: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub l2_lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Mlp2,
            hidden_dim: ModelSpec::DEFAULT_HIDDEN,
            l2_lambda: ModelSpec::DEFAULT_L2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    pub partition: PartitionConfig,
    pub local: LocalHyper,
    pub server: ServerHyper,
    pub rounds: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub algorithm: Algorithm,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let server = ServerHyper::default();
        ExperimentConfig {
            model: ModelConfig::default(),
            data: DataSource::Synthetic {
                n_train: 2000,
                n_test: 500,
                input_dim: 20,
                num_classes: 10,
                noise: 1.0,
            },
            partition: PartitionConfig {
                n_clients: server.n_clients,
                alpha: 0.5,
                seed: 1,
            },
            local: LocalHyper::default(),
            server,
            rounds: 60,
            seed: 1,
            eval_every: 1,
            algorithm: Algorithm::Proposed,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "rounds and eval_every must be >= 1".into(),
            ));
        }
        if self.partition.n_clients != self.server.n_clients {
            return Err(Error::InvalidArgument(format!(
                "partition has {} clients but the server expects {}",
                self.partition.n_clients, self.server.n_clients
            )));
        }
        self.partition.validate()?;
        self.local.validate()?;
        self.server.validate()?;
        if let Algorithm::Ablation(row) = self.algorithm {
            Mechanisms::ablation_row(row)?;
        }
        Ok(())
    }

    /// Client and server settings after the algorithm's mechanism flags are
    /// applied.
    pub fn effective_hypers(&self) -> Result<(LocalHyper, ServerHyper)> {
        let mut local = self.local;
        let mut server = self.server;
        match self.algorithm {
            Algorithm::Custom => return Ok((local, server)),
            Algorithm::Proposed => Mechanisms::ALL.apply(&mut local, &mut server),
            Algorithm::FedAvg => Mechanisms::NONE.apply(&mut local, &mut server),
            Algorithm::Ablation(row) => {
                Mechanisms::ablation_row(row)?.apply(&mut local, &mut server)
            }
            Algorithm::FedProx => {
                Mechanisms::NONE.apply(&mut local, &mut server);
                if local.fedprox_mu == 0.0 {
                    local.fedprox_mu = Algorithm::FEDPROX_DEFAULT_MU;
                }
                return Ok((local, server));
            }
        }
        local.fedprox_mu = 0.0;
        Ok((local, server))
    }
}

/// Loaded data, its partition and the model shape that fits it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
}

/// Loads (or generates) the data named by the config and partitions it.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (train, test) = load_data(&cfg.data, cfg.seed)?;
    let shards = dirichlet_partition(&train, &cfg.partition)?;
    let spec = ModelSpec {
        kind: cfg.model.kind,
        input_dim: train.n_features(),
        hidden_dim: cfg.model.hidden_dim,
        num_classes: train.num_classes(),
        l2_lambda: cfg.model.l2_lambda,
    };
    spec.validate()?;
    Ok(Prepared {
        spec,
        train,
        test,
        shards,
    })
}

pub fn load_data(source: &DataSource, seed: u64) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            let mut train = load_mnist_dir(dir, MnistSplit::Train)?;
            let mut test = load_mnist_dir(dir, MnistSplit::Test)?;
            if let Some(n) = train_limit {
                train = train.take_first(*n)?;
            }
            if let Some(n) = test_limit {
                test = test.take_first(*n)?;
            }
            Ok((train, test))
        }
        DataSource::Synthetic {
            n_train,
            n_test,
            input_dim,
            num_classes,
            noise,
        } => {
            let all = gen_synthetic(seed, n_train + n_test, *input_dim, *num_classes, *noise)?;
            all.split_at(*n_train)
        }
    }
}

/// One evaluated round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Squared norm of the full training-objective gradient at the updated
    /// global model.
    pub grad_norm_sq: f64,
    pub mean_lr: f64,
    pub participating: usize,
    /// Uplink reals sent this round.
    pub floats_sent: usize,
    /// Local updates performed by all clients so far.
    pub cumulative_local_steps: usize,
}

/// Step sizes one client used during one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LrTrace {
    pub round: usize,
    pub client: usize,
    pub lrs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub metrics: Vec<RoundMetrics>,
    pub lr_traces: Vec<LrTrace>,
    pub final_params: ParamVector,
}

const SERVER_STREAM: u64 = u64::MAX;
const INIT_STREAM: u64 = u64::MAX - 1;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the random stream owned by `client` in `round`.
pub fn stream_seed(seed: u64, round: usize, client: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ round as u64) ^ client)
}

pub fn client_rng(seed: u64, round: usize, client: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, round, client as u64))
}

pub fn server_rng(seed: u64, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, round, SERVER_STREAM))
}

/// Initial global model for a run.
pub fn initial_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    spec.init_params(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, 0, INIT_STREAM)))
}

/// Full-dataset loss and accuracy.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, ds: &Dataset) -> Result<LossReport> {
    eval_loss(spec, params, ds.as_batch())
}

/// Loads data and runs the experiment on one thread.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared, 1)
}

/// Runs `cfg.rounds` rounds on already prepared data, executing each round's
/// clients on up to `threads` workers.
pub fn run_prepared(cfg: &ExperimentConfig, data: &Prepared, threads: usize) -> Result<RunRecord> {
    cfg.validate()?;
    if data.shards.len() != cfg.server.n_clients {
        return Err(Error::InvalidArgument(format!(
            "{} shards for {} clients",
            data.shards.len(),
            cfg.server.n_clients
        )));
    }
    let (local, server) = cfg.effective_hypers()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let spec = &data.spec;
    let mut state = ServerState::new(initial_params(spec, cfg.seed));
    let mut metrics = Vec::new();
    let mut lr_traces = Vec::new();
    let mut total_steps = 0;

    for round in 1..=cfg.rounds {
        let (next, reports) = run_round(cfg.seed, round, &state, data, &local, &server, &pool)
            .map_err(|e| e.in_round(round))?;
        state = next;
        total_steps += reports.iter().map(|r| r.steps_taken).sum::<usize>();
        for r in &reports {
            lr_traces.push(LrTrace {
                round,
                client: r.client_id,
                lrs: r.lr_trace.clone(),
            });
        }
        if round % cfg.eval_every == 0 {
            let (train, full_grad) = loss_and_grad(spec, &state.omega_t, data.train.as_batch())
                .map_err(|e| e.in_round(round))?;
            let test = evaluate(spec, &state.omega_t, &data.test).map_err(|e| e.in_round(round))?;
            metrics.push(RoundMetrics {
                round,
                train_loss: train.loss,
                train_acc: train.accuracy,
                test_loss: test.loss,
                test_acc: test.accuracy,
                grad_norm_sq: grad_norm_sq(&full_grad),
                mean_lr: reports.iter().map(|r| r.mean_lr).sum::<f64>() / reports.len() as f64,
                participating: reports.len(),
                floats_sent: reports.iter().map(ClientReport::floats).sum(),
                cumulative_local_steps: total_steps,
            });
        }
    }
    Ok(RunRecord {
        metrics,
        lr_traces,
        final_params: state.omega_t,
    })
}

/// One broadcast / train / aggregate / update cycle. Reports come back
/// sorted by client id.
pub fn run_round(
    seed: u64,
    round: usize,
    state: &ServerState,
    data: &Prepared,
    local: &LocalHyper,
    server: &ServerHyper,
    pool: &rayon::ThreadPool,
) -> Result<(ServerState, Vec<ClientReport>)> {
    let participants = sample_participants(server, &mut server_rng(seed, round))?;
    let omega_tm1 = server.global_mvr.then_some(&state.omega_tm1);
    let train_client = |&client: &usize| {
        run_local_round(
            &state.omega_t,
            omega_tm1,
            &data.spec,
            &data.train,
            &data.shards[client],
            local,
            &mut client_rng(seed, round, client),
        )
    };
    let reports: Vec<ClientReport> = pool.install(|| {
        participants
            .par_iter()
            .map(train_client)
            .collect::<Result<Vec<_>>>()
    })?;

    let m_hat = if server.global_mvr {
        match &state.m_hat_prev {
            None => aggregate_first(&reports)?,
            Some(prev) => aggregate_mvr(&reports, prev, beta_schedule(server, state.round))?,
        }
    } else {
        match server.weighting {
            Weighting::Uniform => fedavg_aggregate(&reports, None)?,
            Weighting::SampleSize => {
                let counts: Vec<f64> = reports
                    .iter()
                    .map(|r| data.shards[r.client_id].sample_count() as f64)
                    .collect();
                let total: f64 = counts.iter().sum();
                let weights: Vec<f64> = counts.iter().map(|c| c / total).collect();
                fedavg_aggregate(&reports, Some(&weights))?
            }
        }
    };
    Ok((apply_global(state, m_hat)?, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricField {
    GradNormSq,
    TestAcc,
}

/// First round whose `grad_norm_sq` is at or below `threshold`, or whose
/// `test_acc` is at or above it.
pub fn rounds_to_threshold(
    metrics: &[RoundMetrics],
    field: MetricField,
    threshold: f64,
) -> Option<usize> {
    metrics
        .iter()
        .find(|m| match field {
            MetricField::GradNormSq => m.grad_norm_sq <= threshold,
            MetricField::TestAcc => m.test_acc >= threshold,
        })
        .map(|m| m.round)
}

/// Median of hitting times where `None` (never reached) ranks above every
/// round; even counts take the lower middle.
pub fn median_rounds(hits: &[Option<usize>]) -> Option<usize> {
    if hits.is_empty() {
        return None;
    }
    let mut sorted = hits.to_vec();
    sorted.sort_by_key(|h| h.unwrap_or(usize::MAX));
    sorted[(sorted.len() - 1) / 2]
}

/// Empirical stand-ins for the smoothness, local-variance, gradient-bound
/// and client-dissimilarity constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssumptionEstimate {
    pub l_hat: f64,
    pub sigma_hat: f64,
    pub g_hat: f64,
    pub global_var_hat: f64,
}

/// Minibatches drawn per client and point when estimating local variance.
const PROBE_BATCHES: usize = 8;
/// Pairs per point, each aimed along the previous gradient difference so the
/// ratio climbs toward the largest curvature.
const POWER_STEPS: usize = 10;
const PROBE_RADIUS: f64 = 1e-3;

/// Probes the assumption constants at `n_pairs` random points. Smoothness is
/// read from gradient differences against nearby points.
pub fn probe_assumptions<R: Rng + ?Sized>(
    spec: &ModelSpec,
    ds: &Dataset,
    shards: &[ClientShard],
    n_pairs: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<AssumptionEstimate> {
    if n_pairs == 0 || shards.is_empty() {
        return Err(Error::InvalidArgument(
            "probe needs n_pairs >= 1 and at least one shard".into(),
        ));
    }
    let mut est = AssumptionEstimate {
        l_hat: 0.0,
        sigma_hat: 0.0,
        g_hat: 0.0,
        global_var_hat: 0.0,
    };
    let mut max_var: f64 = 0.0;
    let mut dissimilarity = 0.0;
    for _ in 0..n_pairs {
        let x = spec.init_params(rng);
        let gx = grad(spec, &x, ds.as_batch())?;
        let mut dir: Vec<f64> = (0..x.dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for _ in 0..POWER_STEPS {
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let step = ParamVector::from_vec(dir.iter().map(|v| PROBE_RADIUS * v / norm).collect())?;
            let y = x.add(&step)?;
            let diff = grad(spec, &y, ds.as_batch())?.sub(&gx)?;
            est.l_hat = est.l_hat.max(diff.norm() / step.norm());
            dir = diff.into_vec();
        }

        for shard in shards {
            let full = shard.full_batch(ds)?;
            let local = grad(spec, &x, &full)?;
            dissimilarity += grad_norm_sq(&local.sub(&gx)?);
            let b = batch_size.min(shard.sample_count());
            let mut var = 0.0;
            for _ in 0..PROBE_BATCHES {
                let g = grad(spec, &x, &sample_batch(ds, shard, b, rng)?)?;
                est.g_hat = est.g_hat.max(g.max_abs());
                var += grad_norm_sq(&g.sub(&local)?);
            }
            max_var = max_var.max(var / PROBE_BATCHES as f64);
        }
    }
    est.sigma_hat = max_var.sqrt();
    est.global_var_hat = dissimilarity / (n_pairs * shards.len()) as f64;
    Ok(est)
}

/// Squared error of the recursive estimator against the true local gradient
/// after `steps` local updates, next to the mean squared error of fresh
/// minibatch gradients at the same point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComparison {
    pub estimator_err: f64,
    pub minibatch_var: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn variance_reduction_probe<R: Rng + ?Sized>(
    spec: &ModelSpec,
    ds: &Dataset,
    shard: &ClientShard,
    start: &ParamVector,
    hyper: &LocalHyper,
    steps: usize,
    reference_batches: usize,
    rng: &mut R,
) -> Result<VarianceComparison> {
    let hyper = &LocalHyper {
        batch_size: hyper.batch_size.min(shard.sample_count()),
        ..*hyper
    };
    let mut state = init_client_round(start, None, spec, ds, shard, hyper)?;
    first_update(&mut state, hyper)?;
    for _ in 1..steps {
        mvr_step(&mut state, spec, ds, shard, hyper, rng)?;
    }
    // the latest estimate was formed at the pre-update point
    let point = &state.cur.prev;
    let truth = grad(spec, point, &shard.full_batch(ds)?)?;
    let estimator_err = grad_norm_sq(&state.cur.m.sub(&truth)?);
    let b = hyper.batch_size.min(shard.sample_count());
    let mut total = 0.0;
    for _ in 0..reference_batches {
        let g = grad(spec, point, &sample_batch(ds, shard, b, rng)?)?;
        total += grad_norm_sq(&g.sub(&truth)?);
    }
    Ok(VarianceComparison {
        estimator_err,
        minibatch_var: total / reference_batches.max(1) as f64,
    })
}
