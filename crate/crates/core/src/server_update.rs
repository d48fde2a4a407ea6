//! Server side of a round: participant sampling, aggregation of client
//! reports into a global step, and the global model update.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::local_update::ClientReport;
use crate::nummath::{mean, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaMode {
    Constant,
    /// `beta0 * (2 / (t + 1))^(2/3)`, capped at 1.
    Decaying,
}

impl BetaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BetaMode::Constant => "constant",
            BetaMode::Decaying => "decaying",
        }
    }
}

impl std::str::FromStr for BetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(BetaMode::Constant),
            "decaying" => Ok(BetaMode::Decaying),
            other => Err(Error::InvalidArgument(format!(
                "unknown beta mode {other:?} (expected \"constant\" or \"decaying\")"
            ))),
        }
    }
}

/// How client deltas are weighted by the FedAvg-style aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `1/R` per participant.
    Uniform,
    /// `N_i / sum_j N_j` over the participants.
    SampleSize,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::SampleSize => "sample_size",
        }
    }
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "sample_size" => Ok(Weighting::SampleSize),
            other => Err(Error::InvalidArgument(format!(
                "unknown weighting {other:?} (expected \"uniform\" or \"sample_size\")"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerHyper {
    pub n_clients: usize,
    /// R, clients sampled per round.
    pub participants: usize,
    pub beta_mode: BetaMode,
    pub beta0: f64,
    pub global_mvr: bool,
    pub weighting: Weighting,
}

impl Default for ServerHyper {
    fn default() -> Self {
        ServerHyper {
            n_clients: 10,
            participants: 5,
            beta_mode: BetaMode::Constant,
            beta0: 0.9,
            global_mvr: true,
            weighting: Weighting::Uniform,
        }
    }
}

impl ServerHyper {
    pub fn validate(&self) -> Result<()> {
        if self.participants == 0 || self.participants > self.n_clients {
            return Err(Error::InvalidArgument(format!(
                "participants must be in 1..={} (got {})",
                self.n_clients, self.participants
            )));
        }
        if !(self.beta0 > 0.0 && self.beta0 <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta0 must be in (0, 1] (got {})",
                self.beta0
            )));
        }
        Ok(())
    }
}

/// Global model state carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub omega_t: ParamVector,
    pub omega_tm1: ParamVector,
    /// Global momentum from the previous round; `None` before the first
    /// aggregation.
    pub m_hat_prev: Option<ParamVector>,
    /// 1-based index of the round about to run.
    pub round: usize,
}

impl ServerState {
    /// Round 1 has no earlier model, so `omega_0 := omega_1`.
    pub fn new(omega_1: ParamVector) -> Self {
        ServerState {
            omega_tm1: omega_1.clone(),
            omega_t: omega_1,
            m_hat_prev: None,
            round: 1,
        }
    }
}

/// `R` distinct client indices drawn uniformly from `0..N`, sorted.
pub fn sample_participants<R: Rng + ?Sized>(hyper: &ServerHyper, rng: &mut R) -> Result<Vec<usize>> {
    if hyper.participants > hyper.n_clients {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {} of {} clients",
            hyper.participants, hyper.n_clients
        )));
    }
    let mut picked = index::sample(rng, hyper.n_clients, hyper.participants).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn sorted_by_client(reports: &[ClientReport]) -> Result<Vec<&ClientReport>> {
    if reports.is_empty() {
        return Err(Error::Empty("client reports"));
    }
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    Ok(sorted)
}

/// Plain average of the client deltas, used for the first round.
pub fn aggregate_first(reports: &[ClientReport]) -> Result<ParamVector> {
    mean(sorted_by_client(reports)?.into_iter().map(|r| &r.delta))
}

/// Variance-reduced global momentum:
/// `beta * mean(delta) + (1 - beta) * m_hat_prev + (1 - beta) * mean(delta_diff)`.
pub fn aggregate_mvr(
    reports: &[ClientReport],
    m_hat_prev: &ParamVector,
    beta_t: f64,
) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&beta_t) {
        return Err(Error::InvalidArgument(format!(
            "beta must be in [0, 1] (got {beta_t})"
        )));
    }
    let sorted = sorted_by_client(reports)?;
    let mean_delta = mean(sorted.iter().map(|r| &r.delta))?;
    m_hat_prev.check_dim(mean_delta.dim())?;
    let diffs = sorted
        .iter()
        .map(|r| {
            r.delta_diff
                .as_ref()
                .ok_or(Error::MissingDeltaDiff { client: r.client_id })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_diff = mean(diffs)?;
    let keep = 1.0 - beta_t;
    let out = mean_delta
        .iter()
        .zip(m_hat_prev.iter())
        .zip(mean_diff.iter())
        .map(|((d, m), dd)| beta_t * d + keep * m + keep * dd)
        .collect();
    ParamVector::from_vec_checked(out, "aggregate_mvr")
}

/// Weighted average of client deltas; `None` means uniform `1/R`, which is
/// bit-identical to [`aggregate_first`].
pub fn fedavg_aggregate(reports: &[ClientReport], weights: Option<&[f64]>) -> Result<ParamVector> {
    let Some(weights) = weights else {
        return aggregate_first(reports);
    };
    if weights.len() != reports.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} reports",
            weights.len(),
            reports.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "aggregation weights must be nonnegative and sum to 1 (sum {total})"
        )));
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by_key(|&i| reports[i].client_id);
    let dim = reports[order[0]].delta.dim();
    let mut acc = vec![0.0; dim];
    for i in order {
        let r = &reports[i];
        r.delta.check_dim(dim)?;
        for (a, d) in acc.iter_mut().zip(r.delta.iter()) {
            *a += weights[i] * d;
        }
    }
    ParamVector::from_vec_checked(acc, "fedavg_aggregate")
}

/// `omega_{t+1} = omega_t - m_hat`; the old model becomes `omega_tm1`.
pub fn apply_global(state: &ServerState, m_hat: ParamVector) -> Result<ServerState> {
    let next = state.omega_t.sub(&m_hat)?;
    Ok(ServerState {
        omega_tm1: state.omega_t.clone(),
        omega_t: next,
        m_hat_prev: Some(m_hat),
        round: state.round + 1,
    })
}

/// Server momentum weight for round `round` (>= 2).
pub fn beta_schedule(hyper: &ServerHyper, round: usize) -> f64 {
    match hyper.beta_mode {
        BetaMode::Constant => hyper.beta0,
        BetaMode::Decaying => {
            let shape = (2.0 / (round as f64 + 1.0)).powf(2.0 / 3.0);
            (hyper.beta0 * shape).min(1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec()).unwrap()
    }

    fn report(id: usize, delta: &[f64], diff: Option<&[f64]>) -> ClientReport {
        ClientReport {
            client_id: id,
            delta: pv(delta),
            delta_diff: diff.map(pv),
            local_loss: 0.0,
            steps_taken: 1,
            mean_lr: 0.1,
            lr_trace: vec![0.1],
        }
    }

    fn random_reports(seed: u64, n: usize, dim: usize) -> Vec<ClientReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let d: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let dd: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                report(i, &d, Some(&dd))
            })
            .collect()
    }

    #[test]
    fn participants_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = ServerHyper {
            n_clients: 6,
            participants: 6,
            ..ServerHyper::default()
        };
        assert_eq!(sample_participants(&all, &mut rng).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        let one = ServerHyper {
            n_clients: 1,
            participants: 1,
            ..ServerHyper::default()
        };
        assert_eq!(sample_participants(&one, &mut rng).unwrap(), vec![0]);
        let bad = ServerHyper {
            n_clients: 2,
            participants: 3,
            ..ServerHyper::default()
        };
        assert!(sample_participants(&bad, &mut rng).is_err());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn participant_frequency_is_uniform() {
        let h = ServerHyper {
            n_clients: 10,
            participants: 3,
            ..ServerHyper::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 10_000;
        let mut hits = [0usize; 10];
        for _ in 0..draws {
            let s = sample_participants(&h, &mut rng).unwrap();
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            s.into_iter().for_each(|i| hits[i] += 1);
        }
        let sigma = (draws as f64 * 0.3 * 0.7).sqrt();
        for h in hits {
            assert!((h as f64 - 3000.0).abs() <= 3.0 * sigma, "{hits:?}");
        }
    }

    #[test]
    fn first_round_mean() {
        let r = [report(0, &[1.0, 2.0], None), report(1, &[3.0, 4.0], None)];
        assert_eq!(aggregate_first(&r).unwrap().as_slice(), &[2.0, 3.0]);
        assert_eq!(aggregate_first(&r[..1]).unwrap().as_slice(), &[1.0, 2.0]);
        assert!(aggregate_first(&[]).is_err());
        let mixed = [report(0, &[1.0], None), report(1, &[3.0, 4.0], None)];
        assert!(matches!(aggregate_first(&mixed), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn first_round_matches_naive_mean() {
        let reports = random_reports(5, 5, 13);
        let got = aggregate_first(&reports).unwrap();
        for j in 0..13 {
            let naive = reports.iter().map(|r| r.delta[j]).sum::<f64>() / 5.0;
            assert!((got[j] - naive).abs() <= 1e-15);
        }
    }

    #[test]
    fn aggregation_ignores_arrival_order() {
        let reports = random_reports(6, 4, 9);
        let mut shuffled = reports.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let prev = pv(&[0.5; 9]);
        assert_eq!(aggregate_first(&reports).unwrap(), aggregate_first(&shuffled).unwrap());
        assert_eq!(
            aggregate_mvr(&reports, &prev, 0.3).unwrap(),
            aggregate_mvr(&shuffled, &prev, 0.3).unwrap()
        );
    }

    #[test]
    fn mvr_degenerate_betas() {
        let reports = random_reports(7, 3, 6);
        let prev = pv(&[0.2, -0.1, 0.0, 1.0, 2.0, -3.0]);
        assert_eq!(
            aggregate_mvr(&reports, &prev, 1.0).unwrap(),
            aggregate_first(&reports).unwrap()
        );
        let mean_diff = mean(reports.iter().map(|r| r.delta_diff.as_ref().unwrap())).unwrap();
        let b0 = aggregate_mvr(&reports, &prev, 0.0).unwrap();
        assert!(b0.sub(&prev.add(&mean_diff).unwrap()).unwrap().max_abs() <= 1e-15);

        let no_diff: Vec<ClientReport> = reports
            .iter()
            .map(|r| ClientReport {
                delta_diff: Some(ParamVector::zeros(6)),
                ..r.clone()
            })
            .collect();
        let half = aggregate_mvr(&no_diff, &prev, 0.5).unwrap();
        let mean_delta = aggregate_first(&no_diff).unwrap();
        for j in 0..6 {
            assert_eq!(half[j], 0.5 * mean_delta[j] + 0.5 * prev[j]);
        }
    }

    #[test]
    fn mvr_needs_difference_terms() {
        let r = [report(4, &[1.0], None)];
        assert!(matches!(
            aggregate_mvr(&r, &pv(&[0.0]), 0.5),
            Err(Error::MissingDeltaDiff { client: 4 })
        ));
    }

    #[test]
    fn weighted_fedavg() {
        let r = [
            report(0, &[1.0, 0.0], None),
            report(1, &[0.0, 2.0], None),
            report(2, &[4.0, 4.0], None),
        ];
        assert_eq!(fedavg_aggregate(&r, None).unwrap(), aggregate_first(&r).unwrap());
        assert_eq!(
            fedavg_aggregate(&r[..2], Some(&[1.0, 0.0])).unwrap().as_slice(),
            &[1.0, 0.0]
        );
        // N = (10, 30, 60) -> S = (0.1, 0.3, 0.6)
        let s = [0.1, 0.3, 0.6];
        let got = fedavg_aggregate(&r, Some(&s)).unwrap();
        assert!((got[0] - 2.5).abs() < 1e-15);
        assert!((got[1] - 3.0).abs() < 1e-15);
        assert!(fedavg_aggregate(&r, Some(&[0.5, 0.5])).is_err());
        assert!(fedavg_aggregate(&r, Some(&[0.5, 0.5, 0.5])).is_err());
    }

    #[test]
    fn global_update() {
        let s = ServerState::new(pv(&[1.0, -2.0]));
        assert_eq!(s.omega_tm1, s.omega_t);
        let same = apply_global(&s, ParamVector::zeros(2)).unwrap();
        assert_eq!(same.omega_t, s.omega_t);
        assert_eq!(same.round, 2);
        let zero = apply_global(&same, pv(&[1.0, -2.0])).unwrap();
        assert_eq!(zero.omega_t, ParamVector::zeros(2));
        assert_eq!(zero.omega_tm1, same.omega_t);
        assert_eq!(zero.m_hat_prev.unwrap().as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn betas() {
        let c = ServerHyper::default();
        assert_eq!(beta_schedule(&c, 2), 0.9);
        assert_eq!(beta_schedule(&c, 500), 0.9);
        let d = ServerHyper {
            beta_mode: BetaMode::Decaying,
            beta0: 1.0,
            ..c
        };
        assert!((beta_schedule(&d, 2) - 0.763_142_828_4).abs() < 1e-9);
        let mut last = 1.0;
        for t in 2..5000 {
            let b = beta_schedule(&d, t);
            assert!(b > 0.0 && b <= last);
            last = b;
        }
        assert!(last < 0.01);
    }

    proptest! {
        #[test]
        fn mvr_aggregate_is_linear_in_deltas(seed in any::<u64>(), c in -4.0f64..4.0, beta in 0.05f64..1.0) {
            let reports = random_reports(seed, 3, 5);
            let zero_prev = ParamVector::zeros(5);
            let base: Vec<ClientReport> = reports.iter().map(|r| ClientReport {
                delta_diff: Some(ParamVector::zeros(5)), ..r.clone()
            }).collect();
            let scaled: Vec<ClientReport> = base.iter().map(|r| ClientReport {
                delta: r.delta.scale(c).unwrap(), ..r.clone()
            }).collect();
            let a = aggregate_mvr(&base, &zero_prev, beta).unwrap();
            let b = aggregate_mvr(&scaled, &zero_prev, beta).unwrap();
            for j in 0..5 {
                prop_assert!((b[j] - c * a[j]).abs() <= 1e-12 * (1.0 + a[j].abs() * c.abs()));
            }
        }
    }
}
