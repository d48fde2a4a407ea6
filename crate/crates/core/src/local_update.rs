//! Client-side local training for one communication round.
//!
//! The main rule is a recursive momentum estimator: each step draws one
//! minibatch and corrects the running estimate with the gradient difference
//! between the current and previous iterate on that same batch,
//!
//! ```text
//! m_j = m_{j-1} + (g(w_j; B_j) - g(w_{j-1}; B_j)),   w_{j+1} = w_j - eta_j * m_j
//! ```
//!
//! started from the full local gradient. Two such sequences run in lockstep:
//! one from the current global model and a shadow ("hat") sequence from the
//! previous global model, whose final difference lets the server build a
//! variance-reduced global momentum. The step size is
//! `k / (w + sum of squared stochastic-gradient norms)^(1/3)`.
//!
//! Plain SGD and EMA-momentum local rules, plus an optional proximal term,
//! cover the baselines and ablations.

use rand::Rng;

use crate::datagen::{local_step_count, sample_batch, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::nummath::{axpy, grad_norm_sq, loss_and_grad, Batch, ModelSpec, ParamVector};

/// Client-side hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalHyper {
    /// Learning-rate numerator.
    pub k: f64,
    /// Learning-rate base offset.
    pub w: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adaptive_lr: bool,
    pub local_momentum: bool,
    pub local_mvr: bool,
    /// EMA weight on the fresh gradient, used when momentum is on and the
    /// recursive estimator is off.
    pub local_momentum_beta: f64,
    /// Proximal coefficient; 0 disables the term.
    pub fedprox_mu: f64,
    /// Step size when `adaptive_lr` is off.
    pub fixed_lr: f64,
}

impl Default for LocalHyper {
    fn default() -> Self {
        LocalHyper {
            k: 0.1,
            w: 1.0,
            batch_size: 50,
            epochs: 2,
            adaptive_lr: true,
            local_momentum: true,
            local_mvr: true,
            local_momentum_beta: 0.1,
            fedprox_mu: 0.0,
            fixed_lr: 0.1,
        }
    }
}

/// Which local update rule a [`LocalHyper`] selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalRule {
    Sgd,
    EmaMomentum,
    Mvr,
}

impl LocalHyper {
    pub fn rule(&self) -> LocalRule {
        if self.local_mvr {
            LocalRule::Mvr
        } else if self.local_momentum {
            LocalRule::EmaMomentum
        } else {
            LocalRule::Sgd
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.k > 0.0 && self.k.is_finite()) || !(self.w > 0.0 && self.w.is_finite()) {
            return bad(format!("k and w must be > 0 (got k={}, w={})", self.k, self.w));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.local_momentum_beta) {
            return bad(format!(
                "local_momentum_beta must be in [0, 1) (got {})",
                self.local_momentum_beta
            ));
        }
        if !(self.fedprox_mu >= 0.0 && self.fedprox_mu.is_finite()) {
            return bad(format!("fedprox_mu must be >= 0 (got {})", self.fedprox_mu));
        }
        if !(self.fixed_lr > 0.0 && self.fixed_lr.is_finite()) {
            return bad(format!("fixed_lr must be > 0 (got {})", self.fixed_lr));
        }
        Ok(())
    }
}

/// `k / (w + accum)^(1/3)`, or the fixed rate when adaptation is off.
pub fn adaptive_lr(hyper: &LocalHyper, accum: f64) -> f64 {
    if hyper.adaptive_lr {
        hyper.k / (hyper.w + accum).cbrt()
    } else {
        hyper.fixed_lr
    }
}

/// One parameter trajectory of a local round.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    /// Current iterate.
    pub omega: ParamVector,
    /// Iterate before the most recent update.
    pub prev: ParamVector,
    /// Momentum / gradient estimate used by the most recent update.
    pub m: ParamVector,
    /// Global model this sequence started from; the proximal term pulls
    /// toward it.
    pub anchor: ParamVector,
}

impl Sequence {
    fn start(anchor: &ParamVector, m: ParamVector) -> Self {
        Sequence {
            omega: anchor.clone(),
            prev: anchor.clone(),
            m,
            anchor: anchor.clone(),
        }
    }

    fn advance(&mut self, lr: f64) -> Result<()> {
        let next = axpy(-lr, &self.m, &self.omega)?;
        self.prev = std::mem::replace(&mut self.omega, next);
        Ok(())
    }
}

/// Per-client state for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundState {
    /// Sequence started from the current global model.
    pub cur: Sequence,
    /// Shadow sequence started from the previous global model; absent when
    /// the server does not need the difference term.
    pub hat: Option<Sequence>,
    /// Running sum of squared current-sequence gradient norms.
    pub accum: f64,
    /// Local step index, starting at 1.
    pub step: usize,
    /// Step size used by each parameter update so far.
    pub lr_trace: Vec<f64>,
    loss_sum: f64,
}

impl ClientRoundState {
    pub fn omega_cur(&self) -> &ParamVector {
        &self.cur.omega
    }

    pub fn m_cur(&self) -> &ParamVector {
        &self.cur.m
    }

    pub fn omega_hat(&self) -> Option<&ParamVector> {
        self.hat.as_ref().map(|s| &s.omega)
    }

    pub fn m_hat(&self) -> Option<&ParamVector> {
        self.hat.as_ref().map(|s| &s.m)
    }

    fn sequences_mut(&mut self) -> impl Iterator<Item = &mut Sequence> {
        std::iter::once(&mut self.cur).chain(self.hat.as_mut())
    }

    /// Moves every sequence along its estimate with the step size implied by
    /// the current accumulator.
    fn update(&mut self, hyper: &LocalHyper) -> Result<f64> {
        let lr = adaptive_lr(hyper, self.accum);
        for seq in self.sequences_mut() {
            seq.advance(lr)?;
        }
        self.lr_trace.push(lr);
        Ok(lr)
    }
}

/// Gradient of the local objective on `batch`, plus `mu * (params - anchor)`
/// when the proximal term is on. Returns the batch loss alongside.
fn local_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    anchor: &ParamVector,
    batch: &Batch,
    mu: f64,
) -> Result<(f64, ParamVector)> {
    let (report, g) = loss_and_grad(spec, params, batch)?;
    if mu == 0.0 {
        return Ok((report.loss, g));
    }
    let pull = params.sub(anchor)?;
    Ok((report.loss, axpy(mu, &pull, &g)?))
}

/// Gradient of the client's objective over its whole shard.
pub fn full_local_gradient(
    spec: &ModelSpec,
    ds: &Dataset,
    shard: &ClientShard,
    params: &ParamVector,
) -> Result<ParamVector> {
    Ok(loss_and_grad(spec, params, &shard.full_batch(ds)?)?.1)
}

/// Starts a recursive-momentum round: both sequences begin at their global
/// models with the exact full-shard gradient as their estimate, and the
/// accumulator holds that gradient's squared norm. No parameter moves yet.
pub fn init_client_round(
    omega_t: &ParamVector,
    omega_tm1: Option<&ParamVector>,
    spec: &ModelSpec,
    ds: &Dataset,
    shard: &ClientShard,
    _hyper: &LocalHyper,
) -> Result<ClientRoundState> {
    if shard.sample_count() == 0 {
        return Err(Error::Empty("client shard"));
    }
    if let Some(prev) = omega_tm1 {
        prev.check_dim(omega_t.dim())?;
    }
    let full = shard.full_batch(ds)?;
    let (loss, m_cur) = loss_and_grad(spec, omega_t, &full)?;
    let hat = match omega_tm1 {
        Some(prev) => Some(Sequence::start(prev, loss_and_grad(spec, prev, &full)?.1)),
        None => None,
    };
    let accum = grad_norm_sq(&m_cur);
    Ok(ClientRoundState {
        cur: Sequence::start(omega_t, m_cur),
        hat,
        accum,
        step: 1,
        lr_trace: Vec::new(),
        loss_sum: loss.loss,
    })
}

/// Applies the first update of a recursive-momentum round, using the
/// full-gradient estimates set by [`init_client_round`].
pub fn first_update(state: &mut ClientRoundState, hyper: &LocalHyper) -> Result<f64> {
    state.update(hyper)
}

/// One recursive-momentum local step: draws a batch, corrects each
/// sequence's estimate by `g(omega; B) - g(prev; B)`, grows the accumulator
/// with the current sequence's fresh squared gradient norm and moves both
/// sequences with the resulting step size.
pub fn mvr_step<R: Rng + ?Sized>(
    state: &mut ClientRoundState,
    spec: &ModelSpec,
    ds: &Dataset,
    shard: &ClientShard,
    hyper: &LocalHyper,
    rng: &mut R,
) -> Result<()> {
    let batch = sample_batch(ds, shard, hyper.batch_size, rng)?;
    mvr_step_on(state, spec, &batch, hyper)
}

/// [`mvr_step`] with the batch supplied by the caller.
pub fn mvr_step_on(
    state: &mut ClientRoundState,
    spec: &ModelSpec,
    batch: &Batch,
    hyper: &LocalHyper,
) -> Result<()> {
    let mu = hyper.fedprox_mu;
    let mut fresh_norm_sq = 0.0;
    let mut fresh_loss = 0.0;
    for (idx, seq) in state.sequences_mut().enumerate() {
        let (loss, g_now) = local_grad(spec, &seq.omega, &seq.anchor, batch, mu)?;
        let (_, g_before) = local_grad(spec, &seq.prev, &seq.anchor, batch, mu)?;
        let correction = g_now.sub(&g_before)?;
        seq.m = seq.m.add(&correction)?;
        if idx == 0 {
            fresh_norm_sq = grad_norm_sq(&g_now);
            fresh_loss = loss;
        }
    }
    state.accum += fresh_norm_sq;
    state.loss_sum += fresh_loss;
    state.update(hyper)?;
    state.step += 1;
    Ok(())
}

/// One SGD or EMA-momentum step on both sequences with a shared batch.
fn plain_step(
    state: &mut ClientRoundState,
    spec: &ModelSpec,
    batch: &Batch,
    hyper: &LocalHyper,
    rule: LocalRule,
) -> Result<()> {
    let first = state.lr_trace.is_empty();
    let beta = hyper.local_momentum_beta;
    let mut fresh_norm_sq = 0.0;
    let mut fresh_loss = 0.0;
    for (idx, seq) in state.sequences_mut().enumerate() {
        let (loss, g) = local_grad(spec, &seq.omega, &seq.anchor, batch, hyper.fedprox_mu)?;
        if idx == 0 {
            fresh_norm_sq = grad_norm_sq(&g);
            fresh_loss = loss;
        }
        seq.m = match rule {
            LocalRule::EmaMomentum if !first => axpy(beta, &g, &seq.m.scale(1.0 - beta)?)?,
            _ => g,
        };
    }
    state.accum += fresh_norm_sq;
    state.loss_sum += fresh_loss;
    state.update(hyper)?;
    state.step += 1;
    Ok(())
}

/// What a client sends back after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: usize,
    /// `omega_t - omega_cur_final`.
    pub delta: ParamVector,
    /// `delta - (omega_tm1 - omega_hat_final)`; present when the shadow
    /// sequence ran.
    pub delta_diff: Option<ParamVector>,
    /// Mean loss at the current-sequence evaluation points.
    pub local_loss: f64,
    pub steps_taken: usize,
    pub mean_lr: f64,
    pub lr_trace: Vec<f64>,
}

impl ClientReport {
    /// Number of reals this report puts on the uplink.
    pub fn floats(&self) -> usize {
        self.delta.dim() + self.delta_diff.as_ref().map_or(0, ParamVector::dim)
    }
}

/// Runs kappa_i = floor(E * N_i / B) local updates (at least one) and
/// reports the model deltas.
///
/// `omega_tm1` starts the shadow sequence; pass `None` when the server has
/// no use for the difference term.
#[allow(clippy::too_many_arguments)]
pub fn run_local_round<R: Rng + ?Sized>(
    omega_t: &ParamVector,
    omega_tm1: Option<&ParamVector>,
    spec: &ModelSpec,
    ds: &Dataset,
    shard: &ClientShard,
    hyper: &LocalHyper,
    rng: &mut R,
) -> Result<ClientReport> {
    hyper.validate()?;
    omega_t.check_dim(spec.dim())?;
    let kappa = local_step_count(hyper.epochs, shard.sample_count(), hyper.batch_size);
    // shards smaller than one batch train on all of their rows
    let hyper = LocalHyper {
        batch_size: hyper.batch_size.min(shard.sample_count()),
        ..*hyper
    };
    let rule = hyper.rule();

    let mut state = match rule {
        LocalRule::Mvr => {
            let mut s = init_client_round(omega_t, omega_tm1, spec, ds, shard, &hyper)?;
            first_update(&mut s, &hyper)?;
            for _ in 1..kappa {
                mvr_step(&mut s, spec, ds, shard, &hyper, rng)?;
            }
            s
        }
        LocalRule::Sgd | LocalRule::EmaMomentum => {
            let dim = omega_t.dim();
            let mut s = ClientRoundState {
                cur: Sequence::start(omega_t, ParamVector::zeros(dim)),
                hat: omega_tm1.map(|p| Sequence::start(p, ParamVector::zeros(dim))),
                accum: 0.0,
                step: 1,
                lr_trace: Vec::with_capacity(kappa),
                loss_sum: 0.0,
            };
            for _ in 0..kappa {
                let batch = sample_batch(ds, shard, hyper.batch_size, rng)?;
                plain_step(&mut s, spec, &batch, &hyper, rule)?;
            }
            s
        }
    };

    let delta = omega_t.sub(&state.cur.omega)?;
    let delta_diff = match (omega_tm1, state.hat.as_ref()) {
        (Some(prev), Some(hat)) => Some(delta.sub(&prev.sub(&hat.omega)?)?),
        _ => None,
    };
    let steps = state.lr_trace.len();
    let lr_trace = std::mem::take(&mut state.lr_trace);
    Ok(ClientReport {
        client_id: shard.client_id,
        delta,
        delta_diff,
        local_loss: state.loss_sum / steps as f64,
        steps_taken: steps,
        mean_lr: lr_trace.iter().sum::<f64>() / steps as f64,
        lr_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_synthetic;
    use crate::nummath::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> (ModelSpec, Dataset, ClientShard, ParamVector, ParamVector) {
        let spec = ModelSpec::mlp2(3, 5, 3, 1e-3);
        let ds = gen_synthetic(21, n, 3, 3, 0.8).unwrap();
        let shard = ClientShard::whole(0, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = spec.init_params(&mut rng);
        let b = spec.init_params(&mut rng);
        (spec, ds, shard, a, b)
    }

    fn hyper(batch_size: usize, epochs: usize) -> LocalHyper {
        LocalHyper {
            batch_size,
            epochs,
            ..LocalHyper::default()
        }
    }

    #[test]
    fn lr_examples() {
        let h = LocalHyper {
            k: 1.0,
            w: 8.0,
            ..LocalHyper::default()
        };
        assert_eq!(adaptive_lr(&h, 0.0), 0.5);
        let h = LocalHyper {
            k: 0.1,
            w: 1.0,
            ..LocalHyper::default()
        };
        assert_eq!(adaptive_lr(&h, 7.0), 0.05);
        let fixed = LocalHyper {
            adaptive_lr: false,
            fixed_lr: 0.3,
            ..h
        };
        assert_eq!(adaptive_lr(&fixed, 1e6), 0.3);
        let mut last = f64::INFINITY;
        for acc in [0.0, 0.1, 1.0, 5.0, 100.0, 1e9] {
            let lr = adaptive_lr(&h, acc);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn init_uses_full_shard_gradients() {
        let (spec, ds, shard, a, b) = setup(40);
        let h = hyper(10, 1);
        let s = init_client_round(&a, Some(&a), &spec, &ds, &shard, &h).unwrap();
        assert_eq!(s.m_cur(), s.m_hat().unwrap());
        assert_eq!(s.step, 1);

        let s = init_client_round(&a, Some(&b), &spec, &ds, &shard, &h).unwrap();
        let want_cur = grad(&spec, &a, ds.as_batch()).unwrap();
        let want_hat = grad(&spec, &b, ds.as_batch()).unwrap();
        assert!(s.m_cur().sub(&want_cur).unwrap().max_abs() <= 1e-15);
        assert!(s.m_hat().unwrap().sub(&want_hat).unwrap().max_abs() <= 1e-15);
        assert_eq!(s.accum, grad_norm_sq(s.m_cur()));

        let single = ClientShard::new(0, vec![7]).unwrap();
        let s = init_client_round(&a, None, &spec, &ds, &single, &h).unwrap();
        assert_eq!(s.m_cur(), &grad(&spec, &a, &ds.gather(&[7]).unwrap()).unwrap());
        assert!(s.hat.is_none());
    }

    #[test]
    fn no_movement_leaves_estimate_unchanged() {
        let (spec, ds, shard, a, b) = setup(30);
        let h = hyper(6, 1);
        let mut s = init_client_round(&a, Some(&b), &spec, &ds, &shard, &h).unwrap();
        let before = s.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // prev == omega right after init
        mvr_step(&mut s, &spec, &ds, &shard, &h, &mut rng).unwrap();
        assert_eq!(s.m_cur(), before.m_cur());
        assert_eq!(s.m_hat(), before.m_hat());
    }

    #[test]
    fn full_batch_estimate_telescopes_to_true_gradient() {
        let (spec, ds, shard, a, b) = setup(64);
        let h = hyper(64, 1);
        let mut s = init_client_round(&a, Some(&b), &spec, &ds, &shard, &h).unwrap();
        first_update(&mut s, &h).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            mvr_step(&mut s, &spec, &ds, &shard, &h, &mut rng).unwrap();
            // the estimate used by this update belongs to the pre-update point
            let truth = grad(&spec, &s.cur.prev, ds.as_batch()).unwrap();
            assert!(s.m_cur().sub(&truth).unwrap().max_abs() <= 1e-9);
            let hat = s.hat.as_ref().unwrap();
            let truth = grad(&spec, &hat.prev, ds.as_batch()).unwrap();
            assert!(hat.m.sub(&truth).unwrap().max_abs() <= 1e-9);
        }
        assert_eq!(s.step, 31);
    }

    /// Scalar re-derivation of the two-class logistic gradient for
    /// params `[w0, w1, b0, b1]` and one feature.
    fn scalar_grad(p: [f64; 4], xs: &[f64], ys: &[usize], lambda: f64) -> [f64; 4] {
        let mut g = [0.0; 4];
        for (&x, &y) in xs.iter().zip(ys) {
            let z0 = p[0] * x + p[2];
            let z1 = p[1] * x + p[3];
            let p1 = 1.0 / (1.0 + (z0 - z1).exp());
            let r1 = p1 - if y == 1 { 1.0 } else { 0.0 };
            let r0 = -r1;
            g[0] += r0 * x;
            g[1] += r1 * x;
            g[2] += r0;
            g[3] += r1;
        }
        let n = xs.len() as f64;
        [0, 1, 2, 3].map(|i| g[i] / n + lambda * p[i])
    }

    #[test]
    fn two_step_trace_matches_hand_derivation() {
        let lambda = 0.05;
        let spec = ModelSpec::logistic(1, 2, lambda);
        let xs = [0.5, -1.25];
        let ys = [1, 0];
        let ds = Dataset::new(Batch::new(xs.to_vec(), 1, ys.to_vec()).unwrap(), 2).unwrap();
        let shard = ClientShard::whole(0, 2).unwrap();
        let h = LocalHyper {
            k: 0.8,
            w: 2.0,
            batch_size: 2,
            ..LocalHyper::default()
        };
        let start = [0.3, -0.2, 0.1, 0.05];
        let omega = ParamVector::from_vec(start.to_vec()).unwrap();
        let mut s = init_client_round(&omega, None, &spec, &ds, &shard, &h).unwrap();
        first_update(&mut s, &h).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        mvr_step(&mut s, &spec, &ds, &shard, &h, &mut rng).unwrap();

        let sq = |v: [f64; 4]| v.iter().map(|x| x * x).sum::<f64>();
        let m1 = scalar_grad(start, &xs, &ys, lambda);
        let mut acc = sq(m1);
        let eta1 = 0.8 / (2.0 + acc).cbrt();
        let w2 = [0, 1, 2, 3].map(|i| start[i] - eta1 * m1[i]);
        let g2 = scalar_grad(w2, &xs, &ys, lambda);
        let g1 = scalar_grad(start, &xs, &ys, lambda);
        let m2 = [0, 1, 2, 3].map(|i| m1[i] + g2[i] - g1[i]);
        acc += sq(g2);
        let eta2 = 0.8 / (2.0 + acc).cbrt();
        let w3 = [0, 1, 2, 3].map(|i| w2[i] - eta2 * m2[i]);

        assert!((s.lr_trace[0] - eta1).abs() <= 1e-12);
        assert!((s.lr_trace[1] - eta2).abs() <= 1e-12);
        for i in 0..4 {
            assert!((s.cur.omega[i] - w3[i]).abs() <= 1e-12);
            assert!((s.cur.m[i] - m2[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_step_round_moves_along_full_gradient() {
        let (spec, ds, _, a, _) = setup(60);
        // 60 rows, B = 50, E = 1 -> one update
        let shard = ClientShard::whole(3, 60).unwrap();
        let h = hyper(50, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = run_local_round(&a, Some(&a), &spec, &ds, &shard, &h, &mut rng).unwrap();
        assert_eq!(r.steps_taken, 1);
        assert_eq!(r.client_id, 3);
        let full = grad(&spec, &a, ds.as_batch()).unwrap();
        let eta = adaptive_lr(&h, grad_norm_sq(&full));
        assert_eq!(r.lr_trace, vec![eta]);
        let want = full.scale(eta).unwrap();
        assert!(r.delta.sub(&want).unwrap().max_abs() <= 1e-15);
        assert_eq!(r.delta_diff.as_ref().unwrap(), &ParamVector::zeros(spec.dim()));
    }

    #[test]
    fn sgd_round_is_a_plain_sgd_step() {
        let (spec, ds, shard, _, _) = setup(60);
        let zero = ParamVector::zeros(spec.dim());
        let h = LocalHyper {
            adaptive_lr: false,
            local_momentum: false,
            local_mvr: false,
            fixed_lr: 0.25,
            ..hyper(50, 1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = run_local_round(&zero, None, &spec, &ds, &shard, &h, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = sample_batch(&ds, &shard, 50, &mut rng).unwrap();
        let g = grad(&spec, &zero, &b).unwrap();
        assert_eq!(r.delta, g.scale(0.25).unwrap());
        assert!(r.delta_diff.is_none());
    }

    #[test]
    fn sgd_rule_bit_matches_direct_loop() {
        let (spec, ds, shard, a, _) = setup(90);
        let h = LocalHyper {
            adaptive_lr: false,
            local_momentum: false,
            local_mvr: false,
            fixed_lr: 0.07,
            ..hyper(10, 3)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let r = run_local_round(&a, None, &spec, &ds, &shard, &h, &mut rng).unwrap();
        assert_eq!(r.steps_taken, 27);

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut w = a.as_slice().to_vec();
        for _ in 0..27 {
            let b = sample_batch(&ds, &shard, 10, &mut rng).unwrap();
            let g = grad(&spec, &ParamVector::from_vec(w.clone()).unwrap(), &b).unwrap();
            for (wi, gi) in w.iter_mut().zip(g.iter()) {
                *wi -= 0.07 * gi;
            }
        }
        let delta: Vec<f64> = a.iter().zip(&w).map(|(x, y)| x - y).collect();
        assert_eq!(r.delta.as_slice(), delta.as_slice());
    }

    #[test]
    fn proximal_term_vanishes_at_anchor() {
        let (spec, ds, _, a, _) = setup(20);
        let (_, plain) = local_grad(&spec, &a, &a, ds.as_batch(), 0.0).unwrap();
        let (_, prox) = local_grad(&spec, &a, &a, ds.as_batch(), 0.7).unwrap();
        assert_eq!(plain, prox);
        let off = axpy(0.1, &a, &a).unwrap();
        let (_, pulled) = local_grad(&spec, &off, &a, ds.as_batch(), 0.7).unwrap();
        let (_, free) = local_grad(&spec, &off, &a, ds.as_batch(), 0.0).unwrap();
        let want = axpy(0.7, &off.sub(&a).unwrap(), &free).unwrap();
        assert_eq!(pulled, want);
    }

    #[test]
    fn identical_anchors_give_zero_difference_for_every_rule() {
        let (spec, ds, shard, a, _) = setup(100);
        for (mvr, mom) in [(true, true), (false, true), (false, false)] {
            let h = LocalHyper {
                local_mvr: mvr,
                local_momentum: mom,
                fedprox_mu: 0.01,
                ..hyper(10, 2)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let r = run_local_round(&a, Some(&a), &spec, &ds, &shard, &h, &mut rng).unwrap();
            assert_eq!(r.steps_taken, 20);
            assert_eq!(r.delta_diff.unwrap(), ParamVector::zeros(spec.dim()));
            assert!(r.delta.max_abs() > 0.0);
        }
    }

    #[test]
    fn adaptive_rates_never_increase_within_a_round() {
        let (spec, ds, shard, a, b) = setup(100);
        for (mvr, mom) in [(true, true), (false, true), (false, false)] {
            let h = LocalHyper {
                local_mvr: mvr,
                local_momentum: mom,
                ..hyper(10, 3)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let r = run_local_round(&a, Some(&b), &spec, &ds, &shard, &h, &mut rng).unwrap();
            assert!(r.lr_trace.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(r.lr_trace.len(), 30);
        }
    }

    #[test]
    fn ema_starts_from_first_gradient() {
        let (spec, ds, shard, a, _) = setup(40);
        let h = LocalHyper {
            local_mvr: false,
            local_momentum: true,
            adaptive_lr: false,
            fixed_lr: 0.1,
            ..hyper(40, 1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = run_local_round(&a, None, &spec, &ds, &shard, &h, &mut rng).unwrap();
        let g = grad(&spec, &a, ds.as_batch()).unwrap();
        assert!(r.delta.sub(&g.scale(0.1).unwrap()).unwrap().max_abs() <= 1e-16);
    }

    #[test]
    fn tiny_shard_still_trains() {
        let (spec, ds, _, a, _) = setup(30);
        let shard = ClientShard::new(1, vec![0, 4, 9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = run_local_round(&a, None, &spec, &ds, &shard, &hyper(50, 2), &mut rng).unwrap();
        assert_eq!(r.steps_taken, 1);
        assert!(r.local_loss.is_finite());
    }

    #[test]
    fn rejects_bad_hyper() {
        let (spec, ds, shard, a, _) = setup(20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = LocalHyper {
            k: 0.0,
            ..LocalHyper::default()
        };
        assert!(run_local_round(&a, None, &spec, &ds, &shard, &h, &mut rng).is_err());
        let short = ParamVector::zeros(3);
        assert!(run_local_round(&short, None, &spec, &ds, &shard, &hyper(5, 1), &mut rng).is_err());
    }
}
