//! Differentiable classifiers: multinomial logistic regression and a
//! one-hidden-layer ReLU network, both trained with softmax cross-entropy
//! plus an l2 penalty on every parameter.
//!
//! Parameter layout (row-major, flat):
//!
//! * logistic: `W[input][classes]`, then `b[classes]`
//! * mlp2: `W1[input][hidden]`, `b1[hidden]`, `W2[hidden][classes]`, `b2[classes]`
//!
//! The input-layer kernels skip zero features, which keeps sparse inputs
//! such as MNIST digits cheap without changing the result.

use rand::Rng;

use super::vector::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Logistic,
    Mlp2,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp2 => "mlp2",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ModelKind::Logistic),
            "mlp2" => Ok(ModelKind::Mlp2),
            other => Err(Error::InvalidArgument(format!(
                "unknown model kind {other:?} (expected \"logistic\" or \"mlp2\")"
            ))),
        }
    }
}

/// Architecture plus regularization strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Ignored for [`ModelKind::Logistic`].
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub l2_lambda: f64,
}

impl ModelSpec {
    pub const DEFAULT_HIDDEN: usize = 600;
    pub const DEFAULT_L2: f64 = 1e-4;

    pub fn logistic(input_dim: usize, num_classes: usize, l2_lambda: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dim: 0,
            num_classes,
            l2_lambda,
        }
    }

    pub fn mlp2(input_dim: usize, hidden_dim: usize, num_classes: usize, l2_lambda: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp2,
            input_dim,
            hidden_dim,
            num_classes,
            l2_lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "model needs input_dim >= 1 and num_classes >= 2 (got {}, {})",
                self.input_dim, self.num_classes
            )));
        }
        if self.kind == ModelKind::Mlp2 && self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("mlp2 needs hidden_dim >= 1".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "l2_lambda must be finite and >= 0 (got {})",
                self.l2_lambda
            )));
        }
        Ok(())
    }

    /// Number of trainable parameters.
    pub fn dim(&self) -> usize {
        match self.kind {
            ModelKind::Logistic => (self.input_dim + 1) * self.num_classes,
            ModelKind::Mlp2 => {
                (self.input_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.num_classes
            }
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for every weight and bias of
    /// each layer.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut out = Vec::with_capacity(self.dim());
        let mut layer = |fan_in: usize, count: usize, out: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            out.extend((0..count).map(|_| rng.random_range(-bound..bound)));
        };
        match self.kind {
            ModelKind::Logistic => {
                layer(self.input_dim, (self.input_dim + 1) * self.num_classes, &mut out)
            }
            ModelKind::Mlp2 => {
                layer(self.input_dim, (self.input_dim + 1) * self.hidden_dim, &mut out);
                layer(self.hidden_dim, (self.hidden_dim + 1) * self.num_classes, &mut out);
            }
        }
        ParamVector::from_vec(out).expect("uniform draws are finite")
    }
}

/// Labeled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, n_features: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if n_features == 0 || inputs.len() != n_features * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "batch has {} input values for {} labels of {} features",
                inputs.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite input at flat index {i}"
            )));
        }
        Ok(Batch {
            inputs,
            n_features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Copies the given rows, in the given order, into a new batch.
    pub fn gather(&self, rows: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(rows.len() * self.n_features);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "row {r} out of range for {} samples",
                    self.len()
                )));
            }
            inputs.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Batch::new(inputs, self.n_features, labels)
    }
}

/// Loss and accuracy of a model on a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub accuracy: f64,
}

fn check_inputs(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<()> {
    params.check_dim(spec.dim())?;
    if batch.n_features() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            actual: batch.n_features(),
        });
    }
    if let Some(&label) = batch.labels().iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: spec.num_classes,
        });
    }
    Ok(())
}

/// Index of the largest logit; ties go to the lowest index.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = c;
        }
    }
    best
}

/// Turns logits into probabilities in place and returns the sample's
/// cross-entropy `logsumexp(z) - z[label]`.
fn softmax_xent(z: &mut [f64], label: usize) -> f64 {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let margin = max - z[label];
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    z.iter_mut().for_each(|v| *v *= inv);
    margin + sum.ln()
}

/// `dst += a * src`
#[inline]
fn add_scaled(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// `out = bias + x * W` for row-major `W[x.len()][out.len()]`, skipping
/// zero entries of `x`.
#[inline]
fn affine(out: &mut [f64], bias: &[f64], x: &[f64], w: &[f64]) {
    let width = out.len();
    out.copy_from_slice(bias);
    for (k, &xk) in x.iter().enumerate() {
        if xk != 0.0 {
            add_scaled(out, xk, &w[k * width..(k + 1) * width]);
        }
    }
}

/// `gw += outer(x, delta)`, `gb += delta`, skipping zero entries of `x`.
#[inline]
fn accumulate_affine_grad(gw: &mut [f64], gb: &mut [f64], x: &[f64], delta: &[f64]) {
    let width = delta.len();
    add_scaled(gb, 1.0, delta);
    for (k, &xk) in x.iter().enumerate() {
        if xk != 0.0 {
            add_scaled(&mut gw[k * width..(k + 1) * width], xk, delta);
        }
    }
}

/// Data term of the objective: returns `(sum of per-sample losses, correct
/// predictions)` and, if `grad` is given, adds the gradient of the mean data
/// loss into it.
fn data_pass(
    spec: &ModelSpec,
    p: &[f64],
    batch: &Batch,
    mut grad: Option<&mut [f64]>,
) -> (f64, usize) {
    let n_in = spec.input_dim;
    let n_out = spec.num_classes;
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut z = vec![0.0; n_out];

    match spec.kind {
        ModelKind::Logistic => {
            let (w, b) = p.split_at(n_in * n_out);
            for (i, &y) in batch.labels().iter().enumerate() {
                let x = batch.row(i);
                affine(&mut z, b, x, w);
                if argmax(&z) == y {
                    correct += 1;
                }
                loss_sum += softmax_xent(&mut z, y);
                if let Some(g) = grad.as_deref_mut() {
                    z[y] -= 1.0;
                    z.iter_mut().for_each(|v| *v *= inv_n);
                    let (gw, gb) = g.split_at_mut(n_in * n_out);
                    accumulate_affine_grad(gw, gb, x, &z);
                }
            }
        }
        ModelKind::Mlp2 => {
            let n_hid = spec.hidden_dim;
            let (w1, rest) = p.split_at(n_in * n_hid);
            let (b1, rest) = rest.split_at(n_hid);
            let (w2, b2) = rest.split_at(n_hid * n_out);
            let mut pre = vec![0.0; n_hid];
            let mut hid = vec![0.0; n_hid];
            let mut dpre = vec![0.0; n_hid];
            for (i, &y) in batch.labels().iter().enumerate() {
                let x = batch.row(i);
                affine(&mut pre, b1, x, w1);
                for (h, &a) in hid.iter_mut().zip(&pre) {
                    *h = if a > 0.0 { a } else { 0.0 };
                }
                affine(&mut z, b2, &hid, w2);
                if argmax(&z) == y {
                    correct += 1;
                }
                loss_sum += softmax_xent(&mut z, y);
                if let Some(g) = grad.as_deref_mut() {
                    z[y] -= 1.0;
                    z.iter_mut().for_each(|v| *v *= inv_n);
                    let (gw1, rest) = g.split_at_mut(n_in * n_hid);
                    let (gb1, rest) = rest.split_at_mut(n_hid);
                    let (gw2, gb2) = rest.split_at_mut(n_hid * n_out);
                    accumulate_affine_grad(gw2, gb2, &hid, &z);
                    for j in 0..n_hid {
                        // ReLU'(0) := 0
                        dpre[j] = if pre[j] > 0.0 {
                            w2[j * n_out..(j + 1) * n_out]
                                .iter()
                                .zip(&z)
                                .map(|(w, d)| w * d)
                                .sum()
                        } else {
                            0.0
                        };
                    }
                    accumulate_affine_grad(gw1, gb1, x, &dpre);
                }
            }
        }
    }
    (loss_sum, correct)
}

/// Mean cross-entropy over the batch plus `(l2_lambda / 2) * ||params||^2`,
/// and the fraction of argmax-correct predictions.
pub fn eval_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<LossReport> {
    check_inputs(spec, params, batch)?;
    let (loss_sum, correct) = data_pass(spec, params.as_slice(), batch, None);
    let loss = loss_sum / batch.len() as f64 + 0.5 * spec.l2_lambda * params.norm_sq();
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "eval_loss" });
    }
    Ok(LossReport {
        loss,
        accuracy: correct as f64 / batch.len() as f64,
    })
}

/// Analytic gradient of [`eval_loss`]'s loss with respect to `params`.
pub fn grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    Ok(loss_and_grad(spec, params, batch)?.1)
}

/// [`eval_loss`] and [`grad`] from a single forward/backward pass.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(LossReport, ParamVector)> {
    check_inputs(spec, params, batch)?;
    let p = params.as_slice();
    let mut g = vec![0.0; p.len()];
    let (loss_sum, correct) = data_pass(spec, p, batch, Some(&mut g));
    let lambda = spec.l2_lambda;
    if lambda != 0.0 {
        add_scaled(&mut g, lambda, p);
    }
    let loss = loss_sum / batch.len() as f64 + 0.5 * lambda * params.norm_sq();
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "eval_loss" });
    }
    let report = LossReport {
        loss,
        accuracy: correct as f64 / batch.len() as f64,
    };
    Ok((report, ParamVector::from_vec_checked(g, "grad")?))
}

/// Central-difference gradient estimate, one coordinate at a time.
pub fn finite_diff_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    h: f64,
) -> Result<ParamVector> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step h must be > 0 (got {h})")));
    }
    check_inputs(spec, params, batch)?;
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.dim());
    for j in 0..params.dim() {
        let orig = params[j];
        probe.values_mut()[j] = orig + h;
        let up = eval_loss(spec, &probe, batch)?.loss;
        probe.values_mut()[j] = orig - h;
        let down = eval_loss(spec, &probe, batch)?.loss;
        probe.values_mut()[j] = orig;
        out.push((up - down) / (2.0 * h));
    }
    ParamVector::from_vec_checked(out, "finite_diff_grad")
}
