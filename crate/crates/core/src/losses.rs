//! Temperature softmax, cross-entropy, KL divergence and the backbone
//! self-distillation objective.
//!
//! Both loss terms are batch means. The distillation term compares the
//! temperature-softened distributions of the frozen global backbone's features
//! (teacher) and the local backbone's features (student). Only the student
//! side ever receives a gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities(Tensor2D);

impl Probabilities {
    /// Validates that every row is a distribution (sum 1 within 1e-9).
    pub fn new(values: Tensor2D) -> Result<Self> {
        for r in 0..values.rows() {
            let row = values.row(r);
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidParameter(format!("row {r} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!("row {r} sums to {s}")));
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor2D {
        &self.0
    }

    pub fn into_inner(self) -> Tensor2D {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub ce_part: f64,
    pub distill_part: f64,
}

/// Which way the KL divergence between teacher and student is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KlDirection {
    /// `KL(teacher || student) = sum p_t log(p_t / p_s)`.
    #[default]
    Forward,
    /// `KL(student || teacher) = sum p_s log(p_s / p_t)`.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FeatureDistillMode {
    /// KL between temperature softmaxes of the feature vectors.
    #[default]
    SoftmaxKl,
    /// Mean squared difference of the raw feature vectors.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillOptions {
    pub tau: f64,
    pub lambda: f64,
    pub direction: KlDirection,
    /// Multiply the KL term (and its gradient) by `tau^2`.
    pub tau2_rescale: bool,
    pub mode: FeatureDistillMode,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            tau: 2.0,
            lambda: 1.0,
            direction: KlDirection::Forward,
            tau2_rescale: false,
            mode: FeatureDistillMode::SoftmaxKl,
        }
    }
}

impl DistillOptions {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature must be finite and > 0, got {tau}")));
    }
    Ok(())
}

/// Row-wise `softmax(z / tau)`, stabilized by subtracting the row maximum.
pub fn softmax_tau(z: &Tensor2D, tau: f64) -> Result<Probabilities> {
    check_tau(tau)?;
    let mut out = z.clone();
    for r in 0..out.rows() {
        softmax_row(out.row_mut(r), tau);
    }
    Ok(Probabilities(out))
}

fn softmax_row(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn check_labels(labels: &[usize], rows: usize, num_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("labels", format!("{rows} labels"), format!("{} labels", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Label { label, num_classes });
    }
    Ok(())
}

/// Mean cross-entropy at temperature 1 and its gradient `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: &Tensor2D, labels: &[usize]) -> Result<(f64, Tensor2D)> {
    let (batch, m) = logits.shape();
    check_labels(labels, batch, m)?;
    if batch == 0 {
        return Err(Error::Empty("cross-entropy batch"));
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
        row[label] -= 1.0;
    }
    grad.scale(1.0 / batch as f64);
    let loss = loss / batch as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

/// Batch mean of `sum_i p_i log(p_i / q_i)`.
///
/// Zero entries of `p` contribute nothing; `q` is floored at [`PROB_FLOOR`].
/// With `p` the teacher and `q` the student this is the forward divergence.
pub fn kl_divergence(p: &Probabilities, q: &Probabilities) -> Result<f64> {
    let (p, q) = (p.values(), q.values());
    if p.shape() != q.shape() {
        return Err(Error::shape("kl_divergence", format!("{:?}", p.shape()), format!("{:?}", q.shape())));
    }
    if p.rows() == 0 {
        return Err(Error::Empty("kl_divergence batch"));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        if pi > 0.0 {
            total += pi * (pi.ln() - qi.max(PROB_FLOOR).ln());
        }
    }
    Ok(total / p.rows() as f64)
}

/// Output of [`bsd_loss`].
#[derive(Debug, Clone)]
pub struct BsdLoss {
    pub value: LossValue,
    /// `lambda * d(distill)/d(local features)`; the CE contribution through
    /// the head is added by the backward pass.
    pub grad_features: Tensor2D,
    /// `d(CE)/d(logits)`.
    pub grad_logits: Tensor2D,
}

/// `CE(logits, labels) + lambda * D(teacher features, student features)`.
///
/// `global_features` come from the frozen global backbone and are treated as
/// constants: no gradient is produced for them.
pub fn bsd_loss(
    global_features: &Tensor2D,
    local_features: &Tensor2D,
    logits: &Tensor2D,
    labels: &[usize],
    opts: &DistillOptions,
) -> Result<BsdLoss> {
    opts.validate()?;
    if global_features.shape() != local_features.shape() {
        return Err(Error::shape("bsd_loss features", format!("{:?}", global_features.shape()), format!("{:?}", local_features.shape())));
    }
    if logits.rows() != local_features.rows() {
        return Err(Error::shape("bsd_loss batch", format!("{} rows", local_features.rows()), format!("{} rows", logits.rows())));
    }
    let (ce, grad_logits) = cross_entropy(logits, labels)?;
    let (distill, mut grad_features) = match opts.mode {
        FeatureDistillMode::SoftmaxKl => {
            let (mut d, mut g) = softmax_kl_with_grad(global_features, local_features, opts.tau, opts.direction)?;
            if opts.tau2_rescale {
                let t2 = opts.tau * opts.tau;
                d *= t2;
                g.scale(t2);
            }
            (d, g)
        }
        FeatureDistillMode::Mse => mse_with_grad(global_features, local_features),
    };
    grad_features.scale(opts.lambda);
    let total = ce + opts.lambda * distill;
    if !total.is_finite() {
        return Err(Error::NonFinite("self-distillation loss".into()));
    }
    Ok(BsdLoss {
        value: LossValue {
            total,
            ce_part: ce,
            distill_part: distill,
        },
        grad_features,
        grad_logits,
    })
}

/// KL between `softmax(teacher / tau)` and `softmax(student / tau)` with the
/// gradient with respect to the student's raw features.
fn softmax_kl_with_grad(teacher: &Tensor2D, student: &Tensor2D, tau: f64, direction: KlDirection) -> Result<(f64, Tensor2D)> {
    let pt = softmax_tau(teacher, tau)?;
    let ps = softmax_tau(student, tau)?;
    let batch = student.rows() as f64;
    let scale = 1.0 / (tau * batch);
    let mut grad = Tensor2D::zeros(student.rows(), student.cols());
    let value = match direction {
        KlDirection::Forward => {
            // d/dz_j = (p_s,j - p_t,j) / (tau * B)
            for ((g, s), t) in grad.as_mut_slice().iter_mut().zip(ps.values().as_slice()).zip(pt.values().as_slice()) {
                *g = (s - t) * scale;
            }
            kl_divergence(&pt, &ps)?
        }
        KlDirection::Reverse => {
            // With a_i = log p_s,i - log p_t,i: d/dz_j = p_s,j (a_j - sum_i p_s,i a_i) / (tau * B)
            for r in 0..student.rows() {
                let (s, t) = (ps.values().row(r), pt.values().row(r));
                let a: Vec<f64> = s.iter().zip(t).map(|(s, t)| s.max(PROB_FLOOR).ln() - t.max(PROB_FLOOR).ln()).collect();
                let mean_a: f64 = s.iter().zip(&a).map(|(s, a)| s * a).sum();
                for ((g, s), a) in grad.row_mut(r).iter_mut().zip(s).zip(&a) {
                    *g = s * (a - mean_a) * scale;
                }
            }
            kl_divergence(&ps, &pt)?
        }
    };
    Ok((value, grad))
}

fn mse_with_grad(teacher: &Tensor2D, student: &Tensor2D) -> (f64, Tensor2D) {
    let n = (student.rows() * student.cols()).max(1) as f64;
    let mut grad = student.clone();
    let mut sum = 0.0;
    for (g, t) in grad.as_mut_slice().iter_mut().zip(teacher.as_slice()) {
        let d = *g - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    (sum / n, grad)
}
