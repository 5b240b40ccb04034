//! Loss terms of the mutual label-correction objective and the prediction
//! divergence between two networks.
//!
//! Every batch loss is a mean over rows. Probabilities are floored at
//! [`PROB_FLOOR`] before logarithms and quotients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

/// Lower clamp for probabilities entering `ln` or a quotient.
pub const PROB_FLOOR: f64 = 1e-12;
/// Lower clamp for the parameter distance in the co-regularizer.
pub const DIST_FLOOR: f64 = 1e-8;
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("row {row} is not on the probability simplex: {reason}")]
    Simplex { row: usize, reason: String },
    #[error("row {row} of the noisy label matrix is not one-hot")]
    NotOneHot { row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("co-regularization: {0}")]
    CoReg(String),
}

#[inline]
fn ln_floor(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn check_row(row: ArrayView1<'_, f64>, index: usize) -> Result<(), LossError> {
    let mut sum = 0.0;
    for &v in row {
        if !v.is_finite() || v < -SIMPLEX_TOL {
            return Err(LossError::Simplex {
                row: index,
                reason: format!("entry {v}"),
            });
        }
        sum += v;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(LossError::Simplex {
            row: index,
            reason: format!("sums to {sum}"),
        });
    }
    Ok(())
}

fn check_simplex(m: ArrayView2<'_, f64>) -> Result<(), LossError> {
    m.rows()
        .into_iter()
        .enumerate()
        .try_for_each(|(i, r)| check_row(r, i))
}

fn check_same_shape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<(), LossError> {
    if a.dim() != b.dim() {
        return Err(LossError::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(LossError::Shape("empty batch".into()));
    }
    Ok(())
}

fn kl_unchecked(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| pj * (ln_floor(pj) - ln_floor(qj)))
        .sum();
    kl.max(0.0)
}

/// `KL(p || q)` in nats, with `0 * ln(0 / q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, LossError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(LossError::Shape(format!("{} vs {} entries", p.len(), q.len())));
    }
    let (p, q) = (ArrayView1::from(p), ArrayView1::from(q));
    check_row(p, 0)?;
    check_row(q, 0)?;
    Ok(kl_unchecked(p, q))
}

/// Batch mean of the symmetric KL `KL(p1_i, p2_i) + KL(p2_i, p1_i)`.
pub fn divergence(p1: ArrayView2<'_, f64>, p2: ArrayView2<'_, f64>) -> Result<f64, LossError> {
    Ok(divergence_sum(p1, p2)? / p1.nrows() as f64)
}

/// Sum over rows of the symmetric KL, for accumulation across batches.
pub fn divergence_sum(p1: ArrayView2<'_, f64>, p2: ArrayView2<'_, f64>) -> Result<f64, LossError> {
    check_same_shape(p1, p2)?;
    check_simplex(p1)?;
    check_simplex(p2)?;
    Ok(p1
        .rows()
        .into_iter()
        .zip(p2.rows())
        .map(|(a, b)| kl_unchecked(a, b) + kl_unchecked(b, a))
        .sum())
}

/// Vector-Jacobian product of a row-wise softmax: given `s = softmax(z)`
/// and `g = dL/ds`, returns `dL/dz = s * (g - <s, g>)`.
pub fn softmax_backward(s: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(s.dim());
    for ((mut o, sr), gr) in out.rows_mut().into_iter().zip(s.rows()).zip(g.rows()) {
        let inner: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
        Zip::from(&mut o)
            .and(&sr)
            .and(&gr)
            .for_each(|o, &s, &g| *o = s * (g - inner));
    }
    out
}

/// Compatibility loss `l_c = mean_i KL(p_i || y^d_i)`.
#[derive(Debug, Clone)]
pub struct CompatLoss {
    pub value: f64,
    pub per_sample: Vec<f64>,
    /// `dl_c / d y^d`.
    pub grad_label_dist: Array2<f64>,
    /// `dl_c / d logits`, where `probs = softmax(logits)`.
    pub grad_logits: Array2<f64>,
}

pub fn compat_loss(
    probs: ArrayView2<'_, f64>,
    label_dist: ArrayView2<'_, f64>,
) -> Result<CompatLoss, LossError> {
    check_same_shape(probs, label_dist)?;
    check_simplex(probs)?;
    check_simplex(label_dist)?;
    let b = probs.nrows() as f64;
    let per_sample: Vec<f64> = probs
        .rows()
        .into_iter()
        .zip(label_dist.rows())
        .map(|(p, q)| kl_unchecked(p, q))
        .collect();
    let value = per_sample.iter().sum::<f64>() / b;
    let grad_label_dist = Zip::from(&probs)
        .and(&label_dist)
        .map_collect(|&p, &q| -p / q.max(PROB_FLOOR) / b);
    // d/dp_j of sum_k p_k (ln p_k - ln q_k) is (ln p_j - ln q_j + 1); the
    // constant cancels in the softmax VJP.
    let dp = Zip::from(&probs)
        .and(&label_dist)
        .map_collect(|&p, &q| (ln_floor(p) - ln_floor(q)) / b);
    let grad_logits = softmax_backward(probs, dp.view());
    Ok(CompatLoss {
        value,
        per_sample,
        grad_label_dist,
        grad_logits,
    })
}

/// `dl_c / d y~` in closed form: `(y^d - p) / B`.
pub fn compat_label_logit_grad(
    probs: ArrayView2<'_, f64>,
    label_dist: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let b = probs.nrows() as f64;
    Zip::from(&label_dist)
        .and(&probs)
        .map_collect(|&q, &p| (q - p) / b)
}

/// One-hot matrix for class indices.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        out[[i, y]] = 1.0;
    }
    out
}

fn one_hot_class(row: ArrayView1<'_, f64>, index: usize) -> Result<usize, LossError> {
    let mut class = None;
    for (j, &v) in row.iter().enumerate() {
        if v == 1.0 && class.is_none() {
            class = Some(j);
        } else if v != 0.0 {
            return Err(LossError::NotOneHot { row: index });
        }
    }
    class.ok_or(LossError::NotOneHot { row: index })
}

#[derive(Debug, Clone)]
pub struct OriginLoss {
    pub value: f64,
    /// `dl_o / d y^d`.
    pub grad_label_dist: Array2<f64>,
}

/// `l_o = mean_i KL(onehot_i || y^d_i) = -mean_i ln y^d_{i, noisy(i)}`.
pub fn origin_loss(
    noisy_onehot: ArrayView2<'_, f64>,
    label_dist: ArrayView2<'_, f64>,
) -> Result<OriginLoss, LossError> {
    check_same_shape(noisy_onehot, label_dist)?;
    check_simplex(label_dist)?;
    let b = label_dist.nrows() as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(label_dist.dim());
    for (i, (oh, q)) in noisy_onehot.rows().into_iter().zip(label_dist.rows()).enumerate() {
        let y = one_hot_class(oh, i)?;
        value -= ln_floor(q[y]);
        grad[[i, y]] = -1.0 / q[y].max(PROB_FLOOR) / b;
    }
    Ok(OriginLoss {
        value: value / b,
        grad_label_dist: grad,
    })
}

/// `dl_o / d y~` in closed form: `(y^d - onehot) / B`.
pub fn origin_label_logit_grad(
    noisy_onehot: ArrayView2<'_, f64>,
    label_dist: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let b = label_dist.nrows() as f64;
    Zip::from(&label_dist)
        .and(&noisy_onehot)
        .map_collect(|&q, &y| (q - y) / b)
}

#[derive(Debug, Clone)]
pub struct EntropyLoss {
    pub value: f64,
    /// `dl_e / d logits`.
    pub grad_logits: Array2<f64>,
}

/// Mean Shannon entropy of the prediction rows.
pub fn entropy_loss(probs: ArrayView2<'_, f64>) -> Result<EntropyLoss, LossError> {
    if probs.nrows() == 0 {
        return Err(LossError::Shape("empty batch".into()));
    }
    check_simplex(probs)?;
    let b = probs.nrows() as f64;
    let value = -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * ln_floor(p))
        .sum::<f64>()
        / b;
    let dp = probs.mapv(|p| -(ln_floor(p) + 1.0) / b);
    Ok(EntropyLoss {
        value,
        grad_logits: softmax_backward(probs, dp.view()),
    })
}

/// Per-sample cross-entropy `-ln p_{i, y_i}`.
pub fn cross_entropy_per_sample(probs: ArrayView2<'_, f64>, labels: &[usize]) -> Vec<f64> {
    probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(p, &y)| -ln_floor(p[y]))
        .collect()
}

/// Mean cross-entropy and its logit gradient `(p - onehot) / B`.
pub fn cross_entropy(
    probs: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>), LossError> {
    if probs.nrows() != labels.len() || labels.is_empty() {
        return Err(LossError::Shape(format!(
            "{} prediction rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.ncols()) {
        return Err(LossError::Shape(format!("label {y} for {} classes", probs.ncols())));
    }
    let b = labels.len() as f64;
    let value = cross_entropy_per_sample(probs, labels).iter().sum::<f64>() / b;
    let mut grad = probs.to_owned();
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    grad.mapv_inplace(|g| g / b);
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoRegularization {
    pub value: f64,
    /// `d(dist^mu) / d dist` at the (possibly clamped) distance.
    pub derivative: f64,
    pub clamped: bool,
}

/// `l_d = dist^mu` with `dist` clamped below at [`DIST_FLOOR`].
pub fn co_regularization(dist: f64, mu: f64) -> Result<CoRegularization, LossError> {
    if !mu.is_finite() || mu > 0.0 {
        return Err(LossError::CoReg(format!("exponent {mu} must be finite and <= 0")));
    }
    if dist.is_nan() || dist < 0.0 {
        return Err(LossError::CoReg(format!("distance {dist}")));
    }
    let clamped = dist < DIST_FLOOR;
    let d = dist.max(DIST_FLOOR);
    Ok(CoRegularization {
        value: d.powf(mu),
        derivative: mu * d.powf(mu - 1.0),
        clamped,
    })
}

/// Gradient of `dist(own, peer)^mu` with respect to `own`.
pub fn co_regularization_param_grad(
    own: &[f64],
    peer: &[f64],
    reg: &CoRegularization,
    dist: f64,
) -> Vec<f64> {
    let scale = reg.derivative / dist.max(DIST_FLOOR);
    own.iter().zip(peer).map(|(a, b)| scale * (a - b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub xi: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.4,
            xi: 0.1,
            mu: -1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let fields = [("alpha", self.alpha), ("beta", self.beta), ("xi", self.xi)];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(LossError::CoReg(format!("{name} = {v} must be >= 0")));
        }
        if self.xi > 0.0 && !(self.mu.is_finite() && self.mu < 0.0) {
            return Err(LossError::CoReg(format!(
                "mu = {} must be negative when xi > 0",
                self.mu
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_o: f64,
    pub l_e: f64,
    pub l_d: f64,
    pub total: f64,
    #[serde(skip)]
    pub per_sample_lc: Vec<f64>,
    pub clamped: bool,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_c, self.l_o, self.l_e, self.l_d, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// All loss components for one network on one batch.
pub fn total_loss(
    probs: ArrayView2<'_, f64>,
    label_dist: ArrayView2<'_, f64>,
    noisy_onehot: ArrayView2<'_, f64>,
    dist: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    let lc = compat_loss(probs, label_dist)?;
    let lo = origin_loss(noisy_onehot, label_dist)?;
    let le = entropy_loss(probs)?;
    let (l_d, clamped) = if weights.xi > 0.0 {
        let reg = co_regularization(dist, weights.mu)?;
        (reg.value, reg.clamped)
    } else {
        (0.0, false)
    };
    Ok(LossBreakdown {
        l_c: lc.value,
        l_o: lo.value,
        l_e: le.value,
        l_d,
        total: lc.value + weights.alpha * lo.value + weights.beta * le.value + weights.xi * l_d,
        per_sample_lc: lc.per_sample,
        clamped,
    })
}

/// Arithmetic mean, zero for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Row sums, handy for checking probability rows.
pub fn row_sums(m: ArrayView2<'_, f64>) -> Array1<f64> {
    m.rows().into_iter().map(|r| r.sum()).collect()
}
