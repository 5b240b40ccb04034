//! Training strategies: single-network Standard and label-correcting
//! PENCIL-style baselines, the Co-teaching family, and mutual label
//! correction (MLC).
//!
//! MLC trains two networks with cross updates on each other's small-loss
//! selections, adds a co-regularizer that rewards parameter distance, and
//! corrects a shared label distribution with the summed label gradients of
//! both networks. Training runs in three stages:
//!
//! | stage      | epochs                                    | labels  | loss              |
//! |------------|-------------------------------------------|---------|-------------------|
//! | warmup     | `[0, warmup)`                             | frozen  | full (or plain CE)|
//! | correction | `[warmup, total - finetune)`              | updated | full              |
//! | finetune   | `[total - finetune, total)`               | frozen  | `l_c + xi * l_d`  |

use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::labels::{CorrectionTable, LabelError, LabelStore};
use crate::losses::{
    co_regularization, co_regularization_param_grad, compat_label_logit_grad, compat_loss,
    cross_entropy, cross_entropy_per_sample, entropy_loss, one_hot, origin_label_logit_grad,
    total_loss, CoRegularization, LossBreakdown, LossError, LossWeights,
};
use crate::metrics::{epoch_divergence, evaluate, EpochRecord, MetricsError, RunMetrics};
use crate::nn::{param_distance, Adam, AdamConfig, ForwardRecord, Mlp, NnError};
use crate::noise::CorruptionRecord;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss at epoch {} batch {} (network {}): {:?}", .0.epoch, .0.batch, .0.network, .0.breakdown)]
    NonFinite(Box<Snapshot>),
    #[error("epoch observer: {0}")]
    Observer(String),
}

/// State captured when a loss turns non-finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub batch: usize,
    pub network: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Standard,
    Coteaching,
    CoteachingIndependent,
    CoteachingPlus,
    Mlc,
    Pencil,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Standard,
        Strategy::Coteaching,
        Strategy::CoteachingIndependent,
        Strategy::CoteachingPlus,
        Strategy::Mlc,
        Strategy::Pencil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::Coteaching => "coteaching",
            Strategy::CoteachingIndependent => "coteaching_independent",
            Strategy::CoteachingPlus => "coteaching_plus",
            Strategy::Mlc => "mlc",
            Strategy::Pencil => "pencil",
        }
    }

    pub fn is_dual(self) -> bool {
        !matches!(self, Strategy::Standard | Strategy::Pencil)
    }

    pub fn corrects_labels(self) -> bool {
        matches!(self, Strategy::Mlc | Strategy::Pencil)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|s| s.name()).collect();
                format!("unknown strategy `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seeds {
    pub net1: u64,
    pub net2: u64,
    pub shuffle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Correction,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs_total: usize,
    pub epochs_warmup: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    /// `(first_epoch, rate)` breakpoints; the rate of the last breakpoint at
    /// or before an epoch applies.
    pub lr_schedule: Vec<(usize, f64)>,
    pub forget_rate: f64,
    pub forget_horizon: usize,
    pub weights: LossWeights,
    pub lambda_step: f64,
    pub label_scale: f64,
    pub hidden: Vec<usize>,
    pub seeds: Seeds,
    /// Warmup uses cross-entropy on the noisy labels instead of the full loss.
    pub warmup_plain_ce: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Mlc,
            epochs_total: 320,
            epochs_warmup: 30,
            epochs_finetune: 180,
            batch_size: 128,
            lr_schedule: vec![(0, 1e-3), (140, 1e-4)],
            forget_rate: 0.2,
            forget_horizon: 10,
            weights: LossWeights::default(),
            lambda_step: 1000.0,
            label_scale: 10.0,
            hidden: vec![256],
            seeds: Seeds {
                net1: 1,
                net2: 2,
                shuffle: 3,
            },
            warmup_plain_ce: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.epochs_warmup + self.epochs_finetune > self.epochs_total {
            return err(format!(
                "epochs_warmup ({}) + epochs_finetune ({}) exceeds epochs_total ({})",
                self.epochs_warmup, self.epochs_finetune, self.epochs_total
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        match self.lr_schedule.first() {
            Some(&(0, _)) => {}
            _ => return err("lr_schedule must start at epoch 0".into()),
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return err("lr_schedule epochs must be strictly increasing".into());
        }
        if let Some(&(e, r)) = self.lr_schedule.iter().find(|(_, r)| !(r.is_finite() && *r >= 0.0)) {
            return err(format!("learning rate {r} at epoch {e} must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.forget_rate) {
            return err(format!("forget_rate {} outside [0, 1)", self.forget_rate));
        }
        if self.forget_horizon == 0 {
            return err("forget_horizon must be positive".into());
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if !(self.lambda_step.is_finite() && self.lambda_step >= 0.0) {
            return err(format!("lambda {} must be >= 0", self.lambda_step));
        }
        if !(self.label_scale.is_finite() && self.label_scale >= 0.0) {
            return err(format!("K {} must be >= 0", self.label_scale));
        }
        if self.hidden.contains(&0) {
            return err("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map_or(0.0, |&(_, r)| r)
    }

    pub fn stage(&self, epoch: usize) -> Stage {
        if epoch < self.epochs_warmup {
            Stage::Warmup
        } else if epoch < self.epochs_total - self.epochs_finetune {
            Stage::Correction
        } else {
            Stage::Finetune
        }
    }

    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect()
    }
}

/// Fraction of each batch kept at `epoch`: a linear ramp from 1 down to
/// `1 - tau` over `horizon` epochs, constant afterwards.
pub fn forget_rate_schedule(epoch: usize, tau: f64, horizon: usize) -> Result<f64, TrainError> {
    if !(0.0..1.0).contains(&tau) {
        return Err(TrainError::Config(format!("forget rate {tau} outside [0, 1)")));
    }
    if horizon == 0 {
        return Err(TrainError::Config("forget horizon must be positive".into()));
    }
    let ramp = (epoch as f64 / horizon as f64).min(1.0);
    Ok(1.0 - ramp * tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    /// Batch positions of the kept samples, ordered by ascending loss.
    pub kept: Vec<usize>,
    pub keep_ratio: f64,
    pub losses: Vec<f64>,
}

/// Number of samples kept out of `n`: `ceil(keep_ratio * n)`, at least one.
pub fn keep_count(n: usize, keep_ratio: f64) -> usize {
    // tolerance absorbs products like 0.8 * 10 landing a hair above an integer
    ((keep_ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// The `ceil(keep_ratio * B)` smallest losses; ties go to the lower index.
pub fn select_small_loss(losses: &[f64], keep_ratio: f64) -> SelectionOutcome {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    order.truncate(keep_count(losses.len(), keep_ratio));
    SelectionOutcome {
        kept: order,
        keep_ratio,
        losses: losses.to_vec(),
    }
}

/// A model and its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub model: Mlp,
    pub adam: Adam,
}

impl Network {
    pub fn new(dims: &[usize], seed: u64, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let model = Mlp::init(dims, seed)?;
        let adam = Adam::new(model.params().len(), cfg.learning_rate(0), cfg.adam);
        Ok(Self { model, adam })
    }

    pub fn from_model(model: Mlp, learning_rate: f64, config: AdamConfig) -> Self {
        let adam = Adam::new(model.params().len(), learning_rate, config);
        Self { model, adam }
    }

    pub fn apply(&mut self, grad: &[f64]) -> Result<(), TrainError> {
        self.adam.step(self.model.params_mut(), grad)?;
        Ok(())
    }
}

fn scatter_rows(sub: ArrayView2<'_, f64>, rows: &[usize], batch: usize) -> Array2<f64> {
    let mut full = Array2::zeros((batch, sub.ncols()));
    for (k, &i) in rows.iter().enumerate() {
        full.row_mut(i).assign(&sub.row(k));
    }
    full
}

/// Cross-entropy on `rows` of the batch and its parameter gradient.
fn subset_cross_entropy(
    model: &Mlp,
    fwd: &ForwardRecord,
    labels: &[usize],
    rows: &[usize],
) -> Result<(f64, Vec<f64>), TrainError> {
    let probs = fwd.probs.select(Axis(0), rows);
    let sub_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let (value, dsub) = cross_entropy(probs.view(), &sub_labels)?;
    let dlogits = scatter_rows(dsub.view(), rows, fwd.batch_size());
    Ok((value, model.backward(fwd, dlogits.view())?))
}

/// Refuses to continue from a non-finite loss. Epoch and batch are filled
/// in by the trainer.
fn ensure_finite(losses: &[&LossBreakdown]) -> Result<(), TrainError> {
    match losses.iter().position(|lb| !lb.is_finite()) {
        Some(network) => Err(TrainError::NonFinite(Box::new(Snapshot {
            epoch: 0,
            batch: 0,
            network,
            breakdown: losses[network].clone(),
        }))),
        None => Ok(()),
    }
}

/// Forward pass that turns non-finite outputs into a [`TrainError::NonFinite`]
/// snapshot for network `network`, so the step aborts before any update.
fn forward_finite(model: &Mlp, x: ArrayView2<'_, f64>, network: usize) -> Result<ForwardRecord, TrainError> {
    let fwd = model.forward(x)?;
    if fwd.probs.iter().all(|p| p.is_finite()) {
        return Ok(fwd);
    }
    Err(TrainError::NonFinite(Box::new(Snapshot {
        epoch: 0,
        batch: 0,
        network,
        breakdown: LossBreakdown {
            l_c: f64::NAN,
            total: f64::NAN,
            ..Default::default()
        },
    })))
}

fn ce_breakdown(value: f64, per_sample: Vec<f64>) -> LossBreakdown {
    LossBreakdown {
        l_c: value,
        total: value,
        per_sample_lc: per_sample,
        ..Default::default()
    }
}

/// One cross-entropy step on the full batch.
pub fn standard_step(
    net: &mut Network,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<LossBreakdown, TrainError> {
    let fwd = forward_finite(&net.model, x, 0)?;
    let all: Vec<usize> = (0..labels.len()).collect();
    let (value, grad) = subset_cross_entropy(&net.model, &fwd, labels, &all)?;
    let lb = ce_breakdown(value, cross_entropy_per_sample(fwd.probs.view(), labels));
    ensure_finite(&[&lb])?;
    net.apply(&grad)?;
    Ok(lb)
}

/// Co-teaching step. With `mutual`, each network trains on the peer's
/// small-loss selection; otherwise on its own.
pub fn coteaching_step(
    net1: &mut Network,
    net2: &mut Network,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    keep_ratio: f64,
    mutual: bool,
) -> Result<(LossBreakdown, LossBreakdown), TrainError> {
    let f1 = forward_finite(&net1.model, x, 0)?;
    let f2 = forward_finite(&net2.model, x, 1)?;
    let ce1 = cross_entropy_per_sample(f1.probs.view(), labels);
    let ce2 = cross_entropy_per_sample(f2.probs.view(), labels);
    let s1 = select_small_loss(&ce1, keep_ratio);
    let s2 = select_small_loss(&ce2, keep_ratio);
    let (rows1, rows2) = if mutual {
        (&s2.kept, &s1.kept)
    } else {
        (&s1.kept, &s2.kept)
    };
    let (v1, g1) = subset_cross_entropy(&net1.model, &f1, labels, rows1)?;
    let (v2, g2) = subset_cross_entropy(&net2.model, &f2, labels, rows2)?;
    let (lb1, lb2) = (ce_breakdown(v1, ce1), ce_breakdown(v2, ce2));
    ensure_finite(&[&lb1, &lb2])?;
    net1.apply(&g1)?;
    net2.apply(&g2)?;
    Ok((lb1, lb2))
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlusOutcome {
    Updated {
        losses: (LossBreakdown, LossBreakdown),
        disagreement: Vec<usize>,
    },
    /// The networks agreed on every sample; nothing was updated.
    Skipped,
}

/// Co-teaching+ step: cross update restricted to samples where the two
/// networks' predicted classes disagree.
pub fn coteaching_plus_step(
    net1: &mut Network,
    net2: &mut Network,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    keep_ratio: f64,
) -> Result<PlusOutcome, TrainError> {
    let f1 = forward_finite(&net1.model, x, 0)?;
    let f2 = forward_finite(&net2.model, x, 1)?;
    let disagreement: Vec<usize> = f1
        .predictions()
        .into_iter()
        .zip(f2.predictions())
        .enumerate()
        .filter_map(|(i, (a, b))| (a != b).then_some(i))
        .collect();
    if disagreement.is_empty() {
        return Ok(PlusOutcome::Skipped);
    }
    let sub_labels: Vec<usize> = disagreement.iter().map(|&i| labels[i]).collect();
    let ce1 = cross_entropy_per_sample(f1.probs.select(Axis(0), &disagreement).view(), &sub_labels);
    let ce2 = cross_entropy_per_sample(f2.probs.select(Axis(0), &disagreement).view(), &sub_labels);
    let pick = |s: SelectionOutcome| -> Vec<usize> {
        s.kept.into_iter().map(|k| disagreement[k]).collect()
    };
    let kept1 = pick(select_small_loss(&ce1, keep_ratio));
    let kept2 = pick(select_small_loss(&ce2, keep_ratio));
    let (v1, g1) = subset_cross_entropy(&net1.model, &f1, labels, &kept2)?;
    let (v2, g2) = subset_cross_entropy(&net2.model, &f2, labels, &kept1)?;
    let lb1 = ce_breakdown(v1, cross_entropy_per_sample(f1.probs.view(), labels));
    let lb2 = ce_breakdown(v2, cross_entropy_per_sample(f2.probs.view(), labels));
    ensure_finite(&[&lb1, &lb2])?;
    net1.apply(&g1)?;
    net2.apply(&g2)?;
    Ok(PlusOutcome::Updated {
        losses: (lb1, lb2),
        disagreement,
    })
}

/// A mini-batch drawn from the training set.
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    /// Dataset row of each batch position (label-store rows).
    pub indices: &'a [usize],
    /// Observed (noisy) labels of the batch.
    pub labels: &'a [usize],
}

/// Loss value and parameter gradient for one network on `rows` of a batch.
/// Gradients of `l_c` and `l_e` flow to the logits; `l_o` has no parameter
/// dependence; the co-regularizer is added by the caller.
#[allow(clippy::too_many_arguments)]
fn label_loss_gradient(
    model: &Mlp,
    fwd: &ForwardRecord,
    label_dist: ArrayView2<'_, f64>,
    onehot: ArrayView2<'_, f64>,
    labels: &[usize],
    rows: &[usize],
    stage: Stage,
    plain_ce: bool,
    weights: &LossWeights,
    dist: f64,
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    let reg_weights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        ..*weights
    };
    if plain_ce {
        let (value, grad) = subset_cross_entropy(model, fwd, labels, rows)?;
        let mut lb = ce_breakdown(value, Vec::new());
        if weights.xi > 0.0 {
            let reg = co_regularization(dist, weights.mu)?;
            lb.l_d = reg.value;
            lb.total += weights.xi * reg.value;
            lb.clamped = reg.clamped;
        }
        return Ok((lb, grad));
    }
    let w = match stage {
        Stage::Finetune => reg_weights,
        Stage::Warmup | Stage::Correction => *weights,
    };
    let probs = fwd.probs.select(Axis(0), rows);
    let yd = label_dist.select(Axis(0), rows);
    let oh = onehot.select(Axis(0), rows);
    let lb = total_loss(probs.view(), yd.view(), oh.view(), dist, &w)?;
    let mut dsub = compat_loss(probs.view(), yd.view())?.grad_logits;
    if w.beta > 0.0 {
        dsub.scaled_add(w.beta, &entropy_loss(probs.view())?.grad_logits);
    }
    let dlogits = scatter_rows(dsub.view(), rows, fwd.batch_size());
    Ok((lb, model.backward(fwd, dlogits.view())?))
}

fn add_coreg(grad: &mut [f64], own: &Mlp, peer: &Mlp, reg: &CoRegularization, dist: f64, xi: f64) {
    let g = co_regularization_param_grad(own.params(), peer.params(), reg, dist);
    for (a, b) in grad.iter_mut().zip(g) {
        *a += xi * b;
    }
}

/// Label-logit gradient of one network's loss over the full batch:
/// `(y^d - p) / B + alpha * (y^d - onehot) / B`.
fn label_gradient(
    probs: ArrayView2<'_, f64>,
    label_dist: ArrayView2<'_, f64>,
    onehot: ArrayView2<'_, f64>,
    alpha: f64,
) -> Array2<f64> {
    let mut g = compat_label_logit_grad(probs, label_dist);
    if alpha > 0.0 {
        g.scaled_add(alpha, &origin_label_logit_grad(onehot, label_dist));
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub losses: Vec<LossBreakdown>,
    pub clamped: bool,
    pub refused_rows: usize,
    /// Batch positions each network was trained on.
    pub trained_on: Vec<Vec<usize>>,
}

/// One MLC step on a batch.
pub fn mlc_step(
    nets: &mut [Network; 2],
    store: &mut LabelStore,
    batch: &Batch<'_>,
    stage: Stage,
    keep_ratio: f64,
    cfg: &TrainConfig,
) -> Result<StepReport, TrainError> {
    let f1 = forward_finite(&nets[0].model, batch.x, 0)?;
    let f2 = forward_finite(&nets[1].model, batch.x, 1)?;
    let yd = store.distribution(batch.indices)?;
    let onehot = one_hot(batch.labels, store.num_classes());
    let w = &cfg.weights;
    let dist = param_distance(&nets[0].model, &nets[1].model)?;
    let plain = stage == Stage::Warmup && cfg.warmup_plain_ce;

    let rank = |fwd: &ForwardRecord| -> Result<Vec<f64>, TrainError> {
        Ok(if plain {
            cross_entropy_per_sample(fwd.probs.view(), batch.labels)
        } else {
            compat_loss(fwd.probs.view(), yd.view())?.per_sample
        })
    };
    let (r1, r2) = (rank(&f1)?, rank(&f2)?);
    let s1 = select_small_loss(&r1, keep_ratio);
    let s2 = select_small_loss(&r2, keep_ratio);

    let grad_for = |own: &Mlp, fwd: &ForwardRecord, rows: &[usize]| {
        label_loss_gradient(
            own,
            fwd,
            yd.view(),
            onehot.view(),
            batch.labels,
            rows,
            stage,
            plain,
            w,
            dist,
        )
    };
    let (mut lb1, mut g1) = grad_for(&nets[0].model, &f1, &s2.kept)?;
    let (mut lb2, mut g2) = grad_for(&nets[1].model, &f2, &s1.kept)?;
    let mut clamped = false;
    if w.xi > 0.0 {
        let reg = co_regularization(dist, w.mu)?;
        clamped = reg.clamped;
        add_coreg(&mut g1, &nets[0].model, &nets[1].model, &reg, dist, w.xi);
        add_coreg(&mut g2, &nets[1].model, &nets[0].model, &reg, dist, w.xi);
    }
    lb1.per_sample_lc = r1;
    lb2.per_sample_lc = r2;
    ensure_finite(&[&lb1, &lb2])?;
    nets[0].apply(&g1)?;
    nets[1].apply(&g2)?;

    let mut refused_rows = 0;
    if stage == Stage::Correction {
        let a = w.alpha;
        let lg1 = label_gradient(f1.probs.view(), yd.view(), onehot.view(), a);
        let lg2 = label_gradient(f2.probs.view(), yd.view(), onehot.view(), a);
        refused_rows = store.update(batch.indices, lg1.view(), lg2.view())?.refused_rows;
    }
    Ok(StepReport {
        losses: vec![lb1, lb2],
        clamped,
        refused_rows,
        trained_on: vec![s2.kept, s1.kept],
    })
}

/// Single-network label correction step (PENCIL-style): full loss on the
/// whole batch, label update with the network's own label gradient.
pub fn pencil_step(
    net: &mut Network,
    store: &mut LabelStore,
    batch: &Batch<'_>,
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<StepReport, TrainError> {
    let fwd = forward_finite(&net.model, batch.x, 0)?;
    let yd = store.distribution(batch.indices)?;
    let onehot = one_hot(batch.labels, store.num_classes());
    let plain = stage == Stage::Warmup && cfg.warmup_plain_ce;
    let weights = LossWeights {
        xi: 0.0,
        ..cfg.weights
    };
    let all: Vec<usize> = (0..batch.labels.len()).collect();
    let (mut lb, grad) = label_loss_gradient(
        &net.model,
        &fwd,
        yd.view(),
        onehot.view(),
        batch.labels,
        &all,
        stage,
        plain,
        &weights,
        1.0,
    )?;
    if plain {
        lb.per_sample_lc = cross_entropy_per_sample(fwd.probs.view(), batch.labels);
    }
    ensure_finite(&[&lb])?;
    net.apply(&grad)?;
    let mut refused_rows = 0;
    if stage == Stage::Correction {
        let lg = label_gradient(fwd.probs.view(), yd.view(), onehot.view(), weights.alpha);
        let zeros = Array2::zeros(lg.dim());
        refused_rows = store.update(batch.indices, lg.view(), zeros.view())?.refused_rows;
    }
    Ok(StepReport {
        losses: vec![lb],
        clamped: false,
        refused_rows,
        trained_on: vec![all],
    })
}

/// Batch-averaged statistics of one training epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochStats {
    pub l_c: f64,
    pub l_o: f64,
    pub l_e: f64,
    pub l_d: f64,
    pub clamp_events: u64,
    pub skipped_steps: u64,
    pub refused_label_rows: u64,
    pub batches: usize,
    /// Kept-sample count of each network in every batch, in step order.
    pub selected_per_batch: Vec<Vec<usize>>,
}

impl EpochStats {
    fn add(&mut self, losses: &[LossBreakdown]) {
        let n = losses.len() as f64;
        for lb in losses {
            self.l_c += lb.l_c / n;
            self.l_o += lb.l_o / n;
            self.l_e += lb.l_e / n;
            self.l_d += lb.l_d / n;
        }
    }

    fn finish(&mut self) {
        let steps = (self.batches as u64).saturating_sub(self.skipped_steps).max(1) as f64;
        self.l_c /= steps;
        self.l_o /= steps;
        self.l_e /= steps;
        self.l_d /= steps;
    }
}

/// Mutable training state for one run: networks, optimizers, label store,
/// and the shuffle stream.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    noisy: &'a [usize],
    pub nets: Vec<Network>,
    pub store: Option<LabelStore>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, train: &'a Dataset, noisy: &'a [usize]) -> Result<Self, TrainError> {
        cfg.validate()?;
        if noisy.len() != train.len() {
            return Err(TrainError::Config(format!(
                "{} noisy labels for {} training rows",
                noisy.len(),
                train.len()
            )));
        }
        let dims = cfg.layer_dims(train.dim(), train.num_classes());
        let mut nets = vec![Network::new(&dims, cfg.seeds.net1, cfg)?];
        if cfg.strategy.is_dual() {
            nets.push(Network::new(&dims, cfg.seeds.net2, cfg)?);
        }
        let store = if cfg.strategy.corrects_labels() {
            Some(LabelStore::new(
                noisy,
                train.num_classes(),
                cfg.label_scale,
                cfg.lambda_step,
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            train,
            noisy,
            nets,
            store,
            rng: ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle),
            epoch: 0,
        })
    }

    /// Number of epochs trained so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        self.cfg
    }

    /// Runs one training epoch with a stage forced by the caller.
    pub fn train_epoch_in_stage(&mut self, stage: Stage) -> Result<EpochStats, TrainError> {
        let epoch = self.epoch;
        let cfg = self.cfg;
        let lr = cfg.learning_rate(epoch);
        for net in &mut self.nets {
            net.adam.learning_rate = lr;
        }
        let keep = forget_rate_schedule(epoch, cfg.forget_rate, cfg.forget_horizon)?;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);

        let mut stats = EpochStats::default();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = self.train.gather(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| self.noisy[i]).collect();
            let batch = Batch {
                x: x.view(),
                indices: idx,
                labels: &labels,
            };
            stats.batches += 1;
            let at = |e: TrainError| match e {
                TrainError::NonFinite(mut snap) => {
                    snap.epoch = epoch;
                    snap.batch = b;
                    TrainError::NonFinite(snap)
                }
                other => other,
            };
            let (losses, trained_on) = match cfg.strategy {
                Strategy::Standard => {
                    let lb = standard_step(&mut self.nets[0], batch.x, batch.labels).map_err(at)?;
                    (vec![lb], vec![idx.len()])
                }
                Strategy::Coteaching | Strategy::CoteachingIndependent => {
                    let mutual = cfg.strategy == Strategy::Coteaching;
                    let (a, b) = self.nets.split_at_mut(1);
                    let (l1, l2) = coteaching_step(&mut a[0], &mut b[0], batch.x, batch.labels, keep, mutual).map_err(at)?;
                    let n = keep_count(idx.len(), keep);
                    (vec![l1, l2], vec![n, n])
                }
                Strategy::CoteachingPlus => {
                    let (a, b) = self.nets.split_at_mut(1);
                    match coteaching_plus_step(&mut a[0], &mut b[0], batch.x, batch.labels, keep).map_err(at)? {
                        PlusOutcome::Updated {
                            losses: (l1, l2),
                            disagreement,
                        } => {
                            let n = keep_count(disagreement.len(), keep);
                            (vec![l1, l2], vec![n, n])
                        }
                        PlusOutcome::Skipped => {
                            stats.skipped_steps += 1;
                            stats.selected_per_batch.push(vec![0, 0]);
                            continue;
                        }
                    }
                }
                Strategy::Mlc => {
                    let store = self.store.as_mut().expect("mlc owns a label store");
                    let nets: &mut [Network; 2] = self
                        .nets
                        .as_mut_slice()
                        .try_into()
                        .expect("mlc trains two networks");
                    let report = mlc_step(nets, store, &batch, stage, keep, cfg).map_err(at)?;
                    stats.clamp_events += u64::from(report.clamped);
                    stats.refused_label_rows += report.refused_rows as u64;
                    let sizes = report.trained_on.iter().map(Vec::len).collect();
                    (report.losses, sizes)
                }
                Strategy::Pencil => {
                    let store = self.store.as_mut().expect("pencil owns a label store");
                    let report = pencil_step(&mut self.nets[0], store, &batch, stage, cfg).map_err(at)?;
                    stats.refused_label_rows += report.refused_rows as u64;
                    (report.losses, vec![idx.len()])
                }
            };
            stats.add(&losses);
            stats.selected_per_batch.push(trained_on);
        }
        stats.finish();
        self.epoch += 1;
        Ok(stats)
    }

    /// Runs the next epoch in the stage given by the schedule.
    pub fn train_epoch(&mut self) -> Result<EpochStats, TrainError> {
        let stage = self.cfg.stage(self.epoch);
        self.train_epoch_in_stage(stage)
    }

    /// Evaluation record for the current state. Train accuracy is measured
    /// against the observed (noisy) labels.
    pub fn evaluate(&self, test: &Dataset) -> Result<EpochRecord, TrainError> {
        let m1 = &self.nets[0].model;
        let mut rec = EpochRecord {
            epoch: self.epoch,
            train_acc1: evaluate(m1, self.train, self.noisy)?,
            test_acc1: evaluate(m1, test, test.labels())?,
            ..Default::default()
        };
        if let Some(n2) = self.nets.get(1) {
            rec.train_acc2 = Some(evaluate(&n2.model, self.train, self.noisy)?);
            rec.test_acc2 = Some(evaluate(&n2.model, test, test.labels())?);
            rec.divergence = Some(epoch_divergence(m1, &n2.model, test)?);
        }
        Ok(rec)
    }
}

/// Result of a complete training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub models: Vec<Mlp>,
    pub label_store: Option<LabelStore>,
    pub corrections: Option<CorrectionTable>,
}

fn check_datasets(train: &Dataset, test: &Dataset, record: &CorruptionRecord) -> Result<(), TrainError> {
    if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
        return Err(TrainError::Config(format!(
            "train ({} features, {} classes) and test ({} features, {} classes) disagree",
            train.dim(),
            train.num_classes(),
            test.dim(),
            test.num_classes()
        )));
    }
    if record.len() != train.len() {
        return Err(TrainError::Config(format!(
            "corruption record of {} for {} training rows",
            record.len(),
            train.len()
        )));
    }
    if record.noisy.iter().any(|&y| y >= train.num_classes()) {
        return Err(TrainError::Config("noisy label outside class range".into()));
    }
    Ok(())
}

/// Trains `cfg.epochs_total` epochs on the noisy labels of `record`,
/// evaluating before training (epoch 0) and after every epoch. Each
/// evaluation record is passed to `on_epoch` as soon as it exists.
pub fn run_with<F>(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    record: &CorruptionRecord,
    mut on_epoch: F,
) -> Result<RunOutput, TrainError>
where
    F: FnMut(&EpochRecord) -> Result<(), TrainError>,
{
    check_datasets(train, test, record)?;
    let mut trainer = Trainer::new(cfg, train, &record.noisy)?;
    let mut metrics = RunMetrics::default();
    let first = trainer.evaluate(test)?;
    on_epoch(&first)?;
    metrics.records.push(first);
    for _ in 0..cfg.epochs_total {
        let stats = trainer.train_epoch()?;
        let mut rec = trainer.evaluate(test)?;
        rec.l_c = stats.l_c;
        rec.l_o = stats.l_o;
        rec.l_e = stats.l_e;
        rec.l_d = stats.l_d;
        rec.clamp_events = stats.clamp_events;
        rec.skipped_steps = stats.skipped_steps;
        on_epoch(&rec)?;
        metrics.records.push(rec);
    }
    let corrections = trainer
        .store
        .as_ref()
        .map(|s| s.export_corrected(record))
        .transpose()?;
    Ok(RunOutput {
        metrics,
        models: trainer.nets.into_iter().map(|n| n.model).collect(),
        label_store: trainer.store,
        corrections,
    })
}

pub fn run(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    record: &CorruptionRecord,
) -> Result<RunOutput, TrainError> {
    run_with(cfg, train, test, record, |_| Ok(()))
}
