//! Accuracy, prediction divergence, per-epoch bookkeeping and multi-trial
//! aggregation.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::losses::{divergence_sum, LossError};
use crate::nn::{Mlp, NnError};

/// Rows per forward pass during evaluation. Fixed so sums run in a fixed order.
pub const EVAL_BATCH: usize = 1000;

pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "train_acc1",
    "train_acc2",
    "test_acc1",
    "test_acc2",
    "divergence",
    "l_c",
    "l_o",
    "l_e",
    "l_d",
    "clamp_events",
    "skipped_steps",
];

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    Length(usize, usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("metrics csv line {line}: {reason}")]
    Parse { line: u64, reason: String },
}

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::Length(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty("accuracy over zero samples"));
    }
    let correct = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / labels.len() as f64)
}

fn eval_chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(EVAL_BATCH)
        .map(move |s| (s..(s + EVAL_BATCH).min(n)).collect())
}

/// Argmax predictions over a dataset.
pub fn predict(model: &Mlp, data: &Dataset) -> Result<Vec<usize>, MetricsError> {
    let mut out = Vec::with_capacity(data.len());
    for idx in eval_chunks(data.len()) {
        out.extend(model.forward(data.gather(&idx).view())?.predictions());
    }
    Ok(out)
}

/// Accuracy of a model against explicit labels for each row of `data`.
pub fn evaluate(model: &Mlp, data: &Dataset, labels: &[usize]) -> Result<f64, MetricsError> {
    accuracy(&predict(model, data)?, labels)
}

/// Mean symmetric KL between the two models' predictions over `data`.
pub fn epoch_divergence(a: &Mlp, b: &Mlp, data: &Dataset) -> Result<f64, MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::Empty("divergence over zero samples"));
    }
    let mut total = 0.0;
    for idx in eval_chunks(data.len()) {
        let x = data.gather(&idx);
        let (pa, pb) = (a.forward(x.view())?, b.forward(x.view())?);
        total += divergence_sum(pa.probs.view(), pb.probs.view())?;
    }
    Ok(total / data.len() as f64)
}

/// One row of the metrics stream. Epoch 0 is the evaluation before training.
/// Second-network fields are `None` for single-network strategies. Loss
/// columns are epoch means over batches (and over both networks).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc1: f64,
    pub train_acc2: Option<f64>,
    pub test_acc1: f64,
    pub test_acc2: Option<f64>,
    pub divergence: Option<f64>,
    pub l_c: f64,
    pub l_o: f64,
    pub l_e: f64,
    pub l_d: f64,
    pub clamp_events: u64,
    pub skipped_steps: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl EpochRecord {
    /// Test accuracy reported for the epoch: mean of both networks when there are two.
    pub fn test_acc(&self) -> f64 {
        match self.test_acc2 {
            Some(b) => 0.5 * (self.test_acc1 + b),
            None => self.test_acc1,
        }
    }

    pub fn csv_fields(&self) -> [String; 12] {
        [
            self.epoch.to_string(),
            self.train_acc1.to_string(),
            opt(self.train_acc2),
            self.test_acc1.to_string(),
            opt(self.test_acc2),
            opt(self.divergence),
            self.l_c.to_string(),
            self.l_o.to_string(),
            self.l_e.to_string(),
            self.l_d.to_string(),
            self.clamp_events.to_string(),
            self.skipped_steps.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_acc: f64,
    pub last10_mean_acc: f64,
    pub argbest_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

impl RunMetrics {
    /// The final (up to) ten recorded epoch accuracies.
    pub fn last10(&self) -> Vec<f64> {
        let start = self.records.len().saturating_sub(10);
        self.records[start..].iter().map(EpochRecord::test_acc).collect()
    }

    pub fn summary(&self) -> Option<RunSummary> {
        let first = self.records.first()?;
        let (mut best, mut arg) = (first.test_acc(), first.epoch);
        for r in &self.records[1..] {
            if r.test_acc() > best {
                best = r.test_acc();
                arg = r.epoch;
            }
        }
        let last = self.last10();
        Some(RunSummary {
            best_acc: best,
            last10_mean_acc: last.iter().sum::<f64>() / last.len() as f64,
            argbest_epoch: arg,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = MetricsWriter::new(out)?;
        for r in &self.records {
            w.append(r)?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, MetricsError> {
        let mut reader = csv::Reader::from_reader(input);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        if header != METRICS_HEADER {
            return Err(MetricsError::Parse {
                line: 1,
                reason: format!("unexpected header {header:?}"),
            });
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let err = |reason: String| MetricsError::Parse { line, reason };
            let num = |i: usize| -> Result<f64, MetricsError> {
                row[i]
                    .parse()
                    .map_err(|e| err(format!("{}: {e}", METRICS_HEADER[i])))
            };
            let opt_num = |i: usize| -> Result<Option<f64>, MetricsError> {
                if row[i].is_empty() {
                    Ok(None)
                } else {
                    num(i).map(Some)
                }
            };
            let int = |i: usize| -> Result<u64, MetricsError> {
                row[i]
                    .parse()
                    .map_err(|e| err(format!("{}: {e}", METRICS_HEADER[i])))
            };
            if row.len() != METRICS_HEADER.len() {
                return Err(err(format!("{} fields", row.len())));
            }
            records.push(EpochRecord {
                epoch: int(0)? as usize,
                train_acc1: num(1)?,
                train_acc2: opt_num(2)?,
                test_acc1: num(3)?,
                test_acc2: opt_num(4)?,
                divergence: opt_num(5)?,
                l_c: num(6)?,
                l_o: num(7)?,
                l_e: num(8)?,
                l_d: num(9)?,
                clamp_events: int(10)?,
                skipped_steps: int(11)?,
            });
        }
        Ok(Self { records })
    }
}

/// Appends one CSV row per epoch and flushes after each, so an interrupted
/// run leaves a parseable prefix.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self, MetricsError> {
        let mut inner = csv::WriterBuilder::new().buffer_capacity(4096).from_writer(out);
        inner.write_record(METRICS_HEADER)?;
        inner.flush().map_err(csv::Error::from)?;
        Ok(Self { inner })
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<(), MetricsError> {
        self.inner.write_record(record.csv_fields())?;
        self.inner.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_accuracy: Option<f64>,
}

/// Equal-width bins over `[lo, hi]`; values equal to `hi` land in the last
/// bin and values outside the range are clamped to the end bins.
pub fn divergence_accuracy_bins_in_range(
    history: &[(f64, f64)],
    num_bins: usize,
    lo: f64,
    hi: f64,
) -> Result<Vec<DivergenceBin>, MetricsError> {
    if history.is_empty() {
        return Err(MetricsError::Empty("divergence history"));
    }
    if num_bins < 2 {
        return Err(MetricsError::Empty("fewer than two bins"));
    }
    let width = (hi - lo) / num_bins as f64;
    let mut sums = vec![0.0; num_bins];
    let mut counts = vec![0usize; num_bins];
    for &(div, acc) in history {
        let k = if width > 0.0 {
            (((div - lo) / width).floor().max(0.0) as usize).min(num_bins - 1)
        } else {
            0
        };
        sums[k] += acc;
        counts[k] += 1;
    }
    Ok((0..num_bins)
        .map(|k| DivergenceBin {
            lo: lo + width * k as f64,
            hi: if k + 1 == num_bins { hi } else { lo + width * (k + 1) as f64 },
            count: counts[k],
            mean_accuracy: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
        })
        .collect())
}

/// Equal-width bins over the observed divergence range.
pub fn divergence_accuracy_bins(
    history: &[(f64, f64)],
    num_bins: usize,
) -> Result<Vec<DivergenceBin>, MetricsError> {
    let lo = history.iter().map(|h| h.0).fold(f64::INFINITY, f64::min);
    let hi = history.iter().map(|h| h.0).fold(f64::NEG_INFINITY, f64::max);
    divergence_accuracy_bins_in_range(history, num_bins, lo, hi)
}

/// Quantile of sorted data by linear interpolation between closest ranks:
/// position `p * (n - 1)`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Result<Self, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::Empty("box statistics"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            count: sorted.len(),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Box statistics over the pooled last-ten-epoch accuracies of every run.
pub fn aggregate_trials(runs: &[RunMetrics]) -> Result<BoxStats, MetricsError> {
    let pooled: Vec<f64> = runs.iter().flat_map(RunMetrics::last10).collect();
    BoxStats::from_values(&pooled)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (average ranks for ties). `None` when either
/// side has zero rank variance or fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, a: f64, b: Option<f64>) -> EpochRecord {
        EpochRecord {
            epoch,
            test_acc1: a,
            test_acc2: b,
            ..Default::default()
        }
    }

    #[test]
    fn accuracy_cases() {
        let labels: Vec<usize> = (0..10).collect();
        let mut preds = labels.clone();
        assert_eq!(accuracy(&preds, &labels).unwrap(), 1.0);
        preds[4] = 9;
        assert_eq!(accuracy(&preds, &labels).unwrap(), 0.9);
        assert!(accuracy(&preds[..3], &labels).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn summary_best_and_last10() {
        let mut m = RunMetrics::default();
        for e in 0..15 {
            m.records.push(record(e, e as f64 / 20.0, Some(e as f64 / 10.0)));
        }
        m.records[3].test_acc1 = 5.0;
        let s = m.summary().unwrap();
        assert_eq!(s.argbest_epoch, 3);
        assert_eq!(s.best_acc, 0.5 * (5.0 + 0.3));
        let expected: f64 = (5..15).map(|e| 0.75 * e as f64 / 10.0).sum::<f64>() / 10.0;
        assert!((s.last10_mean_acc - expected).abs() < 1e-12);
    }

    #[test]
    fn short_runs_use_all_epochs() {
        let m = RunMetrics {
            records: vec![record(0, 0.2, None), record(1, 0.4, None)],
        };
        let s = m.summary().unwrap();
        assert!((s.last10_mean_acc - 0.3).abs() < 1e-15);
        assert_eq!(RunMetrics::default().summary(), None);
    }

    #[test]
    fn csv_round_trip_with_empty_fields() {
        let mut m = RunMetrics::default();
        m.records.push(record(0, 0.25, None));
        let mut r = record(1, 0.5, Some(0.75));
        r.divergence = Some(0.125);
        r.clamp_events = 3;
        m.records.push(r);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&(METRICS_HEADER.join(",") + "\n0,0,,0.25,,,0,0,0,0,0,0\n")));
        assert_eq!(RunMetrics::read_csv(&buf[..]).unwrap(), m);
    }

    #[test]
    fn bins_two_points() {
        let bins =
            divergence_accuracy_bins_in_range(&[(0.1, 0.5), (0.9, 0.7)], 2, 0.0, 1.0).unwrap();
        assert_eq!(bins[0].mean_accuracy, Some(0.5));
        assert_eq!(bins[1].mean_accuracy, Some(0.7));
        let bins = divergence_accuracy_bins(&[(0.1, 0.5), (0.9, 0.7)], 2).unwrap();
        assert_eq!((bins[0].count, bins[1].count), (1, 1));
    }

    #[test]
    fn bins_single_value_and_empty_bins() {
        let h = [(0.3, 0.2), (0.3, 0.4), (0.3, 0.9)];
        let bins = divergence_accuracy_bins(&h, 4).unwrap();
        assert_eq!(bins[0].count, 3);
        assert!((bins[0].mean_accuracy.unwrap() - 0.5).abs() < 1e-15);
        assert!(bins[1..].iter().all(|b| b.count == 0 && b.mean_accuracy.is_none()));
        assert!(divergence_accuracy_bins(&h, 1).is_err());
        assert!(divergence_accuracy_bins(&[], 3).is_err());
    }

    #[test]
    fn box_stats_one_to_five() {
        let s = BoxStats::from_values(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max, s.mean), (1.0, 2.0, 3.0, 4.0, 5.0, 3.0));
    }

    #[test]
    fn identical_runs_have_zero_iqr() {
        let run = RunMetrics {
            records: (0..12).map(|e| record(e, 0.9, Some(0.9))).collect(),
        };
        let s = aggregate_trials(&[run.clone(), run]).unwrap();
        assert_eq!(s.iqr(), 0.0);
        assert_eq!(s.count, 20);
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]), None);
    }
}
