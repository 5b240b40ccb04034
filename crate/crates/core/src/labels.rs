//! Trainable label distributions.
//!
//! Each example owns a row of free logits `y~`, initialized at `K * onehot`
//! of its noisy label. The label distribution `y^d` is the row softmax. The
//! store applies whatever logit-space gradient the trainer supplies; it does
//! not know which losses produced it.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::nn::{argmax, softmax_in_place};
use crate::noise::CorruptionRecord;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("label {label} at index {index} outside [0, {num_classes})")]
    LabelRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("example index {index} outside store of {len}")]
    Index { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid label store parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelStore {
    logits: Array2<f64>,
    noisy: Vec<usize>,
    scale: f64,
    step_size: f64,
}

/// Outcome of one label update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateReport {
    pub updated_rows: usize,
    /// Rows skipped because their gradient had a non-finite entry.
    pub refused_rows: usize,
}

impl LabelStore {
    pub fn new(
        noisy_labels: &[usize],
        num_classes: usize,
        scale: f64,
        step_size: f64,
    ) -> Result<Self, LabelError> {
        if num_classes < 2 {
            return Err(LabelError::Param(format!("num_classes = {num_classes}")));
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(LabelError::Param(format!("K = {scale}")));
        }
        if !(step_size.is_finite() && step_size >= 0.0) {
            return Err(LabelError::Param(format!("lambda = {step_size}")));
        }
        let mut logits = Array2::zeros((noisy_labels.len(), num_classes));
        for (index, &label) in noisy_labels.iter().enumerate() {
            if label >= num_classes {
                return Err(LabelError::LabelRange {
                    index,
                    label,
                    num_classes,
                });
            }
            logits[[index, label]] = scale;
        }
        Ok(Self {
            logits,
            noisy: noisy_labels.to_vec(),
            scale,
            step_size,
        })
    }

    pub fn len(&self) -> usize {
        self.noisy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.logits.view()
    }

    fn check_indices(&self, indices: &[usize]) -> Result<(), LabelError> {
        match indices.iter().find(|&&i| i >= self.len()) {
            Some(&index) => Err(LabelError::Index {
                index,
                len: self.len(),
            }),
            None => Ok(()),
        }
    }

    /// Softmax of the selected logit rows.
    pub fn distribution(&self, indices: &[usize]) -> Result<Array2<f64>, LabelError> {
        self.check_indices(indices)?;
        let mut out = Array2::zeros((indices.len(), self.num_classes()));
        for (mut dst, &i) in out.rows_mut().into_iter().zip(indices) {
            dst.assign(&self.logits.row(i));
            softmax_in_place(dst.as_slice_mut().expect("owned rows are contiguous"));
        }
        Ok(out)
    }

    /// `y~[indices] -= lambda * (grad1 + grad2)`, row by row. Rows whose
    /// summed gradient is non-finite are left untouched and counted.
    pub fn update(
        &mut self,
        indices: &[usize],
        grad1: ArrayView2<'_, f64>,
        grad2: ArrayView2<'_, f64>,
    ) -> Result<UpdateReport, LabelError> {
        self.check_indices(indices)?;
        let shape = (indices.len(), self.num_classes());
        if grad1.dim() != shape || grad2.dim() != shape {
            return Err(LabelError::Shape(format!(
                "gradients {:?} / {:?} for {} rows of {} classes",
                grad1.dim(),
                grad2.dim(),
                shape.0,
                shape.1
            )));
        }
        let mut report = UpdateReport::default();
        for (k, &i) in indices.iter().enumerate() {
            let (g1, g2) = (grad1.row(k), grad2.row(k));
            if g1.iter().chain(g2.iter()).any(|g| !g.is_finite()) {
                report.refused_rows += 1;
                continue;
            }
            for ((y, &a), &b) in self.logits.row_mut(i).iter_mut().zip(g1).zip(g2) {
                *y -= self.step_size * (a + b);
            }
            report.updated_rows += 1;
        }
        Ok(report)
    }

    /// `(argmax y^d, max y^d)` for every example; ties go to the lowest class.
    pub fn corrected(&self) -> Vec<(usize, f64)> {
        let all: Vec<usize> = (0..self.len()).collect();
        let dist = self.distribution(&all).expect("indices in range");
        dist.rows()
            .into_iter()
            .map(|r| {
                let j = argmax(r);
                (j, r[j])
            })
            .collect()
    }

    pub fn export_corrected(&self, record: &CorruptionRecord) -> Result<CorrectionTable, LabelError> {
        if record.len() != self.len() {
            return Err(LabelError::Shape(format!(
                "corruption record of {} for store of {}",
                record.len(),
                self.len()
            )));
        }
        let rows: Vec<CorrectionRow> = self
            .corrected()
            .into_iter()
            .enumerate()
            .map(|(index, (corrected, max_prob))| CorrectionRow {
                index,
                clean: record.clean[index],
                noisy: self.noisy[index],
                corrected,
                max_prob,
            })
            .collect();
        let summary = CorrectionSummary::from_rows(&rows, &record.corrupted);
        Ok(CorrectionTable { rows, summary })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionRow {
    pub index: usize,
    pub clean: usize,
    pub noisy: usize,
    pub corrected: usize,
    pub max_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub corrupted: usize,
    pub uncorrupted: usize,
    /// Fraction of corrupted examples whose corrected label equals the clean one.
    pub recovery_rate: f64,
    /// Fraction of uncorrupted examples whose corrected label is still clean.
    pub preservation_rate: f64,
    /// Fraction of all examples whose corrected label equals the clean one.
    pub label_accuracy: f64,
}

impl CorrectionSummary {
    fn from_rows(rows: &[CorrectionRow], corrupted: &[bool]) -> Self {
        let (mut n_bad, mut fixed, mut n_good, mut kept) = (0usize, 0usize, 0usize, 0usize);
        for (row, &bad) in rows.iter().zip(corrupted) {
            let ok = row.corrected == row.clean;
            if bad {
                n_bad += 1;
                fixed += usize::from(ok);
            } else {
                n_good += 1;
                kept += usize::from(ok);
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        Self {
            corrupted: n_bad,
            uncorrupted: n_good,
            recovery_rate: if n_bad == 0 { 0.0 } else { fixed as f64 / n_bad as f64 },
            preservation_rate: ratio(kept, n_good),
            label_accuracy: ratio(fixed + kept, rows.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionTable {
    pub rows: Vec<CorrectionRow>,
    pub summary: CorrectionSummary,
}

impl CorrectionTable {
    /// Writes `index,clean,noisy,corrected,max_prob` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LabelError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "clean", "noisy", "corrected", "max_prob"])?;
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.clean.to_string(),
                r.noisy.to_string(),
                r.corrected.to_string(),
                r.max_prob.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
