//! Label-noise transition matrices and seeded corruption.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Debug, thiserror::Error)]
pub enum NoiseError {
    #[error("noise ratio {0} outside [0, 1)")]
    Ratio(f64),
    #[error("need at least 2 classes, got {0}")]
    Classes(usize),
    #[error("label {label} at index {index} outside [0, {num_classes})")]
    LabelRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Pairflip,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Pairflip => "pairflip",
        })
    }
}

/// A row-stochastic `C x C` matrix with `T[i][j] = P(noisy = j | clean = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    kind: NoiseKind,
    ratio: f64,
    num_classes: usize,
    transition: Vec<f64>,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, ratio: f64, num_classes: usize) -> Result<Self, NoiseError> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(NoiseError::Ratio(ratio));
        }
        if num_classes < 2 {
            return Err(NoiseError::Classes(num_classes));
        }
        let c = num_classes;
        let mut t = vec![0.0; c * c];
        for i in 0..c {
            t[i * c + i] = 1.0 - ratio;
            match kind {
                NoiseKind::Symmetric => {
                    let off = ratio / (c - 1) as f64;
                    for j in (0..c).filter(|&j| j != i) {
                        t[i * c + j] = off;
                    }
                }
                NoiseKind::Pairflip => t[i * c + (i + 1) % c] = ratio,
            }
        }
        Ok(Self {
            kind,
            ratio,
            num_classes,
            transition: t,
        })
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, clean: usize) -> &[f64] {
        let c = self.num_classes;
        &self.transition[clean * c..(clean + 1) * c]
    }

    pub fn prob(&self, clean: usize, noisy: usize) -> f64 {
        self.transition[clean * self.num_classes + noisy]
    }
}

/// Clean and noisy labels side by side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionRecord {
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    pub corrupted: Vec<bool>,
}

impl CorruptionRecord {
    /// A record with no corruption.
    pub fn identity(labels: &[usize]) -> Self {
        Self {
            clean: labels.to_vec(),
            noisy: labels.to_vec(),
            corrupted: vec![false; labels.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn corrupted_count(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }

    pub fn realized_rate(&self) -> f64 {
        self.corrupted_count() as f64 / self.len().max(1) as f64
    }

    /// Row-major `C x C` counts of (clean, noisy) pairs.
    pub fn confusion(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes * num_classes];
        for (&c, &n) in self.clean.iter().zip(&self.noisy) {
            counts[c * num_classes + n] += 1;
        }
        counts
    }

    /// Writes `index,clean,noisy,corrupted` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), NoiseError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "clean", "noisy", "corrupted"])?;
        for i in 0..self.len() {
            w.write_record([
                i.to_string(),
                self.clean[i].to_string(),
                self.noisy[i].to_string(),
                u8::from(self.corrupted[i]).to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Draws each noisy label independently from the transition row of its clean label.
pub fn corrupt_labels(
    labels: &[usize],
    model: &NoiseModel,
    seed: u64,
) -> Result<CorruptionRecord, NoiseError> {
    let c = model.num_classes();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
        return Err(NoiseError::LabelRange {
            index,
            label,
            num_classes: c,
        });
    }
    let rows: Vec<WeightedIndex<f64>> = (0..c)
        .map(|i| WeightedIndex::new(model.row(i)).expect("rows are stochastic"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<usize> = labels.iter().map(|&y| rows[y].sample(&mut rng)).collect();
    let corrupted = labels.iter().zip(&noisy).map(|(a, b)| a != b).collect();
    Ok(CorruptionRecord {
        clean: labels.to_vec(),
        noisy,
        corrupted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquaredFit {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Observations in cells whose transition probability is zero.
    pub impossible: u64,
}

/// Pearson goodness-of-fit of the realized confusion counts against the
/// transition matrix, conditioned on the clean-class counts. Cells with zero
/// probability are excluded from the statistic; any mass observed there
/// forces `p_value = 0`.
pub fn chi_squared_fit(record: &CorruptionRecord, model: &NoiseModel) -> ChiSquaredFit {
    let c = model.num_classes();
    let counts = record.confusion(c);
    let mut statistic = 0.0;
    let mut dof = 0usize;
    let mut impossible = 0u64;
    for i in 0..c {
        let row = &counts[i * c..(i + 1) * c];
        let total: u64 = row.iter().sum();
        if total == 0 {
            continue;
        }
        let mut cells = 0usize;
        for (j, &observed) in row.iter().enumerate() {
            let p = model.prob(i, j);
            if p > 0.0 {
                let expected = total as f64 * p;
                statistic += (observed as f64 - expected).powi(2) / expected;
                cells += 1;
            } else {
                impossible += observed;
            }
        }
        dof += cells.saturating_sub(1);
    }
    let p_value = if impossible > 0 {
        0.0
    } else if dof == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(dof as f64).expect("positive dof");
        1.0 - dist.cdf(statistic)
    };
    ChiSquaredFit {
        statistic,
        dof,
        p_value,
        impossible,
    }
}
