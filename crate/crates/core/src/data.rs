//! Dataset ingestion: bit-exact IDX files (MNIST) and seeded Gaussian blobs.
//!
//! Features are stored row-major as `f64`. MNIST pixels are scaled by `1/255`
//! with no further normalization.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// IDX magic for unsigned-byte, 3-dimensional data (images).
pub const IDX_IMAGES_U8: u32 = 0x0000_0803;
/// IDX magic for unsigned-byte, 1-dimensional data (labels).
pub const IDX_LABELS_U8: u32 = 0x0000_0801;
/// IDX magic for 64-bit float, 2-dimensional data (real-valued features).
pub const IDX_MATRIX_F64: u32 = 0x0000_0E02;

/// Standard MNIST file names, as distributed.
pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

const MNIST_CLASSES: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed magic 0x{found:08X} at byte offset {offset} (expected 0x{expected:08X})")]
    BadMagic {
        path: PathBuf,
        offset: usize,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated file at byte offset {offset} ({needed} more bytes required)")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },
    #[error("{path}: label count {labels} (byte offset {offset}) does not match image count {images}")]
    CountMismatch {
        path: PathBuf,
        offset: usize,
        images: usize,
        labels: usize,
    },
    #[error("{path}: label {label} at byte offset {offset} is outside [0, {num_classes})")]
    LabelRange {
        path: PathBuf,
        offset: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// A labelled classification dataset with dense real features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    split: SplitTag,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        split: SplitTag,
    ) -> Result<Self, DataError> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(DataError::Invalid(format!("empty feature matrix {n}x{d}")));
        }
        if labels.len() != n {
            return Err(DataError::Invalid(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(DataError::Invalid(format!("num_classes = {num_classes} < 2")));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {y} at row {i} outside [0, {num_classes})"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the selected rows into a contiguous batch matrix.
    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (mut dst, &i) in out.rows_mut().into_iter().zip(indices) {
            dst.assign(&self.features.row(i));
        }
        out
    }

    /// A new dataset made of the selected rows, in the given order.
    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Result<Dataset, DataError> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(DataError::Invalid(format!("index {bad} out of range")));
        }
        Dataset::new(
            self.gather(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            split,
        )
    }

    /// Replaces the label vector, keeping features. Used to train on noisy labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset, DataError> {
        Dataset::new(self.features.clone(), labels, self.num_classes, self.split)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct IdxCursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> IdxCursor<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self {
            path,
            bytes,
            offset: 0,
        }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], DataError> {
        let available = self.bytes.len() - self.offset;
        if available < len {
            return Err(DataError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                needed: len - available,
            });
        }
        let out = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, accepted: &[u32]) -> Result<u32, DataError> {
        let found = self.u32()?;
        if accepted.contains(&found) {
            Ok(found)
        } else {
            Err(DataError::BadMagic {
                path: self.path.to_path_buf(),
                offset: 0,
                expected: accepted[0],
                found,
            })
        }
    }
}

fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let mut cur = IdxCursor::new(path, bytes);
    cur.magic(&[IDX_LABELS_U8])?;
    let n = cur.u32()? as usize;
    Ok(cur.take(n)?.iter().map(|&b| b as usize).collect())
}

fn parse_features(path: &Path, bytes: &[u8], allow_f64: bool) -> Result<Array2<f64>, DataError> {
    let accepted: &[u32] = if allow_f64 {
        &[IDX_IMAGES_U8, IDX_MATRIX_F64]
    } else {
        &[IDX_IMAGES_U8]
    };
    let mut cur = IdxCursor::new(path, bytes);
    match cur.magic(accepted)? {
        IDX_IMAGES_U8 => {
            let n = cur.u32()? as usize;
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let d = rows * cols;
            let raw = cur.take(n * d)?;
            let values = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
            Array2::from_shape_vec((n, d), values)
                .map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
        }
        _ => {
            let n = cur.u32()? as usize;
            let d = cur.u32()? as usize;
            let raw = cur.take(n * d * 8)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Array2::from_shape_vec((n, d), values)
                .map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
        }
    }
}

fn assemble(
    images_path: &Path,
    labels_path: &Path,
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    split: SplitTag,
) -> Result<Dataset, DataError> {
    if features.nrows() != labels.len() {
        return Err(DataError::CountMismatch {
            path: labels_path.to_path_buf(),
            offset: 4,
            images: features.nrows(),
            labels: labels.len(),
        });
    }
    if let Some((i, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
        return Err(DataError::LabelRange {
            path: labels_path.to_path_buf(),
            offset: 8 + i,
            label,
            num_classes,
        });
    }
    Dataset::new(features, labels, num_classes, split)
        .map_err(|e| DataError::Invalid(format!("{}: {e}", images_path.display())))
}

/// Loads an MNIST image/label IDX pair. Images must be unsigned-byte 3-D
/// tensors; pixels are scaled into `[0, 1]`.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: SplitTag,
) -> Result<Dataset, DataError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let features = parse_features(ip, &read_file(ip)?, false)?;
    let labels = parse_labels(lp, &read_file(lp)?)?;
    assemble(ip, lp, features, labels, MNIST_CLASSES, split)
}

/// Loads the standard 60k/10k MNIST files from a directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset), DataError> {
    let dir = dir.as_ref();
    let train = load_mnist_idx(
        dir.join(MNIST_TRAIN_IMAGES),
        dir.join(MNIST_TRAIN_LABELS),
        SplitTag::Train,
    )?;
    let test = load_mnist_idx(
        dir.join(MNIST_TEST_IMAGES),
        dir.join(MNIST_TEST_LABELS),
        SplitTag::Test,
    )?;
    Ok((train, test))
}

/// Loads an IDX pair whose features are either unsigned-byte images or a
/// 64-bit float matrix. The class count is `max(label) + 1`, at least 2.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: SplitTag,
) -> Result<Dataset, DataError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let features = parse_features(ip, &read_file(ip)?, true)?;
    let labels = parse_labels(lp, &read_file(lp)?)?;
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    assemble(ip, lp, features, labels, num_classes, split)
}

fn is_byte_quantized(features: ArrayView2<'_, f64>) -> bool {
    features.iter().all(|&v| {
        let b = (v * 255.0).round();
        (0.0..=255.0).contains(&b) && b / 255.0 == v
    })
}

/// Writes a dataset as an IDX pair. Features that are exact multiples of
/// `1/255` in `[0, 1]` are written as unsigned-byte images (square when the
/// width is a perfect square, `1 x D` otherwise); anything else is written
/// as a big-endian `f64` matrix.
pub fn write_idx(
    dataset: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(), DataError> {
    if dataset.labels.iter().any(|&y| y > u8::MAX as usize) {
        return Err(DataError::Invalid("labels above 255 cannot be stored as IDX u8".into()));
    }
    let (n, d) = dataset.features.dim();
    let mut images = Vec::new();
    if is_byte_quantized(dataset.features()) {
        let side = (d as f64).sqrt().round() as usize;
        let (rows, cols) = if side * side == d { (side, side) } else { (1, d) };
        images.extend_from_slice(&IDX_IMAGES_U8.to_be_bytes());
        for dim in [n, rows, cols] {
            images.extend_from_slice(&(dim as u32).to_be_bytes());
        }
        images.extend(dataset.features.iter().map(|&v| (v * 255.0).round() as u8));
    } else {
        images.extend_from_slice(&IDX_MATRIX_F64.to_be_bytes());
        for dim in [n, d] {
            images.extend_from_slice(&(dim as u32).to_be_bytes());
        }
        for &v in dataset.features.iter() {
            images.extend_from_slice(&v.to_be_bytes());
        }
    }
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_U8.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(dataset.labels.iter().map(|&y| y as u8));

    for (path, bytes) in [(images_path.as_ref(), images), (labels_path.as_ref(), labels)] {
        let io = |source| DataError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
    }
    Ok(())
}

/// Deterministic class centers with pairwise Euclidean distance of at least 2.
///
/// With `dim >= num_classes` the centers are `sqrt(2) * e_k`. Otherwise they
/// sit on a circle in the first two coordinates with adjacent spacing 2, or
/// on a line with spacing 2 when `dim == 1`.
pub fn blob_centers(num_classes: usize, dim: usize) -> Array2<f64> {
    let mut centers = Array2::zeros((num_classes, dim));
    if dim >= num_classes {
        for k in 0..num_classes {
            centers[[k, k]] = std::f64::consts::SQRT_2;
        }
    } else if dim == 1 {
        let mid = (num_classes as f64 - 1.0) / 2.0;
        for k in 0..num_classes {
            centers[[k, 0]] = 2.0 * (k as f64 - mid);
        }
    } else {
        let radius = 1.0 / (std::f64::consts::PI / num_classes as f64).sin();
        for k in 0..num_classes {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / num_classes as f64;
            centers[[k, 0]] = radius * angle.cos();
            centers[[k, 1]] = radius * angle.sin();
        }
    }
    centers
}

/// Samples an isotropic Gaussian blob per class, class-major order.
pub fn make_blobs(
    num_per_class: usize,
    num_classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_classes < 2 || num_per_class == 0 || dim == 0 {
        return Err(DataError::Invalid(format!(
            "blobs need num_classes >= 2, num_per_class >= 1, dim >= 1 (got {num_classes}, {num_per_class}, {dim})"
        )));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(DataError::Invalid(format!("blob spread must be positive, got {spread}")));
    }
    let centers = blob_centers(num_classes, dim);
    let normal = Normal::new(0.0, spread).expect("validated spread");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_per_class * num_classes;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        for r in 0..num_per_class {
            let mut row = features.row_mut(k * num_per_class + r);
            for (x, &c) in row.iter_mut().zip(centers.row(k)) {
                *x = c + normal.sample(&mut rng);
            }
            labels.push(k);
        }
    }
    Dataset::new(features, labels, num_classes, SplitTag::Train)
}

/// Stratified index partition. Per-class train counts use the largest
/// remainder rule so the train total is exactly `round(N * train_fraction)`.
/// Both index lists are returned in ascending order.
pub fn split_indices(
    labels: &[usize],
    num_classes: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n = labels.len();
    let target = (n as f64 * train_fraction).round() as usize;
    if target == 0 || target == n {
        return Err(DataError::Invalid(format!(
            "train fraction {train_fraction} leaves an empty split of {n} examples"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| DataError::Invalid(format!("label {y} outside [0, {num_classes})")))?
            .push(i);
    }
    let exact: Vec<f64> = by_class
        .iter()
        .map(|c| c.len() as f64 * train_fraction)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = target.saturating_sub(counts.iter().sum());
    for &k in order.iter().cycle().take(num_classes * 2) {
        if remaining == 0 {
            break;
        }
        if counts[k] < by_class[k].len() {
            counts[k] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(n - target);
    for (members, &count) in by_class.iter_mut().zip(&counts) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..count]);
        test.extend_from_slice(&members[count..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified, seeded train/test split of a dataset.
pub fn split(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let (train, test) = split_indices(
        dataset.labels(),
        dataset.num_classes(),
        train_fraction,
        seed,
    )?;
    Ok((
        dataset.subset(&train, SplitTag::Train)?,
        dataset.subset(&test, SplitTag::Test)?,
    ))
}
