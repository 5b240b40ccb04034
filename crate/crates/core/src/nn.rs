//! A small fully-connected ReLU classifier with exact backpropagation.
//!
//! All parameters live in a single flat vector. Per-layer weight and bias
//! views borrow from that vector, so the structured and flat views always
//! observe the same values. Layer `l` stores its `fan_in x fan_out` weight
//! matrix row-major, followed by its bias.

use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient entry at parameter {index}; step refused")]
    NonFiniteGradient { index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("owned rows are contiguous"));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardRecord {
    input: Array2<f64>,
    hidden: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

impl ForwardRecord {
    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.rows().into_iter().map(argmax).collect()
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// All-zero parameters. `dims` is `[input, hidden..., classes]`.
    pub fn zeros(dims: &[usize]) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::Shape(format!("invalid layer dims {dims:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
        })
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self, NnError> {
        let mut model = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let len = w[0] * w[1] + w[1];
            for p in &mut model.params[offset..offset + len] {
                *p = rng.random_range(-bound..bound);
            }
            offset += len;
        }
        Ok(model)
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self, NnError> {
        let mut model = Self::zeros(dims)?;
        if params.len() != model.params.len() {
            return Err(NnError::Shape(format!(
                "{} parameters supplied for dims {dims:?} ({} expected)",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.dims[..=layer])
    }

    /// Weight (`fan_in x fan_out`) and bias views of one layer.
    pub fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fi, fo) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = self.params[off..].split_at(fi * fo);
        (
            ArrayView2::from_shape((fi, fo), w).expect("layer layout"),
            ArrayView1::from(&rest[..fo]),
        )
    }

    pub fn layer_mut(&mut self, layer: usize) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
        let (fi, fo) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = self.params[off..].split_at_mut(fi * fo);
        (
            ArrayViewMut2::from_shape((fi, fo), w).expect("layer layout"),
            ArrayViewMut1::from(&mut rest[..fo]),
        )
    }

    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<ForwardRecord, NnError> {
        if batch.ncols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "batch width {} but model input is {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let mut hidden = Vec::with_capacity(self.num_layers() - 1);
        let mut current = batch.to_owned();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let mut z = current.dot(&w);
            z += &b;
            if l + 1 < self.num_layers() {
                z.mapv_inplace(|v| v.max(0.0));
                hidden.push(z.clone());
            }
            current = z;
        }
        let probs = softmax_rows(current.view());
        Ok(ForwardRecord {
            input: batch.to_owned(),
            hidden,
            logits: current,
            probs,
        })
    }

    /// Gradient over the flat parameter vector of a scalar loss whose
    /// gradient with respect to the logits is `dlogits`.
    pub fn backward(
        &self,
        record: &ForwardRecord,
        dlogits: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>, NnError> {
        if dlogits.dim() != record.logits.dim()
            || record.logits.ncols() != self.num_classes()
            || record.input.ncols() != self.input_dim()
            || record.hidden.len() + 1 != self.num_layers()
        {
            return Err(NnError::Shape(format!(
                "logit gradient {:?} vs record {:?} for dims {:?}",
                dlogits.dim(),
                record.logits.dim(),
                self.dims
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = dlogits.to_owned();
        for l in (0..self.num_layers()).rev() {
            let prev = if l == 0 {
                &record.input
            } else {
                &record.hidden[l - 1]
            };
            let (fi, fo) = (self.dims[l], self.dims[l + 1]);
            let off = self.layer_offset(l);
            let dw = prev.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            grad[off..off + fi * fo]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(g, &v)| *g = v);
            grad[off + fi * fo..off + fi * fo + fo]
                .iter_mut()
                .zip(db.iter())
                .for_each(|(g, &v)| *g = v);
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut next = delta.dot(&w.t());
                next.zip_mut_with(prev, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = next;
            }
        }
        Ok(grad)
    }

    /// Writes the checkpoint header line followed by little-endian `f64` parameters.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<(), NnError> {
        let dims: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "NOISYLAB-CKPT v1 {} {}",
            dims.join(","),
            self.params.len()
        )?;
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<Self, NnError> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let fields: Vec<&str> = header.trim_end_matches('\n').split(' ').collect();
        let [magic, version, dims, count] = fields[..] else {
            return Err(NnError::Checkpoint(format!("bad header {header:?}")));
        };
        if magic != "NOISYLAB-CKPT" || version != "v1" {
            return Err(NnError::Checkpoint(format!("unsupported header {header:?}")));
        }
        let dims: Vec<usize> = dims
            .split(',')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| NnError::Checkpoint(format!("layer dims: {e}")))?;
        let count: usize = count
            .parse()
            .map_err(|e| NnError::Checkpoint(format!("param count: {e}")))?;
        let mut bytes = vec![0u8; count * 8];
        input
            .read_exact(&mut bytes)
            .map_err(|e| NnError::Checkpoint(format!("parameter payload: {e}")))?;
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_params(&dims, params)
    }
}

/// Euclidean norm of the flat parameter difference.
pub fn param_distance(a: &Mlp, b: &Mlp) -> Result<f64, NnError> {
    if a.dims != b.dims {
        return Err(NnError::Shape(format!(
            "distance between dims {:?} and {:?}",
            a.dims, b.dims
        )));
    }
    Ok(a.params
        .iter()
        .zip(&b.params)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64, config: AdamConfig) -> Self {
        Self {
            config,
            learning_rate,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), NnError> {
        if grad.len() != self.m.len() || params.len() != self.m.len() {
            return Err(NnError::Shape(format!(
                "adam state for {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient { index });
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let lr = self.learning_rate;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
