//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's forward pass or loss code.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use noisylab::data::{make_blobs, split};
use noisylab::noise::{corrupt_labels, CorruptionRecord, NoiseKind, NoiseModel};
use noisylab::{Dataset, LossWeights, Mlp};

/// Central differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest per-coordinate relative error. Coordinates where both values
/// are below `1e-8` in magnitude are compared against that floor.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Logits of a ReLU MLP whose flat parameters are laid out per layer as a
/// row-major `fan_in x fan_out` weight block followed by the bias.
pub fn mlp_logits(dims: &[usize], params: &[f64], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let mut a = row.clone();
            let mut off = 0;
            for l in 0..dims.len() - 1 {
                let (fi, fo) = (dims[l], dims[l + 1]);
                let w = &params[off..off + fi * fo];
                let b = &params[off + fi * fo..off + fi * fo + fo];
                off += fi * fo + fo;
                let mut z = b.to_vec();
                for (i, &ai) in a.iter().enumerate() {
                    for (j, zj) in z.iter_mut().enumerate() {
                        *zj += ai * w[i * fo + j];
                    }
                }
                if l + 2 < dims.len() {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                a = z;
            }
            a
        })
        .collect()
}

pub fn mlp_probs(dims: &[usize], params: &[f64], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    mlp_logits(dims, params, x).iter().map(|z| softmax(z)).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.ln()))
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|a| **a > 0.0).map(|a| a * a.ln()).sum::<f64>()
}

pub fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean-over-rows loss `l_c + alpha l_o + beta l_e` written straight from
/// the definitions, from prediction rows and label-logit rows.
pub fn label_loss(probs: &[Vec<f64>], ytilde: &[Vec<f64>], noisy: &[usize], w: &LossWeights) -> f64 {
    let b = probs.len() as f64;
    probs
        .iter()
        .zip(ytilde)
        .zip(noisy)
        .map(|((p, yt), &y)| {
            let q = softmax(yt);
            kl(p, &q) - w.alpha * q[y].ln() + w.beta * entropy(p)
        })
        .sum::<f64>()
        / b
}

/// A small network pair with a batch, noisy labels and label logits.
pub struct Toy {
    pub dims: Vec<usize>,
    pub params: Vec<f64>,
    pub peer: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub noisy: Vec<usize>,
    pub ytilde: Vec<Vec<f64>>,
}

impl Toy {
    pub fn new(seed: u64) -> Self {
        let dims = vec![3, 4, 3];
        let n: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |k: usize, s: f64| -> Vec<f64> { (0..k).map(|_| rng.random_range(-s..s)).collect() };
        let params = draw(n, 1.0);
        let peer = draw(n, 1.0);
        let x: Vec<Vec<f64>> = (0..4).map(|_| draw(3, 2.0)).collect();
        let ytilde: Vec<Vec<f64>> = (0..4).map(|_| draw(3, 2.0)).collect();
        let noisy = vec![0, 2, 1, 2];
        Self {
            dims,
            params,
            peer,
            x,
            noisy,
            ytilde,
        }
    }

    pub fn model(&self) -> Mlp {
        Mlp::from_params(&self.dims, self.params.clone()).unwrap()
    }

    pub fn x_array(&self) -> Array2<f64> {
        let c = self.x[0].len();
        Array2::from_shape_fn((self.x.len(), c), |(i, j)| self.x[i][j])
    }

    pub fn label_dist(&self) -> Array2<f64> {
        let c = self.ytilde[0].len();
        let rows: Vec<Vec<f64>> = self.ytilde.iter().map(|r| softmax(r)).collect();
        Array2::from_shape_fn((rows.len(), c), |(i, j)| rows[i][j])
    }

    /// Full network loss with the co-regularizer, as a function of the
    /// network's own parameters.
    pub fn eq8(&self, params: &[f64], w: &LossWeights) -> f64 {
        let probs = mlp_probs(&self.dims, params, &self.x);
        label_loss(&probs, &self.ytilde, &self.noisy, w) + w.xi * norm_diff(params, &self.peer).powf(w.mu)
    }
}

pub fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn unflatten(v: &[f64], cols: usize) -> Vec<Vec<f64>> {
    v.chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Noisy Gaussian blobs: (train, test, corruption record of the train labels).
pub fn noisy_blobs(
    per_class: usize,
    classes: usize,
    dim: usize,
    ratio: f64,
    seed: u64,
) -> (Dataset, Dataset, CorruptionRecord) {
    let all = make_blobs(per_class, classes, dim, 0.5, seed).unwrap();
    let (train, test) = split(&all, 0.75, seed + 1).unwrap();
    let model = NoiseModel::new(NoiseKind::Symmetric, ratio, classes).unwrap();
    let record = corrupt_labels(train.labels(), &model, seed + 2).unwrap();
    (train, test, record)
}
