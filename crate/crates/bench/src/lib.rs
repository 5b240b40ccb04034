//! Shared fixtures for the benchmarks.

use noisylab::data::{make_blobs, split};
use noisylab::noise::{corrupt_labels, NoiseKind, NoiseModel};
use noisylab::{CorruptionRecord, Dataset, Strategy, TrainConfig};

/// MNIST-shaped noisy blobs: 784 features, 10 classes, 20% symmetric noise.
pub fn mnist_like(per_class: usize) -> (Dataset, Dataset, CorruptionRecord) {
    let all = make_blobs(per_class, 10, 784, 0.5, 1).expect("valid blob parameters");
    let (train, test) = split(&all, 5.0 / 6.0, 2).expect("valid split");
    let model = NoiseModel::new(NoiseKind::Symmetric, 0.2, 10).expect("valid noise");
    let record = corrupt_labels(train.labels(), &model, 3).expect("labels in range");
    (train, test, record)
}

/// One-epoch config with the MNIST batch size and hidden width.
pub fn one_epoch(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        epochs_total: 1,
        epochs_warmup: 0,
        epochs_finetune: 0,
        forget_rate: 0.2,
        ..TrainConfig::default()
    }
}
