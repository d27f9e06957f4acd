#![allow(dead_code)]

pub mod split;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use aftl::datasets::{
    encode_images, encode_labels, IdxImages, LabeledSample, LabeledShard, Partition, UnlabeledShard,
};
use aftl::experiment::{self, DATA_DIR_ENV, TRAIN_IMAGES, TRAIN_LABELS};
use aftl::federation::{Federation, RoundSchedule};
use aftl::nn::{Architecture, ModelSpec, Network};
use aftl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Random labeled shard of `n` images with shape `image`.
pub fn random_shard(
    n: usize,
    image: &[usize],
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> LabeledShard {
    let mut shape = vec![n];
    shape.extend_from_slice(image);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledShard::new(random_tensor(shape, rng), labels).unwrap()
}

pub fn random_partition(
    sources: usize,
    n: usize,
    image: &[usize],
    classes: usize,
    seed: u64,
) -> Partition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shards = (0..sources)
        .map(|_| random_shard(n, image, classes, &mut rng))
        .collect();
    let target = random_shard(n, image, classes, &mut rng);
    Partition {
        sources: shards,
        target_train: UnlabeledShard::new(target.images().clone()).unwrap(),
        target_test: random_shard(n, image, classes, &mut rng),
    }
}

/// Dense-extractor federation on random data.
pub fn tiny_federation(sources: usize, n: usize, schedule: RoundSchedule, seed: u64) -> Federation {
    let spec = ModelSpec::dense(&[1, 4, 4], 5, &[4], 3, sources).unwrap();
    Federation::new(
        &spec,
        random_partition(sources, n, &[1, 4, 4], 3, seed),
        schedule,
        seed,
    )
    .unwrap()
}

/// Mean cross-entropy over rows and `∂/∂logits`, via a straightforward
/// log-sum-exp written independently of the library.
pub fn oracle_ce(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.batch();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let w = logits.row_len();
    for (r, row) in logits.rows().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += -(row[labels[r]] - m - z.ln());
        for k in 0..w {
            let p = (row[k] - m).exp() / z;
            grad[r * w + k] = (p - if k == labels[r] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (
        loss / n as f64,
        Tensor::new(logits.shape().to_vec(), grad).unwrap(),
    )
}

/// `first` followed by `second` as one network.
pub fn chain(first: &Network, second: &Network) -> Network {
    let mut layers = first.architecture().layers().to_vec();
    layers.extend_from_slice(second.architecture().layers());
    let arch = Architecture::new(first.architecture().input_shape().to_vec(), layers).unwrap();
    let mut params = first.params().to_vec();
    params.extend_from_slice(second.params());
    Network::from_params(&arch, params).unwrap()
}

pub fn flat(tensors: &[Tensor]) -> Vec<f64> {
    tensors
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// MNIST training set, loaded once per test binary. `None` when the files are absent.
pub fn mnist() -> Option<&'static [LabeledSample]> {
    static DATA: OnceLock<Option<Vec<LabeledSample>>> = OnceLock::new();
    DATA.get_or_init(|| experiment::load_mnist(&data_dir()).ok())
        .as_deref()
}

/// Side length of the synthetic IDX images; also their class count.
pub const SYNTHETIC_SIDE: usize = 6;

/// Writes an IDX training pair of `count` images whose bright column encodes
/// the label.
pub fn write_synthetic_idx(dir: &Path, count: usize) {
    let side = SYNTHETIC_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pixels = Vec::with_capacity(count * side * side);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let y: u8 = rng.random_range(0..side as u8);
        for _ in 0..side {
            for c in 0..side {
                let base: u8 = if c == y as usize { 200 } else { 0 };
                pixels.push(base.saturating_add(rng.random_range(0..40)));
            }
        }
        labels.push(y);
    }
    let images = IdxImages {
        count,
        rows: side,
        cols: side,
        pixels,
    };
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join(TRAIN_IMAGES), encode_images(&images)).unwrap();
    fs::write(dir.join(TRAIN_LABELS), encode_labels(&labels)).unwrap();
}

/// Small dense-extractor run configuration over a synthetic dataset.
pub fn synthetic_config(data: &Path, rounds: usize) -> String {
    format!(
        "data_dir = {}\nextractor = dense\nclasses = {SYNTHETIC_SIDE}\nclients = 2\nsamples_per_client = 30\n\
         target_train = 20\ntarget_test = 20\nrounds = {rounds}\ninit_epochs = 1\nbatch_size = 10\n\
         features = 8\ndisc_hidden = 8\neta = 0.05\n",
        data.display()
    )
}
