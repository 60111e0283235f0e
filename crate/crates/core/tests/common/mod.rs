#![allow(dead_code)]

use std::io::Read;
use std::path::PathBuf;

use bvib_core::attack::{AttackConfig, TargetPolicy};
use bvib_core::data::{self, Dataset, Split, SyntheticSpec};
use bvib_core::numerics::{FlopTally, Matrix};
use bvib_core::orchestrator::{DatasetSource, ExperimentConfig, Mode};
use bvib_core::rng::{stream_rng, Stream};
use bvib_core::vib::{sample_noise, DecoderParams, EncoderParams, ModelParams, VibDims};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

/// A random small model with one batch of inputs, labels and noise.
pub struct Instance {
    pub dims: VibDims,
    pub params: ModelParams,
    pub x: Matrix,
    pub labels: Vec<u8>,
    pub eps: Matrix,
}

pub fn random_instance(seed: u64, max_latent: usize, max_batch: usize) -> Instance {
    let mut rng = stream_rng(seed, Stream::SyntheticSamples);
    let dims = VibDims {
        input: rng.random_range(2..=9),
        trunk: rng.random_range(2..=8),
        latent: rng.random_range(1..=max_latent),
        decoder_hidden: rng.random_range(2..=8),
        classes: rng.random_range(2..=10),
    };
    let m = rng.random_range(1..=max_batch);
    let params = ModelParams {
        encoder: EncoderParams::init(&dims, &mut stream_rng(seed, Stream::DeviceInit(0))),
        decoder: DecoderParams::init(&dims, &mut stream_rng(seed, Stream::ServerInit(0))),
    };
    let x = Matrix::from_vec(
        m,
        dims.input,
        (0..m * dims.input).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap();
    let labels = (0..m)
        .map(|_| rng.random_range(0..dims.classes as u8))
        .collect();
    let eps = sample_noise(&mut rng, m, dims.latent);
    Instance {
        dims,
        params,
        x,
        labels,
        eps,
    }
}

pub fn no_flops() -> FlopTally {
    FlopTally::default()
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mnist-digits")
}

fn gunzip(name: &str) -> Vec<u8> {
    let file = std::fs::File::open(fixture_dir().join(name)).expect("fixture present");
    let mut out = Vec::new();
    GzDecoder::new(file)
        .read_to_end(&mut out)
        .expect("valid gzip");
    out
}

/// The 10,000 real MNIST digits shipped with the tests.
pub fn mnist_digits() -> Dataset {
    let images = gunzip("digits-images-idx3-ubyte.gz");
    let labels = gunzip("digits-labels-idx1-ubyte.gz");
    data::parse_idx(&images, &labels, Split::Train).expect("fixture parses")
}

/// Seeded split of the digit fixture into train and held-out test sets.
pub fn mnist_split(train: usize, seed: u64) -> (Dataset, Dataset) {
    let all = mnist_digits();
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Sharding));
    (
        all.select(&idx[..train], Split::Train),
        all.select(&idx[train..], Split::Test),
    )
}

/// One pair on 500 synthetic samples per class, latent 16, trunk 64.
pub fn desk_synthetic(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        epochs: 30,
        batches: 50,
        pairs: 1,
        latent_dim: 16,
        trunk_dim: 64,
        beta: 1e-3,
        dataset: DatasetSource::Synthetic {
            spec: SyntheticSpec::default(),
            train_per_class: 500,
            test_per_class: 100,
        },
        early_stop: None,
        seed,
        ..ExperimentConfig::default()
    }
}

/// One pair, latent 64, trunk 256, 20 epochs; the data comes from
/// [`mnist_split`].
pub fn desk_mnist(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        epochs: 20,
        batches: 80,
        pairs: 1,
        latent_dim: 64,
        trunk_dim: 256,
        beta: 1e-3,
        dataset: DatasetSource::Mnist {
            dir: fixture_dir(),
            train_limit: None,
            test_limit: None,
        },
        early_stop: None,
        seed,
        ..ExperimentConfig::default()
    }
}

/// Ten pairs on small synthetic shards, used for the attack sweeps.
pub fn attack_sweep(
    seed: u64,
    mode: Mode,
    malicious: usize,
    policy: TargetPolicy,
) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        epochs: 15,
        batches: 10,
        pairs: 10,
        latent_dim: 16,
        trunk_dim: 64,
        decoder_hidden: 64,
        dataset: DatasetSource::Synthetic {
            spec: SyntheticSpec::default(),
            train_per_class: 200,
            test_per_class: 50,
        },
        attack: AttackConfig {
            num_malicious: malicious,
            target_policy: policy,
            ..AttackConfig::default()
        },
        early_stop: None,
        seed,
        ..ExperimentConfig::default()
    }
}

/// Means of the first and last quarter of a series.
pub fn quartile_means(xs: &[f64]) -> (f64, f64) {
    let q = (xs.len() / 4).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&xs[..q]), mean(&xs[xs.len() - q..]))
}
