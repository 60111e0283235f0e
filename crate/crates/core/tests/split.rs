use bvib_core::numerics::{FlopTally, Matrix};
use bvib_core::rng::{stream_rng, Stream};
use bvib_core::split::*;
use bvib_core::vib::VibModel;
use bvib_core::vib::{
    sample_noise, DecoderParams, EncoderParams, ModelParams, StepConfig, VibDims,
};
use bvib_core::Error;

fn dims() -> VibDims {
    VibDims {
        input: 6,
        trunk: 5,
        latent: 3,
        decoder_hidden: 4,
        classes: 3,
    }
}

fn batch() -> (Matrix, Vec<u8>) {
    let x = Matrix::from_rows(&[
        vec![0.1, 0.9, 0.0, 0.3, 0.5, 0.2],
        vec![0.7, 0.2, 0.4, 0.0, 0.8, 0.6],
    ])
    .unwrap();
    (x, vec![2, 0])
}

const TAG: BatchTag = BatchTag { epoch: 0, batch: 0 };

#[test]
fn paralyzed_device_sends_nothing() {
    let mut pair = PairState::init(0, &dims(), 1).unwrap();
    let (x, y) = batch();
    let out = device_forward(&mut pair, x, y, TAG, false, &mut FlopTally::default()).unwrap();
    assert!(out.is_none());
    assert!(!pair.device.has_pending());
}

#[test]
fn forward_message_has_one_row_per_sample() {
    let mut pair = PairState::init(0, &dims(), 1).unwrap();
    let (x, y) = batch();
    let msg = device_forward(&mut pair, x, y, TAG, true, &mut FlopTally::default())
        .unwrap()
        .unwrap();
    assert_eq!(msg.stats.batch_size(), 2);
    assert_eq!(msg.stats.latent_dim(), 3);
}

#[test]
fn zero_encoder_message() {
    let d = dims();
    let params = ModelParams {
        encoder: EncoderParams::zeros(&d),
        decoder: DecoderParams::zeros(&d),
    };
    let mut pair = PairState::from_params(0, params, stream_rng(0, Stream::Noise(0))).unwrap();
    let (x, y) = batch();
    let msg = device_forward(&mut pair, x, y, TAG, true, &mut FlopTally::default())
        .unwrap()
        .unwrap();
    assert!(msg.stats.mu.as_slice().iter().all(|&v| v == 0.0));
    assert!(msg.stats.logvar.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn server_step_records_ledger_entry() {
    let mut pair = PairState::init(3, &dims(), 1).unwrap();
    let (x, y) = batch();
    let tag = BatchTag { epoch: 2, batch: 5 };
    let msg = device_forward(&mut pair, x, y, tag, true, &mut FlopTally::default())
        .unwrap()
        .unwrap();
    let mut ledger = Vec::new();
    let (b, _) = server_step(
        &mut pair,
        &msg,
        &StepConfig::default(),
        true,
        17,
        &mut ledger,
        &mut FlopTally::default(),
    )
    .unwrap()
    .unwrap();
    assert_eq!(ledger.len(), 1);
    let e = &ledger[0];
    assert_eq!((e.epoch, e.batch, e.pair_id, e.timestamp), (2, 5, 3, 17));
    assert_eq!(e.mi_upper_bits, b.mi_upper_bits);
    assert_eq!(e.mi_lower_bits, b.mi_lower_bits);
}

#[test]
fn paralyzed_server_does_not_process() {
    let mut pair = PairState::init(0, &dims(), 1).unwrap();
    let (x, y) = batch();
    let msg = device_forward(&mut pair, x, y, TAG, true, &mut FlopTally::default())
        .unwrap()
        .unwrap();
    let before = pair.server.decoder.clone();
    let mut ledger = Vec::new();
    let out = server_step(
        &mut pair,
        &msg,
        &StepConfig::default(),
        false,
        0,
        &mut ledger,
        &mut FlopTally::default(),
    )
    .unwrap();
    assert!(out.is_none());
    assert!(ledger.is_empty());
    assert_eq!(pair.server.decoder, before);
}

#[test]
fn server_step_is_deterministic() {
    let run = || {
        let mut pair = PairState::init(0, &dims(), 9).unwrap();
        let (x, y) = batch();
        let msg = device_forward(&mut pair, x, y, TAG, true, &mut FlopTally::default())
            .unwrap()
            .unwrap();
        server_step(
            &mut pair,
            &msg,
            &StepConfig::default(),
            true,
            0,
            &mut Vec::new(),
            &mut FlopTally::default(),
        )
        .unwrap()
        .unwrap()
        .0
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_gradient_message_leaves_encoder_unchanged() {
    let mut pair = PairState::init(0, &dims(), 1).unwrap();
    let (x, y) = batch();
    let before = pair.device.encoder.clone();
    device_forward(&mut pair, x, y, TAG, true, &mut FlopTally::default()).unwrap();
    let msg = SplitGradMessage {
        pair_id: 0,
        tag: TAG,
        grad_mu: Matrix::zeros(2, 3),
        grad_logvar: Matrix::zeros(2, 3),
    };
    device_backward(
        &mut pair,
        &msg,
        &StepConfig::default(),
        &mut FlopTally::default(),
    )
    .unwrap();
    assert_eq!(pair.device.encoder, before);
}

#[test]
fn mismatched_batch_index_is_protocol_error() {
    let mut pair = PairState::init(0, &dims(), 1).unwrap();
    let (x, y) = batch();
    device_forward(&mut pair, x, y, TAG, true, &mut FlopTally::default()).unwrap();
    let msg = SplitGradMessage {
        pair_id: 0,
        tag: BatchTag { epoch: 0, batch: 1 },
        grad_mu: Matrix::zeros(2, 3),
        grad_logvar: Matrix::zeros(2, 3),
    };
    let err = device_backward(
        &mut pair,
        &msg,
        &StepConfig::default(),
        &mut FlopTally::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}

#[test]
fn backward_without_forward_is_protocol_error() {
    let mut pair = PairState::init(0, &dims(), 1).unwrap();
    let msg = SplitGradMessage {
        pair_id: 0,
        tag: TAG,
        grad_mu: Matrix::zeros(2, 3),
        grad_logvar: Matrix::zeros(2, 3),
    };
    assert!(matches!(
        device_backward(
            &mut pair,
            &msg,
            &StepConfig::default(),
            &mut FlopTally::default()
        ),
        Err(Error::Protocol(_))
    ));
}

#[test]
fn split_step_equals_monolithic_step() {
    let d = dims();
    let mut pair = PairState::init(0, &d, 4).unwrap();
    let mut mono = VibModel::new(pair.params()).unwrap();
    let cfg = StepConfig {
        beta: 0.05,
        ..StepConfig::default()
    };
    let (x, y) = batch();
    let eps = sample_noise(&mut pair.server.noise_rng().clone(), 2, 3);

    let mono_grads = mono
        .gradients(&x, &y, &eps, &cfg, &mut FlopTally::default())
        .unwrap();
    mono.train_step(&x, &y, &eps, &cfg, &mut FlopTally::default())
        .unwrap();

    let msg = device_forward(&mut pair, x, y, TAG, true, &mut FlopTally::default())
        .unwrap()
        .unwrap();
    let (_, reply) = server_step(
        &mut pair,
        &msg,
        &cfg,
        true,
        0,
        &mut Vec::new(),
        &mut FlopTally::default(),
    )
    .unwrap()
    .unwrap();
    assert_eq!(reply.grad_mu, mono_grads.latent.mu);
    assert_eq!(reply.grad_logvar, mono_grads.latent.logvar);
    device_backward(&mut pair, &reply, &cfg, &mut FlopTally::default()).unwrap();
    assert_eq!(pair.params(), mono.params);
}
