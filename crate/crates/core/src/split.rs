//! Device/server split of one VIB replica.
//!
//! The device runs the encoder and ships `(mu, logvar)` plus labels to its
//! server. The server samples the latent, runs the decoder, computes the
//! loss, updates the decoder and returns the gradient of `-L_min` with
//! respect to `(mu, logvar)`. The device finishes backpropagation through
//! its encoder. The channel is ideal: messages arrive intact.

use crate::ledger::LedgerEntry;
use crate::node::NodeId;
use crate::numerics::{FlopTally, Matrix};
use crate::rng::{stream_rng, SimRng, Stream};
use crate::vib::{
    decode, decoder_backward, encode, encoder_backward, latent_grads, mi_lower_bits, mi_upper_bits,
    reparameterize, sample_noise, vib_loss, DecoderAdam, DecoderParams, EncoderAdam, EncoderParams,
    EncoderTrace, LatentStats, LossBreakdown, ModelParams, StepConfig, VibDims,
};
use crate::{Error, Result};

/// Identifies the batch a message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BatchTag {
    pub epoch: u64,
    pub batch: u64,
}

/// Device → server payload.
#[derive(Debug, Clone)]
pub struct LatentMessage {
    pub pair_id: usize,
    pub tag: BatchTag,
    pub stats: LatentStats,
    pub labels: Vec<u8>,
}

/// Server → device payload: `d(-L_min)/d mu` and `d(-L_min)/d logvar`.
#[derive(Debug, Clone)]
pub struct SplitGradMessage {
    pub pair_id: usize,
    pub tag: BatchTag,
    pub grad_mu: Matrix,
    pub grad_logvar: Matrix,
}

#[derive(Debug, Clone)]
struct PendingForward {
    tag: BatchTag,
    input: Matrix,
    trace: EncoderTrace,
    shape: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct DeviceSide {
    pub encoder: EncoderParams,
    optimizer: EncoderAdam,
    pending: Option<PendingForward>,
}

impl DeviceSide {
    pub fn new(encoder: EncoderParams) -> Self {
        let optimizer = EncoderAdam::new(&encoder);
        Self {
            encoder,
            optimizer,
            pending: None,
        }
    }

    /// Drops any forward pass still waiting for its gradient.
    pub fn discard_pending(&mut self) {
        self.pending = None;
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct ServerSide {
    pub decoder: DecoderParams,
    optimizer: DecoderAdam,
    noise: SimRng,
}

impl ServerSide {
    pub fn new(decoder: DecoderParams, noise: SimRng) -> Self {
        let optimizer = DecoderAdam::new(&decoder);
        Self {
            decoder,
            optimizer,
            noise,
        }
    }

    pub fn noise_rng(&self) -> &SimRng {
        &self.noise
    }

    /// Draws the next reparameterization noise matrix from this server's stream.
    pub fn draw_noise(&mut self, rows: usize, cols: usize) -> Matrix {
        sample_noise(&mut self.noise, rows, cols)
    }
}

/// One device paired with one server for the whole run.
#[derive(Debug, Clone)]
pub struct PairState {
    pub pair_id: usize,
    pub device: DeviceSide,
    pub server: ServerSide,
}

impl PairState {
    /// Fresh pair with weights drawn from the pair's device/server init streams.
    pub fn init(pair_id: usize, dims: &VibDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let encoder = EncoderParams::init(dims, &mut stream_rng(seed, Stream::DeviceInit(pair_id)));
        let decoder = DecoderParams::init(dims, &mut stream_rng(seed, Stream::ServerInit(pair_id)));
        Self::from_params(
            pair_id,
            ModelParams { encoder, decoder },
            stream_rng(seed, Stream::Noise(pair_id)),
        )
    }

    pub fn from_params(pair_id: usize, params: ModelParams, noise: SimRng) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            pair_id,
            device: DeviceSide::new(params.encoder),
            server: ServerSide::new(params.decoder, noise),
        })
    }

    pub fn device_node(&self) -> NodeId {
        NodeId::Device(self.pair_id)
    }

    pub fn server_node(&self) -> NodeId {
        NodeId::Server(self.pair_id)
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            encoder: self.device.encoder.clone(),
            decoder: self.server.decoder.clone(),
        }
    }
}

/// Runs the encoder on `x` and produces the message for the server.
///
/// Returns `None` when the device is paralyzed; it then sends nothing.
pub fn device_forward(
    pair: &mut PairState,
    x: Matrix,
    labels: Vec<u8>,
    tag: BatchTag,
    device_alive: bool,
    flops: &mut FlopTally,
) -> Result<Option<LatentMessage>> {
    if !device_alive {
        return Ok(None);
    }
    if x.rows() != labels.len() {
        return Err(Error::config("batch and label counts differ"));
    }
    let (stats, trace) = encode(&pair.device.encoder, &x, flops)?;
    pair.device.pending = Some(PendingForward {
        tag,
        input: x,
        trace,
        shape: stats.mu.shape(),
    });
    Ok(Some(LatentMessage {
        pair_id: pair.pair_id,
        tag,
        stats,
        labels,
    }))
}

/// Server half of a training step using caller-supplied noise.
pub fn server_step_with_noise(
    server: &mut ServerSide,
    msg: &LatentMessage,
    eps: &Matrix,
    cfg: &StepConfig,
    flops: &mut FlopTally,
) -> Result<(LossBreakdown, SplitGradMessage)> {
    let z = reparameterize(&msg.stats, eps, cfg.mode)?;
    let (log_q, trace) = decode(&server.decoder, &z, flops)?;
    let breakdown = vib_loss(
        mi_lower_bits(&log_q, &msg.labels)?,
        mi_upper_bits(&msg.stats),
        cfg.beta,
    );
    let (grads, g_z) = decoder_backward(&server.decoder, &trace, &log_q, &msg.labels, flops)?;
    let latent = latent_grads(&msg.stats, eps, &g_z, cfg.beta, cfg.mode)?;
    server
        .optimizer
        .step(&mut server.decoder, &grads, &cfg.adam)?;
    let reply = SplitGradMessage {
        pair_id: msg.pair_id,
        tag: msg.tag,
        grad_mu: latent.mu,
        grad_logvar: latent.logvar,
    };
    Ok((breakdown, reply))
}

/// Decodes, updates the decoder, and records the batch's MI bounds in the
/// server's ledger. Returns `None` when the server is paralyzed.
pub fn server_step(
    pair: &mut PairState,
    msg: &LatentMessage,
    cfg: &StepConfig,
    server_alive: bool,
    round: u64,
    ledger: &mut Vec<LedgerEntry>,
    flops: &mut FlopTally,
) -> Result<Option<(LossBreakdown, SplitGradMessage)>> {
    if !server_alive {
        return Ok(None);
    }
    if msg.pair_id != pair.pair_id {
        return Err(Error::Protocol(format!(
            "server {} received message for pair {}",
            pair.pair_id, msg.pair_id
        )));
    }
    let eps = pair
        .server
        .draw_noise(msg.stats.batch_size(), msg.stats.latent_dim());
    let (breakdown, reply) = server_step_with_noise(&mut pair.server, msg, &eps, cfg, flops)?;
    ledger.push(LedgerEntry {
        epoch: msg.tag.epoch,
        batch: msg.tag.batch,
        pair_id: pair.pair_id as u64,
        mi_upper_bits: breakdown.mi_upper_bits,
        mi_lower_bits: breakdown.mi_lower_bits,
        timestamp: round,
    });
    Ok(Some((breakdown, reply)))
}

/// Finishes backpropagation on the device and applies its Adam update.
pub fn device_backward(
    pair: &mut PairState,
    msg: &SplitGradMessage,
    cfg: &StepConfig,
    flops: &mut FlopTally,
) -> Result<()> {
    let pending = pair.device.pending.take().ok_or_else(|| {
        Error::Protocol(format!(
            "device {} has no forward pass awaiting gradients",
            pair.pair_id
        ))
    })?;
    if msg.tag != pending.tag || msg.pair_id != pair.pair_id {
        return Err(Error::Protocol(format!(
            "stale gradient for pair {} epoch {} batch {}; device expected epoch {} batch {}",
            msg.pair_id, msg.tag.epoch, msg.tag.batch, pending.tag.epoch, pending.tag.batch
        )));
    }
    if msg.grad_mu.shape() != pending.shape || msg.grad_logvar.shape() != pending.shape {
        return Err(Error::Protocol(
            "gradient shape does not match latent statistics".into(),
        ));
    }
    let latent = crate::vib::LatentGrads {
        mu: msg.grad_mu.clone(),
        logvar: msg.grad_logvar.clone(),
    };
    let grads = encoder_backward(
        &pair.device.encoder,
        &pending.input,
        &pending.trace,
        &latent,
        flops,
    )?;
    pair.device
        .optimizer
        .step(&mut pair.device.encoder, &grads, &cfg.adam)
}
