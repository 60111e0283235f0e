//! Variational information bottleneck encoder/decoder pair.
//!
//! The encoder maps an input to a diagonal Gaussian `N(mu, diag(exp(logvar)))`
//! through a ReLU trunk and two linear heads. The decoder classifies a
//! reparameterized sample. Both mutual-information bounds are reported in
//! bits, averaged per sample:
//!
//! - `mi_upper_bits`: mean `KL(N(mu, sigma^2) || N(0, I))`, the upper bound on
//!   `I(Z; X)` under a fixed standard-normal marginal.
//! - `mi_lower_bits`: mean `log2 q(y | z)` of the true label, the lower bound
//!   on `I(Z; Y)` up to the constant `H(Y)`.
//!
//! The optimizer minimizes `-L_min = -mi_lower + beta * mi_upper`.

use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    relu_backward_matrix, relu_matrix, softmax_log_probs_matrix, AdamHyper, Dense, DenseAdam,
    DenseGrads, FlopTally, Matrix,
};
use crate::{Error, Result};

/// Layer widths of the encoder (`input -> trunk -> 2 x latent`) and decoder
/// (`latent -> decoder_hidden -> classes`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VibDims {
    pub input: usize,
    pub trunk: usize,
    pub latent: usize,
    pub decoder_hidden: usize,
    pub classes: usize,
}

impl Default for VibDims {
    fn default() -> Self {
        Self {
            input: 784,
            trunk: 1024,
            latent: 512,
            decoder_hidden: 784,
            classes: 10,
        }
    }
}

impl VibDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.input,
            self.trunk,
            self.latent,
            self.decoder_hidden,
            self.classes,
        ];
        if all.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "all layer widths must be positive: {self:?}"
            )));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        Ok(())
    }

    /// Forward MACs per sample on the device side (trunk plus both heads).
    pub fn encoder_macs(&self) -> u64 {
        (self.input * self.trunk + 2 * self.trunk * self.latent) as u64
    }

    /// Encoder MACs if a single head of width `latent` were used.
    pub fn single_head_encoder_macs(&self) -> u64 {
        (self.input * self.trunk + self.trunk * self.latent) as u64
    }

    pub fn decoder_macs(&self) -> u64 {
        (self.latent * self.decoder_hidden + self.decoder_hidden * self.classes) as u64
    }

    pub fn device_share(&self) -> f64 {
        self.encoder_macs() as f64 / (self.encoder_macs() + self.decoder_macs()) as f64
    }

    pub fn single_head_device_share(&self) -> f64 {
        let e = self.single_head_encoder_macs() as f64;
        e / (e + self.decoder_macs() as f64)
    }
}

/// How the server turns `(mu, logvar, eps)` into a latent sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReparamMode {
    /// `z = mu + eps * sigma`, so `z ~ N(mu, sigma^2)`.
    #[default]
    StdDev,
    /// `z = mu + eps * sigma^2`. Scales the noise by the variance instead;
    /// kept only to compare against that reading of the sampler.
    Variance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub trunk: Dense,
    pub mu_head: Dense,
    pub logvar_head: Dense,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(dims: &VibDims, rng: &mut R) -> Self {
        Self {
            trunk: Dense::he_uniform(dims.input, dims.trunk, rng),
            mu_head: Dense::he_uniform(dims.trunk, dims.latent, rng),
            logvar_head: Dense::he_uniform(dims.trunk, dims.latent, rng),
        }
    }

    pub fn zeros(dims: &VibDims) -> Self {
        Self {
            trunk: Dense::zeros(dims.input, dims.trunk),
            mu_head: Dense::zeros(dims.trunk, dims.latent),
            logvar_head: Dense::zeros(dims.trunk, dims.latent),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.out_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub hidden: Dense,
    pub output: Dense,
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(dims: &VibDims, rng: &mut R) -> Self {
        Self {
            hidden: Dense::he_uniform(dims.latent, dims.decoder_hidden, rng),
            output: Dense::he_uniform(dims.decoder_hidden, dims.classes, rng),
        }
    }

    pub fn zeros(dims: &VibDims) -> Self {
        Self {
            hidden: Dense::zeros(dims.latent, dims.decoder_hidden),
            output: Dense::zeros(dims.decoder_hidden, dims.classes),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.output.out_dim()
    }
}

/// Encoder and decoder weights of one model replica.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.mu_head.out_dim() != e.logvar_head.out_dim() || e.mu_head.in_dim() != e.trunk.out_dim()
        {
            return Err(Error::config("encoder heads disagree"));
        }
        if e.latent_dim() != self.decoder.latent_dim() {
            return Err(Error::config(format!(
                "encoder latent width {} != decoder input width {}",
                e.latent_dim(),
                self.decoder.latent_dim()
            )));
        }
        if self.decoder.hidden.out_dim() != self.decoder.output.in_dim() {
            return Err(Error::config("decoder layers disagree"));
        }
        Ok(())
    }
}

/// Per-sample Gaussian parameters sent from device to server.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mu: Matrix,
    pub logvar: Matrix,
}

impl LatentStats {
    pub fn new(mu: Matrix, logvar: Matrix) -> Result<Self> {
        if mu.shape() != logvar.shape() {
            return Err(Error::config("mu and logvar shapes differ"));
        }
        if !mu.is_finite()
            || !logvar.is_finite()
            || logvar.as_slice().iter().any(|lv| !lv.exp().is_finite())
        {
            return Err(Error::numeric("non-finite latent statistics"));
        }
        Ok(Self { mu, logvar })
    }

    pub fn batch_size(&self) -> usize {
        self.mu.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn variance(&self) -> Matrix {
        self.logvar.map(f64::exp)
    }
}

/// Activations the encoder keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    trunk_pre: Matrix,
    trunk_act: Matrix,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    z: Matrix,
    hidden_pre: Matrix,
    hidden_act: Matrix,
}

pub fn encode(
    enc: &EncoderParams,
    x: &Matrix,
    flops: &mut FlopTally,
) -> Result<(LatentStats, EncoderTrace)> {
    let trunk_pre = enc.trunk.forward(x, flops)?;
    let trunk_act = relu_matrix(&trunk_pre);
    let mu = enc.mu_head.forward(&trunk_act, flops)?;
    let logvar = enc.logvar_head.forward(&trunk_act, flops)?;
    let stats = LatentStats::new(mu, logvar)?;
    Ok((
        stats,
        EncoderTrace {
            trunk_pre,
            trunk_act,
        },
    ))
}

/// Standard-normal noise of the given shape.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape by construction")
}

pub fn reparameterize(stats: &LatentStats, eps: &Matrix, mode: ReparamMode) -> Result<Matrix> {
    if eps.shape() != stats.mu.shape() {
        return Err(Error::config(format!(
            "noise shape {:?} does not match latent shape {:?}",
            eps.shape(),
            stats.mu.shape()
        )));
    }
    let mut z = stats.mu.clone();
    for ((zi, &lv), &e) in z
        .as_mut_slice()
        .iter_mut()
        .zip(stats.logvar.as_slice())
        .zip(eps.as_slice())
    {
        *zi += e * scale(lv, mode);
    }
    Ok(z)
}

#[inline]
fn scale(logvar: f64, mode: ReparamMode) -> f64 {
    match mode {
        ReparamMode::StdDev => (0.5 * logvar).exp(),
        ReparamMode::Variance => logvar.exp(),
    }
}

pub fn decode(
    dec: &DecoderParams,
    z: &Matrix,
    flops: &mut FlopTally,
) -> Result<(Matrix, DecoderTrace)> {
    let hidden_pre = dec.hidden.forward(z, flops)?;
    let hidden_act = relu_matrix(&hidden_pre);
    let logits = dec.output.forward(&hidden_act, flops)?;
    if !logits.is_finite() {
        return Err(Error::numeric("non-finite decoder logits"));
    }
    let log_q = softmax_log_probs_matrix(&logits);
    Ok((
        log_q,
        DecoderTrace {
            z: z.clone(),
            hidden_pre,
            hidden_act,
        },
    ))
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))` in nats, one value per sample.
pub fn kl_nats_per_sample(stats: &LatentStats) -> Vec<f64> {
    (0..stats.batch_size())
        .map(|m| {
            stats
                .mu
                .row(m)
                .iter()
                .zip(stats.logvar.row(m))
                .map(|(&mu, &lv)| 0.5 * (mu * mu + lv.exp() - 1.0 - lv))
                .sum()
        })
        .collect()
}

pub fn mi_upper_bits(stats: &LatentStats) -> f64 {
    let kl = kl_nats_per_sample(stats);
    if kl.is_empty() {
        return 0.0;
    }
    kl.iter().sum::<f64>() / kl.len() as f64 / LN_2
}

fn check_labels(labels: &[u8], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y as usize >= classes) {
        Some(&y) => Err(Error::LabelOutOfRange {
            label: y as usize,
            classes,
        }),
        None => Ok(()),
    }
}

/// Mean log2-likelihood of the true labels under `log_q` (natural-log rows).
pub fn mi_lower_bits(log_q: &Matrix, labels: &[u8]) -> Result<f64> {
    if log_q.rows() != labels.len() {
        return Err(Error::config("label count does not match batch size"));
    }
    check_labels(labels, log_q.cols())?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(m, &y)| log_q.get(m, y as usize))
        .sum();
    Ok(sum / labels.len() as f64 / LN_2)
}

pub fn argmax_predictions(log_q: &Matrix) -> Vec<usize> {
    (0..log_q.rows())
        .map(|m| {
            let row = log_q.row(m);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `I(Z, Y)_min` without the `H(Y)` offset, in bits (always `<= 0`).
    pub mi_lower_bits: f64,
    /// `I(Z, X)_max` in bits.
    pub mi_upper_bits: f64,
    /// `-L_min`, the minimized objective.
    pub loss: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn l_min(&self) -> f64 {
        -self.loss
    }

    /// Lower bound shifted by `H(Y) = log2(classes)` so it reads as an MI estimate.
    pub fn reported_mi_lower_bits(&self, classes: usize) -> f64 {
        self.mi_lower_bits + (classes as f64).log2()
    }
}

pub fn vib_loss(mi_lower_bits: f64, mi_upper_bits: f64, beta: f64) -> LossBreakdown {
    debug_assert!(beta >= 0.0);
    let l_min = mi_lower_bits - beta * mi_upper_bits;
    LossBreakdown {
        mi_lower_bits,
        mi_upper_bits,
        loss: -l_min,
        beta,
    }
}

/// Gradient of `-L_min` with respect to the per-sample `mu` and `logvar`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrads {
    pub mu: Matrix,
    pub logvar: Matrix,
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub trunk: DenseGrads,
    pub mu_head: DenseGrads,
    pub logvar_head: DenseGrads,
}

#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub hidden: DenseGrads,
    pub output: DenseGrads,
}

/// `d(-L_min)/d logits = (softmax - onehot) / (M ln 2)`.
fn logits_grad(log_q: &Matrix, labels: &[u8]) -> Matrix {
    let m = log_q.rows() as f64;
    let mut g = log_q.map(f64::exp);
    for (row, &y) in labels.iter().enumerate() {
        let v = g.get(row, y as usize);
        g.set(row, y as usize, v - 1.0);
    }
    g.map(|v| v / (m * LN_2))
}

/// Backward through the decoder; returns parameter grads and `d(-L_min)/dz`.
pub fn decoder_backward(
    dec: &DecoderParams,
    trace: &DecoderTrace,
    log_q: &Matrix,
    labels: &[u8],
    flops: &mut FlopTally,
) -> Result<(DecoderGrads, Matrix)> {
    check_labels(labels, dec.classes())?;
    let g_logits = logits_grad(log_q, labels);
    let (output, g_hidden) = dec
        .output
        .backward(&trace.hidden_act, &g_logits, true, flops)?;
    let mut g_hidden = g_hidden.expect("requested");
    relu_backward_matrix(&trace.hidden_pre, &mut g_hidden);
    let (hidden, g_z) = dec.hidden.backward(&trace.z, &g_hidden, true, flops)?;
    Ok((DecoderGrads { hidden, output }, g_z.expect("requested")))
}

/// Chains `d(-L_min)/dz` through the reparameterization and adds the
/// `beta * KL` term's direct dependence on `mu` and `logvar`.
pub fn latent_grads(
    stats: &LatentStats,
    eps: &Matrix,
    grad_z: &Matrix,
    beta: f64,
    mode: ReparamMode,
) -> Result<LatentGrads> {
    if grad_z.shape() != stats.mu.shape() || eps.shape() != stats.mu.shape() {
        return Err(Error::config("latent gradient shape mismatch"));
    }
    let kl_scale = beta / (stats.batch_size() as f64 * LN_2);
    let mut g_mu = Matrix::zeros(stats.batch_size(), stats.latent_dim());
    let mut g_lv = g_mu.clone();
    let n = stats.mu.as_slice().len();
    for i in 0..n {
        let mu = stats.mu.as_slice()[i];
        let lv = stats.logvar.as_slice()[i];
        let gz = grad_z.as_slice()[i];
        let e = eps.as_slice()[i];
        let dz_dlv = match mode {
            ReparamMode::StdDev => 0.5 * e * (0.5 * lv).exp(),
            ReparamMode::Variance => e * lv.exp(),
        };
        g_mu.as_mut_slice()[i] = gz + kl_scale * mu;
        g_lv.as_mut_slice()[i] = gz * dz_dlv + kl_scale * 0.5 * (lv.exp() - 1.0);
    }
    Ok(LatentGrads {
        mu: g_mu,
        logvar: g_lv,
    })
}

pub fn encoder_backward(
    enc: &EncoderParams,
    x: &Matrix,
    trace: &EncoderTrace,
    grads: &LatentGrads,
    flops: &mut FlopTally,
) -> Result<EncoderGrads> {
    let (mu_head, g_act_mu) = enc
        .mu_head
        .backward(&trace.trunk_act, &grads.mu, true, flops)?;
    let (logvar_head, g_act_lv) =
        enc.logvar_head
            .backward(&trace.trunk_act, &grads.logvar, true, flops)?;
    let mut g_act = g_act_mu.expect("requested");
    for (a, b) in g_act
        .as_mut_slice()
        .iter_mut()
        .zip(g_act_lv.expect("requested").as_slice())
    {
        *a += b;
    }
    relu_backward_matrix(&trace.trunk_pre, &mut g_act);
    let (trunk, _) = enc.trunk.backward(x, &g_act, false, flops)?;
    Ok(EncoderGrads {
        trunk,
        mu_head,
        logvar_head,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderAdam {
    trunk: DenseAdam,
    mu_head: DenseAdam,
    logvar_head: DenseAdam,
}

impl EncoderAdam {
    pub fn new(enc: &EncoderParams) -> Self {
        Self {
            trunk: DenseAdam::for_layer(&enc.trunk),
            mu_head: DenseAdam::for_layer(&enc.mu_head),
            logvar_head: DenseAdam::for_layer(&enc.logvar_head),
        }
    }

    pub fn step(
        &mut self,
        enc: &mut EncoderParams,
        g: &EncoderGrads,
        hyper: &AdamHyper,
    ) -> Result<()> {
        self.trunk.step(&mut enc.trunk, &g.trunk, hyper)?;
        self.mu_head.step(&mut enc.mu_head, &g.mu_head, hyper)?;
        self.logvar_head
            .step(&mut enc.logvar_head, &g.logvar_head, hyper)
    }

    pub fn steps_taken(&self) -> u64 {
        self.trunk.weight.t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderAdam {
    hidden: DenseAdam,
    output: DenseAdam,
}

impl DecoderAdam {
    pub fn new(dec: &DecoderParams) -> Self {
        Self {
            hidden: DenseAdam::for_layer(&dec.hidden),
            output: DenseAdam::for_layer(&dec.output),
        }
    }

    pub fn step(
        &mut self,
        dec: &mut DecoderParams,
        g: &DecoderGrads,
        hyper: &AdamHyper,
    ) -> Result<()> {
        self.hidden.step(&mut dec.hidden, &g.hidden, hyper)?;
        self.output.step(&mut dec.output, &g.output, hyper)
    }
}

/// Training hyperparameters shared by the split and monolithic paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub beta: f64,
    pub mode: ReparamMode,
    pub adam: AdamHyper,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            mode: ReparamMode::StdDev,
            adam: AdamHyper::default(),
        }
    }
}

/// Loss plus argmax predictions for one evaluated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    pub breakdown: LossBreakdown,
    pub predictions: Vec<usize>,
}

impl BatchEval {
    pub fn correct(&self, labels: &[u8]) -> usize {
        self.predictions
            .iter()
            .zip(labels)
            .filter(|(&p, &y)| p == y as usize)
            .count()
    }
}

/// Server half of a forward pass without parameter updates.
pub fn evaluate_latent(
    dec: &DecoderParams,
    stats: &LatentStats,
    eps: &Matrix,
    labels: &[u8],
    cfg: &StepConfig,
    flops: &mut FlopTally,
) -> Result<BatchEval> {
    let z = reparameterize(stats, eps, cfg.mode)?;
    let (log_q, _) = decode(dec, &z, flops)?;
    let breakdown = vib_loss(
        mi_lower_bits(&log_q, labels)?,
        mi_upper_bits(stats),
        cfg.beta,
    );
    Ok(BatchEval {
        breakdown,
        predictions: argmax_predictions(&log_q),
    })
}

/// Encoder and decoder trained together on one node.
#[derive(Debug, Clone)]
pub struct VibModel {
    pub params: ModelParams,
    enc_opt: EncoderAdam,
    dec_opt: DecoderAdam,
}

/// All gradients of one monolithic step, before the optimizer touches them.
#[derive(Debug, Clone)]
pub struct FullGradients {
    pub encoder: EncoderGrads,
    pub decoder: DecoderGrads,
    pub latent: LatentGrads,
    pub breakdown: LossBreakdown,
}

impl VibModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let enc_opt = EncoderAdam::new(&params.encoder);
        let dec_opt = DecoderAdam::new(&params.decoder);
        Ok(Self {
            params,
            enc_opt,
            dec_opt,
        })
    }

    pub fn gradients(
        &self,
        x: &Matrix,
        labels: &[u8],
        eps: &Matrix,
        cfg: &StepConfig,
        flops: &mut FlopTally,
    ) -> Result<FullGradients> {
        let p = &self.params;
        let (stats, enc_trace) = encode(&p.encoder, x, flops)?;
        let z = reparameterize(&stats, eps, cfg.mode)?;
        let (log_q, dec_trace) = decode(&p.decoder, &z, flops)?;
        let breakdown = vib_loss(
            mi_lower_bits(&log_q, labels)?,
            mi_upper_bits(&stats),
            cfg.beta,
        );
        let (decoder, g_z) = decoder_backward(&p.decoder, &dec_trace, &log_q, labels, flops)?;
        let latent = latent_grads(&stats, eps, &g_z, cfg.beta, cfg.mode)?;
        let encoder = encoder_backward(&p.encoder, x, &enc_trace, &latent, flops)?;
        Ok(FullGradients {
            encoder,
            decoder,
            latent,
            breakdown,
        })
    }

    pub fn train_step(
        &mut self,
        x: &Matrix,
        labels: &[u8],
        eps: &Matrix,
        cfg: &StepConfig,
        flops: &mut FlopTally,
    ) -> Result<LossBreakdown> {
        let g = self.gradients(x, labels, eps, cfg, flops)?;
        self.dec_opt
            .step(&mut self.params.decoder, &g.decoder, &cfg.adam)?;
        self.enc_opt
            .step(&mut self.params.encoder, &g.encoder, &cfg.adam)?;
        Ok(g.breakdown)
    }

    pub fn evaluate(
        &self,
        x: &Matrix,
        labels: &[u8],
        eps: &Matrix,
        cfg: &StepConfig,
        flops: &mut FlopTally,
    ) -> Result<BatchEval> {
        let (stats, _) = encode(&self.params.encoder, x, flops)?;
        evaluate_latent(&self.params.decoder, &stats, eps, labels, cfg, flops)
    }
}
