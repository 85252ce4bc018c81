//! Triplet-loss optimization of the encoder with Adam.
//!
//! The loss for one triplet with embeddings `a` (anchor), `p` (positive),
//! and `n_1..n_K` (negatives) is
//!
//! ```text
//! -log sigma(a . p) - sum_k log sigma(-(a . n_k))
//! ```
//!
//! computed through softplus so dot products up to +-1e3 stay finite.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::dtw::DistanceMatrix;
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::sampler::{self, Triplet};
use crate::{rng, sampler::SamplerError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("embedding dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error("non-finite gradient at step {step}; aborting")]
    NonFiniteGradient { step: usize },
    #[error("non-finite batch loss at step {step} (loss={loss}); aborting")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("distance matrix is {m} x {m} but dataset has {n} series")]
    Mismatch { m: usize, n: usize },
}

/// How negatives are chosen. The DTW-furthest strategy is the method;
/// uniform sampling exists only as a comparison baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    #[default]
    DtwFurthest,
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of negative samples per triplet.
    pub k: usize,
    pub batch_size: usize,
    /// Total optimization steps; epochs are derived.
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub negative_strategy: NegativeStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 6,
            batch_size: 3,
            steps: 500,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            negative_strategy: NegativeStrategy::DtwFurthest,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.k == 0 {
            return Err(TrainError::BadConfig("k must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(TrainError::BadConfig("steps must be >= 1".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(TrainError::BadConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// `log(1 + exp(u))` without overflow.
#[inline]
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Logistic sigmoid, stable on both tails.
#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Triplet loss value for already-computed embeddings.
pub fn triplet_loss(z_anchor: &[f64], z_pos: &[f64], z_negs: &[Vec<f64>]) -> Result<f64, TrainError> {
    let dim = z_anchor.len();
    if z_pos.len() != dim || z_negs.iter().any(|n| n.len() != dim) {
        return Err(TrainError::DimensionMismatch(format!(
            "anchor dim {dim}, positive dim {}, negatives {:?}",
            z_pos.len(),
            z_negs.iter().map(|n| n.len()).collect::<Vec<_>>()
        )));
    }
    let mut loss = softplus(-dot(z_anchor, z_pos));
    for n in z_negs {
        loss += softplus(dot(z_anchor, n));
    }
    Ok(loss)
}

/// Loss plus its gradients w.r.t. each embedding.
#[allow(clippy::type_complexity)]
pub fn triplet_loss_grads(
    z_anchor: &[f64],
    z_pos: &[f64],
    z_negs: &[Vec<f64>],
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>), TrainError> {
    let loss = triplet_loss(z_anchor, z_pos, z_negs)?;
    let dim = z_anchor.len();
    // d/dx of -log sigma(x) is -sigma(-x); of -log sigma(-x) is sigma(x).
    let pos_coeff = -sigmoid(-dot(z_anchor, z_pos));
    let mut d_anchor = vec![0.0; dim];
    let mut d_pos = vec![0.0; dim];
    for c in 0..dim {
        d_anchor[c] = pos_coeff * z_pos[c];
        d_pos[c] = pos_coeff * z_anchor[c];
    }
    let mut d_negs = Vec::with_capacity(z_negs.len());
    for n in z_negs {
        let coeff = sigmoid(dot(z_anchor, n));
        let mut d_n = vec![0.0; dim];
        for c in 0..dim {
            d_anchor[c] += coeff * n[c];
            d_n[c] = coeff * z_anchor[c];
        }
        d_negs.push(d_n);
    }
    Ok((loss, d_anchor, d_pos, d_negs))
}

/// Adam moment accumulators, shaped like the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut EncoderParams,
    grads: &[f64],
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let theta = params.as_mut_slice();
    if grads.len() != theta.len() || state.m.len() != theta.len() {
        return Err(TrainError::DimensionMismatch(format!(
            "params {} grads {} moments {}",
            theta.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            step: state.t as usize + 1,
        });
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..theta.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// One per-step training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    /// 1-based epoch the step belongs to.
    pub epoch: usize,
    pub loss: f64,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// CSV emission. Timing is opt-in: wall time varies between reruns, so
    /// the default artifact stays byte-reproducible.
    pub fn to_csv_bytes(&self, include_timing: bool) -> Vec<u8> {
        let mut out = String::new();
        if include_timing {
            out.push_str("step,epoch,loss,seconds\n");
            for r in &self.records {
                out.push_str(&format!("{},{},{},{:.3}\n", r.step, r.epoch, r.loss, r.seconds));
            }
        } else {
            out.push_str("step,epoch,loss\n");
            for r in &self.records {
                out.push_str(&format!("{},{},{}\n", r.step, r.epoch, r.loss));
            }
        }
        out.into_bytes()
    }
}

/// Gradient contribution of one triplet: runs the 2+K forwards, the loss,
/// and the 2+K backwards, accumulating into `grads`.
fn triplet_gradient(
    params: &EncoderParams,
    d: &Dataset,
    triplet: &Triplet,
    grads: &mut [f64],
) -> Result<f64, TrainError> {
    let series = &d.series[triplet.series].values;
    let anchor_x = &series[triplet.anchor.offset..triplet.anchor.end()];
    let pos_x = &series[triplet.positive.offset..triplet.positive.end()];

    let anchor_acts = encoder::forward_trace(params, anchor_x)?;
    let pos_acts = encoder::forward_trace(params, pos_x)?;
    let neg_acts = triplet
        .negatives
        .iter()
        .map(|n| {
            let vals = &d.series[n.series].values[n.span.offset..n.span.end()];
            encoder::forward_trace(params, vals)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let z_negs: Vec<Vec<f64>> = neg_acts.iter().map(|a| a.embedding().to_vec()).collect();
    let (loss, d_anchor, d_pos, d_negs) =
        triplet_loss_grads(anchor_acts.embedding(), pos_acts.embedding(), &z_negs)?;

    encoder::backward(params, &anchor_acts, &d_anchor, grads)?;
    encoder::backward(params, &pos_acts, &d_pos, grads)?;
    for (acts, d_n) in neg_acts.iter().zip(&d_negs) {
        encoder::backward(params, acts, d_n, grads)?;
    }
    Ok(loss)
}

/// Train the encoder on a normalized dataset.
///
/// Each epoch visits all series in a seeded shuffled order, `batch_size`
/// series per step; every visit contributes one triplet. Batch loss is the
/// mean of per-triplet losses, one Adam update per batch, stopping after
/// `cfg.steps` updates. Fully deterministic given the seed: every random
/// draw comes from its own derived stream and gradient reduction is in
/// batch-slot order regardless of thread schedule.
pub fn train(
    d: &Dataset,
    m: &DistanceMatrix,
    ecfg: &EncoderConfig,
    tcfg: &TrainConfig,
) -> Result<(EncoderParams, TrainLog), TrainError> {
    tcfg.validate()?;
    ecfg.validate()?;
    if !d.normalized {
        return Err(TrainError::Sampler(SamplerError::NotNormalized));
    }
    if m.n() != d.len() {
        return Err(TrainError::Mismatch { m: m.n(), n: d.len() });
    }
    if tcfg.negative_strategy == NegativeStrategy::DtwFurthest && tcfg.k > d.len() - 1 {
        return Err(TrainError::Sampler(SamplerError::TooManyNeighbors {
            k: tcfg.k,
            max: d.len() - 1,
        }));
    }

    let mut params = encoder::init_params(ecfg, &mut rng::stream(tcfg.seed, "init", &[]))?;
    let mut adam = AdamState::new(params.len());
    let mut log = TrainLog::default();
    let started = std::time::Instant::now();

    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut epoch = 0usize;
    'training: loop {
        epoch += 1;
        order.shuffle(&mut rng::stream(tcfg.seed, "shuffle", &[epoch as u64]));
        for chunk in order.chunks(tcfg.batch_size) {
            step += 1;
            let contributions = chunk
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let mut item_rng = rng::stream(tcfg.seed, "triplet", &[step as u64, slot as u64]);
                    let triplet = match tcfg.negative_strategy {
                        NegativeStrategy::DtwFurthest => {
                            sampler::sample_triplet(d, i, m, tcfg.k, &mut item_rng)?
                        }
                        NegativeStrategy::UniformRandom => {
                            sampler::sample_triplet_random(d, i, tcfg.k, &mut item_rng)?
                        }
                    };
                    let mut item_grads = vec![0.0; params.len()];
                    let loss = triplet_gradient(&params, d, &triplet, &mut item_grads)?;
                    Ok((loss, item_grads))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;

            // Reduce in slot order so the sum is schedule-independent.
            let scale = 1.0 / chunk.len() as f64;
            let mut grads = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for (loss, item_grads) in &contributions {
                batch_loss += loss * scale;
                for (g, ig) in grads.iter_mut().zip(item_grads) {
                    *g += ig * scale;
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    loss: batch_loss,
                });
            }
            adam_step(&mut adam, &mut params, &grads, tcfg)?;
            log.records.push(TrainRecord {
                step,
                epoch,
                loss: batch_loss,
                seconds: started.elapsed().as_secs_f64(),
            });
            if step % 50 == 0 {
                log::info!("step {step}/{} epoch {epoch} loss {batch_loss:.4}", tcfg.steps);
            }
            if step == tcfg.steps {
                break 'training;
            }
        }
    }
    Ok((params, log))
}
