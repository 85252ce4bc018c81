//! Dilated causal convolutional encoder mapping a scalar sequence to a
//! low-dimensional embedding, with exact reverse-mode gradients.
//!
//! Layer `l` applies a causal convolution with dilation `2^l` (left padding
//! only, so no future leakage), a leaky-ReLU, and a residual connection
//! (identity when channel counts match, a 1x1 projection otherwise). A
//! pointwise convolution then lifts the hidden channels to `reduced_size`,
//! global max pooling over time collapses the sequence, and a fully
//! connected layer produces the embedding. With left padding every layer
//! preserves sequence length, so any input of length >= 1 is legal.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("encoder input is empty")]
    EmptyInput,
    #[error("encoder input contains a non-finite value")]
    NonFiniteInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset must be normalized before embedding")]
    NotNormalized,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub num_layers: usize,
    pub kernel_size: usize,
    pub reduced_size: usize,
    pub out_dim: usize,
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            hidden_channels: 40,
            num_layers: 10,
            kernel_size: 3,
            reduced_size: 60,
            out_dim: 2,
            leaky_slope: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let positive = [
            ("in_channels", self.in_channels),
            ("hidden_channels", self.hidden_channels),
            ("num_layers", self.num_layers),
            ("kernel_size", self.kernel_size),
            ("reduced_size", self.reduced_size),
            ("out_dim", self.out_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(EncoderError::BadConfig(format!("{name} must be positive")));
            }
        }
        if !self.leaky_slope.is_finite() {
            return Err(EncoderError::BadConfig("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    /// Receptive field of the dilated stack: `1 + (k-1) * sum(2^l)`.
    /// The pointwise lift after the stack adds nothing.
    pub fn receptive_field(&self) -> usize {
        let dil_sum: usize = (0..self.num_layers).map(|l| 1usize << l).sum();
        1 + (self.kernel_size - 1) * dil_sum
    }
}

/// Channels-by-time activation buffer, row-major per channel.
#[derive(Debug, Clone)]
pub(crate) struct Tensor2 {
    pub ch: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    fn zeros(ch: usize, len: usize) -> Self {
        Self {
            ch,
            len,
            data: vec![0.0; ch * len],
        }
    }

    #[inline]
    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    #[inline]
    fn row_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }
}

/// Byte range of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone)]
struct LayerSlots {
    w: Slot,
    b: Slot,
    /// 1x1 shortcut projection, present when in/out channels differ.
    proj: Option<Slot>,
    in_ch: usize,
    dilation: usize,
}

/// Offsets of every tensor in the flat parameter vector; derived from the
/// config, so two params with equal configs always share a layout.
#[derive(Debug, Clone)]
struct Layout {
    layers: Vec<LayerSlots>,
    final_w: Slot,
    final_b: Slot,
    fc_w: Slot,
    fc_b: Slot,
    total: usize,
}

impl Layout {
    fn new(cfg: &EncoderConfig) -> Self {
        let mut offset = 0usize;
        let mut slot = |len: usize| {
            let s = Slot { offset, len };
            offset += len;
            s
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let in_ch = if l == 0 { cfg.in_channels } else { cfg.hidden_channels };
            let w = slot(cfg.hidden_channels * in_ch * cfg.kernel_size);
            let b = slot(cfg.hidden_channels);
            let proj = (in_ch != cfg.hidden_channels).then(|| slot(cfg.hidden_channels * in_ch));
            layers.push(LayerSlots {
                w,
                b,
                proj,
                in_ch,
                dilation: 1usize << l,
            });
        }
        let final_w = slot(cfg.reduced_size * cfg.hidden_channels);
        let final_b = slot(cfg.reduced_size);
        let fc_w = slot(cfg.out_dim * cfg.reduced_size);
        let fc_b = slot(cfg.out_dim);
        Self {
            layers,
            final_w,
            final_b,
            fc_w,
            fc_b,
            total: offset,
        }
    }
}

/// All encoder weights and biases, stored flat so the optimizer, the
/// checkpoint format, and finite-difference probes can address every
/// coordinate uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    cfg: EncoderConfig,
    data: Vec<f64>,
}

impl EncoderParams {
    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// All-zero parameters; useful as a degenerate fixture.
    pub fn zeros(cfg: &EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        Ok(Self {
            cfg: *cfg,
            data: vec![0.0; layout.total],
        })
    }

    fn view(&self, s: Slot) -> &[f64] {
        &self.data[s.offset..s.offset + s.len]
    }
}

/// Number of parameters implied by a config.
pub fn param_count(cfg: &EncoderConfig) -> usize {
    Layout::new(cfg).total
}

/// Fan-in scaled uniform initialization: weights from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
pub fn init_params(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<EncoderParams, EncoderError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut data = vec![0.0; layout.total];
    let mut fill = |slot: Slot, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut data[slot.offset..slot.offset + slot.len] {
            *v = rng.random_range(-bound..bound);
        }
    };
    for layer in &layout.layers {
        fill(layer.w, layer.in_ch * cfg.kernel_size);
        // biases stay zero
        if let Some(proj) = layer.proj {
            fill(proj, layer.in_ch);
        }
    }
    fill(layout.final_w, cfg.hidden_channels);
    fill(layout.fc_w, cfg.reduced_size);
    Ok(EncoderParams { cfg: *cfg, data })
}

/// Recorded forward pass for one sequence; owns everything backward needs.
pub struct Activations {
    /// `inputs[l]` feeds layer `l`; the last entry feeds the pointwise lift.
    inputs: Vec<Tensor2>,
    /// Pre-activation output of each dilated conv.
    preacts: Vec<Tensor2>,
    /// Output of the pointwise lift (`reduced_size` x T).
    stack_out: Tensor2,
    /// Earliest maximal time index per reduced channel.
    argmax: Vec<usize>,
    pooled: Vec<f64>,
    embedding: Vec<f64>,
}

impl Activations {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    /// Pre-pool activation row for one reduced channel; the causality and
    /// receptive-field probes read this.
    pub fn stack_row(&self, channel: usize) -> &[f64] {
        self.stack_out.row(channel)
    }
}

fn conv_forward(
    w: &[f64],
    b: &[f64],
    x: &Tensor2,
    out_ch: usize,
    k: usize,
    dilation: usize,
) -> Tensor2 {
    let t = x.len;
    let in_ch = x.ch;
    let mut out = Tensor2::zeros(out_ch, t);
    for o in 0..out_ch {
        let orow = out.row_mut(o);
        orow.fill(b[o]);
        for i in 0..in_ch {
            let xrow = x.row(i);
            let wbase = (o * in_ch + i) * k;
            for q in 0..k {
                let off = q * dilation;
                if off >= t {
                    break;
                }
                let wv = w[wbase + q];
                let xs = &xrow[..t - off];
                let os = &mut orow[off..];
                for (ov, xv) in os.iter_mut().zip(xs) {
                    *ov += wv * xv;
                }
            }
        }
    }
    out
}

/// Forward pass recording every intermediate the backward pass needs.
pub fn forward_trace(p: &EncoderParams, x: &[f64]) -> Result<Activations, EncoderError> {
    if x.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(EncoderError::NonFiniteInput);
    }
    let cfg = &p.cfg;
    if cfg.in_channels != 1 {
        return Err(EncoderError::ShapeMismatch(format!(
            "scalar input requires in_channels=1, config has {}",
            cfg.in_channels
        )));
    }
    let layout = Layout::new(cfg);
    let t = x.len();
    let slope = cfg.leaky_slope;

    let mut inputs = Vec::with_capacity(cfg.num_layers + 1);
    let mut preacts = Vec::with_capacity(cfg.num_layers);
    inputs.push(Tensor2 {
        ch: 1,
        len: t,
        data: x.to_vec(),
    });

    for layer in &layout.layers {
        let xin = inputs.last().unwrap();
        let z = conv_forward(
            p.view(layer.w),
            p.view(layer.b),
            xin,
            cfg.hidden_channels,
            cfg.kernel_size,
            layer.dilation,
        );
        let mut y = Tensor2::zeros(cfg.hidden_channels, t);
        for c in 0..cfg.hidden_channels {
            let zrow = z.row(c);
            let yrow = y.row_mut(c);
            for (yv, &zv) in yrow.iter_mut().zip(zrow) {
                *yv = if zv > 0.0 { zv } else { slope * zv };
            }
        }
        match layer.proj {
            None => {
                for c in 0..cfg.hidden_channels {
                    let xrow = xin.row(c);
                    let yrow = y.row_mut(c);
                    for (yv, xv) in yrow.iter_mut().zip(xrow) {
                        *yv += xv;
                    }
                }
            }
            Some(proj) => {
                let pw = p.view(proj);
                for c in 0..cfg.hidden_channels {
                    for i in 0..layer.in_ch {
                        let wv = pw[c * layer.in_ch + i];
                        let xrow = xin.row(i);
                        let yrow = y.row_mut(c);
                        for (yv, xv) in yrow.iter_mut().zip(xrow) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        }
        preacts.push(z);
        inputs.push(y);
    }

    // Pointwise lift to reduced_size channels.
    let last = inputs.last().unwrap();
    let fw = p.view(layout.final_w);
    let fb = p.view(layout.final_b);
    let mut stack_out = Tensor2::zeros(cfg.reduced_size, t);
    for r in 0..cfg.reduced_size {
        let orow = stack_out.row_mut(r);
        orow.fill(fb[r]);
        for i in 0..cfg.hidden_channels {
            let wv = fw[r * cfg.hidden_channels + i];
            let xrow = last.row(i);
            for (ov, xv) in orow.iter_mut().zip(xrow) {
                *ov += wv * xv;
            }
        }
    }

    // Global max pool over time, earliest index wins ties.
    let mut pooled = vec![0.0; cfg.reduced_size];
    let mut argmax = vec![0usize; cfg.reduced_size];
    for r in 0..cfg.reduced_size {
        let row = stack_out.row(r);
        let mut best = row[0];
        let mut best_ix = 0usize;
        for (ix, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_ix = ix;
            }
        }
        pooled[r] = best;
        argmax[r] = best_ix;
    }

    let lw = p.view(layout.fc_w);
    let lb = p.view(layout.fc_b);
    let mut embedding = vec![0.0; cfg.out_dim];
    for (c, e) in embedding.iter_mut().enumerate() {
        let mut acc = lb[c];
        for r in 0..cfg.reduced_size {
            acc += lw[c * cfg.reduced_size + r] * pooled[r];
        }
        *e = acc;
    }

    Ok(Activations {
        inputs,
        preacts,
        stack_out,
        argmax,
        pooled,
        embedding,
    })
}

/// Embedding of one sequence.
pub fn forward(p: &EncoderParams, x: &[f64]) -> Result<Vec<f64>, EncoderError> {
    Ok(forward_trace(p, x)?.embedding)
}

/// Accumulate `d loss / d theta` into `grads` for one sequence, given the
/// recorded forward pass and the loss gradient w.r.t. the embedding.
pub fn backward(
    p: &EncoderParams,
    acts: &Activations,
    upstream: &[f64],
    grads: &mut [f64],
) -> Result<(), EncoderError> {
    let cfg = &p.cfg;
    if upstream.len() != cfg.out_dim {
        return Err(EncoderError::ShapeMismatch(format!(
            "upstream gradient has dim {}, expected {}",
            upstream.len(),
            cfg.out_dim
        )));
    }
    if grads.len() != p.data.len() {
        return Err(EncoderError::ShapeMismatch(format!(
            "gradient buffer has len {}, expected {}",
            grads.len(),
            p.data.len()
        )));
    }
    let layout = Layout::new(cfg);
    let t = acts.inputs[0].len;
    let slope = cfg.leaky_slope;

    // Fully connected layer.
    let lw = p.view(layout.fc_w);
    let mut d_pooled = vec![0.0; cfg.reduced_size];
    for c in 0..cfg.out_dim {
        grads[layout.fc_b.offset + c] += upstream[c];
        for r in 0..cfg.reduced_size {
            grads[layout.fc_w.offset + c * cfg.reduced_size + r] += upstream[c] * acts.pooled[r];
            d_pooled[r] += lw[c * cfg.reduced_size + r] * upstream[c];
        }
    }

    // Max pool routes each channel's gradient to its argmax position; the
    // pointwise lift then maps it back to hidden channels at that position.
    let last_in = acts.inputs.last().unwrap();
    let fw = p.view(layout.final_w);
    let mut d_last = Tensor2::zeros(cfg.hidden_channels, t);
    for r in 0..cfg.reduced_size {
        let g = d_pooled[r];
        let ix = acts.argmax[r];
        grads[layout.final_b.offset + r] += g;
        for i in 0..cfg.hidden_channels {
            grads[layout.final_w.offset + r * cfg.hidden_channels + i] += g * last_in.row(i)[ix];
            d_last.row_mut(i)[ix] += fw[r * cfg.hidden_channels + i] * g;
        }
    }

    // Walk the residual layers in reverse.
    let mut d_out = d_last;
    for (l, layer) in layout.layers.iter().enumerate().rev() {
        let xin = &acts.inputs[l];
        let z = &acts.preacts[l];
        let w = p.view(layer.w);

        // Through the leaky-ReLU.
        let mut dz = Tensor2::zeros(cfg.hidden_channels, t);
        for c in 0..cfg.hidden_channels {
            let zrow = z.row(c);
            let grow = d_out.row(c);
            let drow = dz.row_mut(c);
            for ((dv, &zv), &gv) in drow.iter_mut().zip(zrow).zip(grow) {
                *dv = if zv > 0.0 { gv } else { slope * gv };
            }
        }

        // Conv weight/bias gradients and data gradient.
        let mut d_in = Tensor2::zeros(layer.in_ch, t);
        for o in 0..cfg.hidden_channels {
            let dzrow = dz.row(o);
            grads[layer.b.offset + o] += dzrow.iter().sum::<f64>();
            for i in 0..layer.in_ch {
                let xrow = xin.row(i);
                let wbase = (o * layer.in_ch + i) * cfg.kernel_size;
                for q in 0..cfg.kernel_size {
                    let off = q * layer.dilation;
                    if off >= t {
                        break;
                    }
                    let mut acc = 0.0;
                    for (dzv, xv) in dzrow[off..].iter().zip(&xrow[..t - off]) {
                        acc += dzv * xv;
                    }
                    grads[layer.w.offset + wbase + q] += acc;
                    let wv = w[wbase + q];
                    let dirow = d_in.row_mut(i);
                    for (div, dzv) in dirow[..t - off].iter_mut().zip(&dzrow[off..]) {
                        *div += wv * dzv;
                    }
                }
            }
        }

        // Residual path.
        match layer.proj {
            None => {
                for c in 0..cfg.hidden_channels {
                    let grow = d_out.row(c);
                    let dirow = d_in.row_mut(c);
                    for (div, gv) in dirow.iter_mut().zip(grow) {
                        *div += gv;
                    }
                }
            }
            Some(proj) => {
                let pw = p.view(proj);
                for c in 0..cfg.hidden_channels {
                    let grow = d_out.row(c);
                    for i in 0..layer.in_ch {
                        let xrow = xin.row(i);
                        let mut acc = 0.0;
                        for (gv, xv) in grow.iter().zip(xrow) {
                            acc += gv * xv;
                        }
                        grads[proj.offset + c * layer.in_ch + i] += acc;
                        let wv = pw[c * layer.in_ch + i];
                        let dirow = d_in.row_mut(i);
                        for (div, gv) in dirow.iter_mut().zip(grow) {
                            *div += wv * gv;
                        }
                    }
                }
            }
        }

        d_out = d_in;
    }

    Ok(())
}

/// Embeddings for every series of a dataset, row-aligned with series order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, EncoderError> {
        let dim = rows.first().map_or(0, |r| r.len());
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(EncoderError::ShapeMismatch("ragged embedding rows".into()));
        }
        let data = rows.into_iter().flatten().collect();
        Ok(Self { dim, data })
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }
}

/// Embed every series with the same parameters. Series are processed in
/// parallel; output order follows dataset order.
pub fn embed_all(p: &EncoderParams, d: &Dataset) -> Result<EmbeddingSet, EncoderError> {
    if !d.normalized {
        return Err(EncoderError::NotNormalized);
    }
    let rows = d
        .series
        .par_iter()
        .map(|s| forward(p, &s.values))
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingSet::from_rows(rows)
}

// --- checkpoint format -----------------------------------------------------
//
// Little-endian binary: magic, format version, a caller metadata string,
// the config, then the flat parameter vector. Round-trips bit-exactly.

const CHECKPOINT_MAGIC: &[u8; 8] = b"RGDENC\x00\x01";

pub fn save_checkpoint(
    path: &std::path::Path,
    p: &EncoderParams,
    meta: &str,
) -> Result<(), EncoderError> {
    let mut out = Vec::with_capacity(64 + meta.len() + p.data.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let cfg = &p.cfg;
    for v in [
        cfg.in_channels,
        cfg.hidden_channels,
        cfg.num_layers,
        cfg.kernel_size,
        cfg.reduced_size,
        cfg.out_dim,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.leaky_slope.to_le_bytes());
    out.extend_from_slice(&(p.data.len() as u64).to_le_bytes());
    for v in &p.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(EncoderParams, String), EncoderError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], EncoderError> {
        if *pos + n > bytes.len() {
            return Err(EncoderError::Checkpoint("truncated file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
        return Err(EncoderError::Checkpoint("bad magic".into()));
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let meta = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
        .map_err(|_| EncoderError::Checkpoint("metadata is not utf-8".into()))?;
    let read_u32 = |pos: &mut usize| -> Result<usize, EncoderError> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize)
    };
    let cfg = EncoderConfig {
        in_channels: read_u32(&mut pos)?,
        hidden_channels: read_u32(&mut pos)?,
        num_layers: read_u32(&mut pos)?,
        kernel_size: read_u32(&mut pos)?,
        reduced_size: read_u32(&mut pos)?,
        out_dim: read_u32(&mut pos)?,
        leaky_slope: f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()),
    };
    cfg.validate().map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    if count != param_count(&cfg) {
        return Err(EncoderError::Checkpoint(format!(
            "parameter count {count} does not match config ({})",
            param_count(&cfg)
        )));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
    }
    if pos != bytes.len() {
        return Err(EncoderError::Checkpoint("trailing bytes".into()));
    }
    Ok((EncoderParams { cfg, data }, meta))
}
