//! Residual-vector-quantized motion autoencoder.
//!
//! The encoder groups `downsample_rate` consecutive frames into one latent
//! row and refines it with 1-D convolutional residual blocks; `L + 1`
//! codebooks then quantize the latent residual layer by layer. The decoder
//! mirrors the encoder and maps summed codes back to frames.
//!
//! Codebooks are learned by exponential moving average of assigned
//! residuals, so the commitment term never sends gradient into them.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Tape, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{cosine_schedule, linear_weight, AdamW, AdamWConfig, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// A reaction motion: `N` frames of `D`-dimensional pose features.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Tensor,
}

impl MotionSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::Usage(
                "motion must have at least one frame and one feature".into(),
            ));
        }
        if !frames.all_finite() {
            return Err(Error::Usage("motion contains non-finite values".into()));
        }
        Ok(MotionSequence { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn pose_dim(&self) -> usize {
        self.frames.cols()
    }

    /// Mean absolute per-element difference over the first
    /// `min(self.len, other.len)` frames.
    pub fn mean_abs_error(&self, other: &MotionSequence) -> f64 {
        let n = self.num_frames().min(other.num_frames());
        let a = self.frames.slice_rows(0, n);
        let b = other.frames.slice_rows(0, n);
        a.zip_map(&b, |x, y| (x - y).abs()).sum() / a.len() as f64
    }
}

/// Encoder output `z`, `[N′ × D′]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub codes: Tensor,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.rows() == 0
    }
}

/// One quantization layer's entries, `[C × D′]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub entries: Tensor,
    /// 1-based layer position.
    pub layer_index: usize,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    /// Index of the Euclidean nearest entry; ties go to the lowest index.
    pub fn nearest(&self, row: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, e) in self.entries.iter_rows().enumerate() {
            let d: f64 = e.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Pairs of bit-identical entries (collapsed codes).
    pub fn duplicate_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.size() {
            for j in i + 1..self.size() {
                if self.entries.row(i) == self.entries.row(j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Per-layer codes `z̃ˡ`, tokens `tˡ` and residuals `ρˡ` of one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub quantized: Vec<Tensor>,
    pub tokens: Vec<Vec<usize>>,
    pub residuals: Vec<Tensor>,
    /// `ρ^{m+1}`, what remains after the last layer.
    pub remainder: Tensor,
}

impl QuantizationResult {
    pub fn num_layers(&self) -> usize {
        self.quantized.len()
    }

    pub fn len(&self) -> usize {
        self.remainder.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.remainder.rows() == 0
    }

    /// `Σ_{l ≤ m} z̃ˡ`.
    pub fn sum_codes(&self, m: usize) -> Tensor {
        let mut acc = Tensor::zeros(self.remainder.rows(), self.remainder.cols());
        for q in &self.quantized[..m] {
            acc.add_assign(q);
        }
        acc
    }
}

/// Quantizes `latent` through `codebooks` in order, each layer taking the
/// residual left by the previous ones.
pub fn quantize_residual(latent: &LatentSequence, codebooks: &[Codebook]) -> Result<QuantizationResult> {
    if codebooks.is_empty() {
        return Err(Error::Usage("quantize_residual needs at least one codebook".into()));
    }
    let (n, d) = latent.codes.shape();
    for cb in codebooks {
        if cb.entries.cols() != d {
            return Err(Error::Usage(format!(
                "codebook {} has width {}, latent has {d}",
                cb.layer_index,
                cb.entries.cols()
            )));
        }
    }
    let mut residual = latent.codes.clone();
    let mut quantized = Vec::with_capacity(codebooks.len());
    let mut tokens = Vec::with_capacity(codebooks.len());
    let mut residuals = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        let mut q = Tensor::zeros(n, d);
        let mut t = Vec::with_capacity(n);
        for i in 0..n {
            let k = cb.nearest(residual.row(i));
            q.row_mut(i).copy_from_slice(cb.entries.row(k));
            t.push(k);
        }
        let next = residual.zip_map(&q, |a, b| a - b);
        residuals.push(residual);
        quantized.push(q);
        tokens.push(t);
        residual = next;
    }
    Ok(QuantizationResult {
        quantized,
        tokens,
        residuals,
        remainder: residual,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub pose_dim: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    /// Total quantization layers, `L + 1`.
    pub num_layers: usize,
    pub downsample_rate: usize,
    pub hidden_dim: usize,
    pub res_blocks: usize,
    pub commitment_weight: f64,
    pub ema_decay: f64,
    /// Probability of decoding only a random prefix of layers in training.
    pub quant_dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Mean per-element L1 the trained codec should reach; a warning is
    /// logged otherwise.
    pub l1_threshold: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            pose_dim: 8,
            latent_dim: 32,
            codebook_size: 64,
            num_layers: 6,
            downsample_rate: 4,
            hidden_dim: 64,
            res_blocks: 2,
            commitment_weight: 1.0,
            ema_decay: 0.99,
            quant_dropout: 0.2,
            epochs: 60,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            l1_threshold: 0.05,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("codec: {m}")));
        if self.pose_dim == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2");
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1");
        }
        if self.downsample_rate == 0 {
            return bad("downsample_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.quant_dropout) {
            return bad("quant_dropout must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// `ceil(frames / downsample_rate)`.
    pub fn latent_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.downsample_rate)
    }
}

struct ResBlock {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
}

struct ConvStack {
    in_w: ParamId,
    in_b: ParamId,
    blocks: Vec<ResBlock>,
    out_w: ParamId,
    out_b: ParamId,
}

impl ConvStack {
    fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        inp: usize,
        hidden: usize,
        out: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Self {
        ConvStack {
            in_w: store.add(format!("{prefix}.in.weight"), linear_weight(rng, hidden, inp, 1.0)),
            in_b: store.add(format!("{prefix}.in.bias"), Tensor::zeros(1, hidden)),
            blocks: (0..blocks)
                .map(|i| ResBlock {
                    conv1_w: store.add(
                        format!("{prefix}.res{i}.conv1.weight"),
                        linear_weight(rng, hidden, 3 * hidden, 1.0),
                    ),
                    conv1_b: store.add(format!("{prefix}.res{i}.conv1.bias"), Tensor::zeros(1, hidden)),
                    conv2_w: store.add(
                        format!("{prefix}.res{i}.conv2.weight"),
                        linear_weight(rng, hidden, 3 * hidden, 0.5),
                    ),
                    conv2_b: store.add(format!("{prefix}.res{i}.conv2.bias"), Tensor::zeros(1, hidden)),
                })
                .collect(),
            out_w: store.add(format!("{prefix}.out.weight"), linear_weight(rng, out, hidden, 1.0)),
            out_b: store.add(format!("{prefix}.out.bias"), Tensor::zeros(1, out)),
        }
    }

    /// Width-3, zero-padded temporal convolution as a linear map over
    /// `[x(t−1), x(t), x(t+1)]`.
    fn conv3(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
        let n = tape.value(x).rows();
        let prev = tape.shift_rows(x, -1, n);
        let next = tape.shift_rows(x, 1, n);
        let cat = tape.concat_cols(&[prev, x, next]);
        tape.linear(cat, w, Some(b))
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = tape.linear(x, p[self.in_w], Some(p[self.in_b]));
        let mut h = tape.tanh(h);
        for b in &self.blocks {
            let r = Self::conv3(tape, h, p[b.conv1_w], p[b.conv1_b]);
            let r = tape.tanh(r);
            let r = Self::conv3(tape, r, p[b.conv2_w], p[b.conv2_b]);
            h = tape.add(h, r);
            h = tape.tanh(h);
        }
        tape.linear(h, p[self.out_w], Some(p[self.out_b]))
    }
}

/// Encoder, decoder and codebooks of the motion tokenizer.
pub struct RvqCodec {
    cfg: CodecConfig,
    store: ParamStore,
    encoder: ConvStack,
    decoder: ConvStack,
    codebooks: Vec<Codebook>,
    steps: u64,
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Mean absolute per-element reconstruction error with all layers.
    pub recon_l1: f64,
    pub dead_codes_reset: usize,
}

impl RvqCodec {
    /// Fresh codec with random encoder/decoder and zero codebooks.
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let r = cfg.downsample_rate;
        let encoder = ConvStack::new(
            &mut store,
            "encoder",
            r * cfg.pose_dim,
            cfg.hidden_dim,
            cfg.latent_dim,
            cfg.res_blocks,
            &mut rng,
        );
        let decoder = ConvStack::new(
            &mut store,
            "decoder",
            cfg.latent_dim,
            cfg.hidden_dim,
            r * cfg.pose_dim,
            cfg.res_blocks,
            &mut rng,
        );
        let codebooks = (1..=cfg.num_layers)
            .map(|l| Codebook {
                entries: Tensor::zeros(cfg.codebook_size, cfg.latent_dim),
                layer_index: l,
            })
            .collect();
        Ok(RvqCodec {
            cfg,
            store,
            encoder,
            decoder,
            codebooks,
            steps: 0,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn codebooks_mut(&mut self) -> &mut [Codebook] {
        &mut self.codebooks
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn training_steps(&self) -> u64 {
        self.steps
    }

    fn check_motion(&self, motion: &MotionSequence) -> Result<()> {
        if motion.pose_dim() != self.cfg.pose_dim {
            return Err(Error::Config(format!(
                "pose dimension mismatch: codec expects D={}, motion has D={}",
                self.cfg.pose_dim,
                motion.pose_dim()
            )));
        }
        Ok(())
    }

    /// Frames padded (last frame repeated) to a multiple of the rate and
    /// grouped into `[N′ × rate·D]`.
    fn grouped_frames(&self, motion: &MotionSequence) -> Tensor {
        let r = self.cfg.downsample_rate;
        let n = motion.num_frames();
        let np = self.cfg.latent_len(n);
        let d = motion.pose_dim();
        let mut data = Vec::with_capacity(np * r * d);
        for i in 0..np * r {
            data.extend_from_slice(motion.frames().row(i.min(n - 1)));
        }
        Tensor::from_vec(np, r * d, data)
    }

    fn encode_var(&self, tape: &mut Tape, p: &Bound, motion: &MotionSequence) -> Var {
        let x = tape.constant(self.grouped_frames(motion));
        self.encoder.forward(tape, p, x)
    }

    fn decode_var(&self, tape: &mut Tape, p: &Bound, codes: Var) -> Var {
        let n = tape.value(codes).rows();
        let y = self.decoder.forward(tape, p, codes);
        tape.reshape(y, n * self.cfg.downsample_rate, self.cfg.pose_dim)
    }

    pub fn encode(&self, motion: &MotionSequence) -> Result<LatentSequence> {
        self.check_motion(motion)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let z = self.encode_var(&mut tape, &p, motion);
        Ok(LatentSequence {
            codes: tape.value(z).clone(),
        })
    }

    pub fn quantize(&self, latent: &LatentSequence) -> Result<QuantizationResult> {
        quantize_residual(latent, &self.codebooks)
    }

    /// Decodes summed codes `[N′ × D′]` into `N′ · rate` frames.
    pub fn decode_codes(&self, codes: &Tensor) -> Result<MotionSequence> {
        if codes.cols() != self.cfg.latent_dim || codes.rows() == 0 {
            return Err(Error::Usage(format!(
                "decoder expects [N′ × {}] codes, got {:?}",
                self.cfg.latent_dim,
                codes.shape()
            )));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let c = tape.constant(codes.clone());
        let y = self.decode_var(&mut tape, &p, c);
        MotionSequence::new(tape.value(y).clone())
    }

    /// Decodes all layers present in `result`.
    pub fn decode(&self, result: &QuantizationResult) -> Result<MotionSequence> {
        self.decode_prefix(result, result.num_layers())
    }

    /// Decodes the sum of the first `layers` quantized codes.
    pub fn decode_prefix(&self, result: &QuantizationResult, layers: usize) -> Result<MotionSequence> {
        if result.num_layers() > self.cfg.num_layers || layers > result.num_layers() || layers == 0 {
            return Err(Error::Usage(format!(
                "cannot decode {layers} of {} layers with a {}-layer codec",
                result.num_layers(),
                self.cfg.num_layers
            )));
        }
        for q in &result.quantized {
            if q.cols() != self.cfg.latent_dim || q.rows() != result.len() {
                return Err(Error::Usage(format!(
                    "quantized layer has shape {:?}, expected [{} × {}]",
                    q.shape(),
                    result.len(),
                    self.cfg.latent_dim
                )));
            }
        }
        self.decode_codes(&result.sum_codes(layers))
    }

    /// Token indices per layer for a motion, `[L+1][N′]`.
    pub fn tokenize(&self, motion: &MotionSequence) -> Result<Vec<Vec<usize>>> {
        Ok(self.quantize(&self.encode(motion)?)?.tokens)
    }

    /// Summed codebook rows for per-layer tokens.
    pub fn codes_from_tokens(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        if tokens.is_empty() || tokens.len() > self.codebooks.len() {
            return Err(Error::Usage(format!(
                "expected 1..={} token layers, got {}",
                self.codebooks.len(),
                tokens.len()
            )));
        }
        let n = tokens[0].len();
        let mut acc = Tensor::zeros(n, self.cfg.latent_dim);
        for (cb, layer) in self.codebooks.iter().zip(tokens) {
            if layer.len() != n {
                return Err(Error::Usage("token layers have different lengths".into()));
            }
            for (i, &t) in layer.iter().enumerate() {
                if t >= cb.size() {
                    return Err(Error::Usage(format!(
                        "token {t} outside codebook of size {}",
                        cb.size()
                    )));
                }
                for (a, b) in acc.row_mut(i).iter_mut().zip(cb.entries.row(t)) {
                    *a += b;
                }
            }
        }
        Ok(acc)
    }

    /// Reconstruction through all layers.
    pub fn reconstruct(&self, motion: &MotionSequence) -> Result<MotionSequence> {
        let q = self.quantize(&self.encode(motion)?)?;
        self.decode(&q)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "rvq_codec",
            json!({
                "config": self.cfg,
                "training_steps": self.steps,
            }),
        );
        for (name, t) in self.store.iter() {
            c.push(name, t);
        }
        for cb in &self.codebooks {
            c.push(format!("codebook.{}", cb.layer_index), &cb.entries);
        }
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind("rvq_codec", path)?;
        let cfg: CodecConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::format(path, format!("codec config: {e}")))?;
        let steps = c.meta["training_steps"].as_u64().unwrap_or(0);
        let mut codec = RvqCodec::new(cfg, 0)?;
        let (params, books): (Vec<_>, Vec<_>) = c
            .tensors
            .iter()
            .cloned()
            .partition(|(n, _)| !n.starts_with("codebook."));
        codec.store.load_named(&params).map_err(|e| Error::format(path, e))?;
        if books.len() != codec.codebooks.len() {
            return Err(Error::format(path, "codebook count does not match config"));
        }
        for (cb, (name, t)) in codec.codebooks.iter_mut().zip(books) {
            if name != format!("codebook.{}", cb.layer_index) || t.shape() != cb.entries.shape() {
                return Err(Error::format(path, format!("unexpected codebook tensor {name}")));
            }
            cb.entries = t;
        }
        codec.steps = steps;
        Ok(codec)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (c, hash) = Container::load(path)?;
        Ok((Self::from_container(&c, path)?, hash))
    }
}

/// Scalar RVQ objective for one motion:
/// `Σ|r − r̃| + w · Σ_l ‖ρˡ − z̃ˡ‖²`, compared over the original frames.
pub fn rvq_loss(
    motion: &MotionSequence,
    result: &QuantizationResult,
    reconstruction: &MotionSequence,
    commitment_weight: f64,
) -> Result<f64> {
    if reconstruction.num_frames() < motion.num_frames() || reconstruction.pose_dim() != motion.pose_dim() {
        return Err(Error::Usage(format!(
            "reconstruction {:?} cannot cover motion {:?}",
            reconstruction.frames().shape(),
            motion.frames().shape()
        )));
    }
    let n = motion.num_frames();
    let recon = reconstruction.frames().slice_rows(0, n);
    let l1 = motion.frames().zip_map(&recon, |a, b| (a - b).abs()).sum();
    let commit: f64 = result
        .residuals
        .iter()
        .zip(&result.quantized)
        .map(|(r, q)| r.zip_map(q, |a, b| (a - b) * (a - b)).sum())
        .sum();
    Ok(l1 + commitment_weight * commit)
}

/// Mean of [`rvq_loss`] over a batch.
pub fn rvq_loss_batch(
    items: &[(&MotionSequence, &QuantizationResult, &MotionSequence)],
    commitment_weight: f64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let mut total = 0.0;
    for (m, q, r) in items {
        total += rvq_loss(m, q, r, commitment_weight)?;
    }
    Ok(total / items.len() as f64)
}

/// Records the RVQ objective for one sample on `tape`, starting from the
/// encoder output `z`.
///
/// Codebook rows enter as constants (stop-gradient). With
/// `straight_through`, the decoder input is `z + sg(Σz̃ − z)`, so the
/// reconstruction gradient reaches the encoder; without it the graph is the
/// literal loss, whose only path back to `z` is the commitment term.
pub fn rvq_loss_on_tape(
    codec: &RvqCodec,
    tape: &mut Tape,
    p: &Bound,
    z: Var,
    motion: &MotionSequence,
    layers: usize,
    straight_through: bool,
) -> Result<(Var, QuantizationResult)> {
    let latent = LatentSequence {
        codes: tape.value(z).clone(),
    };
    let q = quantize_residual(&latent, &codec.codebooks[..layers])?;
    let mut commit_terms = Vec::with_capacity(layers);
    let mut acc = Tensor::zeros(latent.codes.rows(), latent.codes.cols());
    for zq in &q.quantized {
        // ρˡ − z̃ˡ = z − Σ_{j≤l} z̃ʲ
        acc.add_assign(zq);
        let c = tape.constant(acc.clone());
        let diff = tape.sub(z, c);
        commit_terms.push(tape.sum_squares(diff));
    }
    let summed = q.sum_codes(layers);
    let dec_in = if straight_through {
        let delta = tape.constant(summed.zip_map(&latent.codes, |a, b| a - b));
        tape.add(z, delta)
    } else {
        tape.constant(summed)
    };
    let recon = codec.decode_var(tape, p, dec_in);
    let recon = tape.slice_rows(recon, 0, motion.num_frames());
    let target = tape.constant(motion.frames().clone());
    let diff = tape.sub(recon, target);
    let abs = tape.abs(diff);
    let l1 = tape.sum(abs);
    let commit = tape.concat_rows(&commit_terms);
    let commit = tape.sum(commit);
    let commit = tape.scale(commit, codec.cfg.commitment_weight);
    Ok((tape.add(l1, commit), q))
}

/// Exposes the encoder on a caller's tape (gradient checks, diagnostics).
pub fn encode_on_tape(codec: &RvqCodec, tape: &mut Tape, p: &Bound, motion: &MotionSequence) -> Var {
    codec.encode_var(tape, p, motion)
}

struct EmaState {
    cluster_size: Vec<Vec<f64>>,
    embed_sum: Vec<Tensor>,
    usage: Vec<Vec<u64>>,
}

fn init_codebooks(codec: &mut RvqCodec, data: &[MotionSequence], rng: &mut ChaCha8Rng) -> Result<EmaState> {
    let mut residuals: Vec<Vec<f64>> = Vec::new();
    for m in data {
        let z = codec.encode(m)?;
        residuals.extend(z.codes.iter_rows().map(<[f64]>::to_vec));
    }
    let c = codec.cfg.codebook_size;
    let d = codec.cfg.latent_dim;
    let mut state = EmaState {
        cluster_size: Vec::new(),
        embed_sum: Vec::new(),
        usage: vec![vec![0; c]; codec.cfg.num_layers],
    };
    for cb in codec.codebooks.iter_mut() {
        let mut idx: Vec<usize> = (0..residuals.len()).collect();
        idx.shuffle(rng);
        let mut entries = Tensor::zeros(c, d);
        for k in 0..c {
            let src = &residuals[idx[k % idx.len()]];
            for (j, o) in entries.row_mut(k).iter_mut().enumerate() {
                // jitter separates entries drawn from the same row
                *o = src[j]
                    + if k >= idx.len() {
                        rng.random_range(-1e-3..1e-3)
                    } else {
                        0.0
                    };
            }
        }
        cb.entries = entries;
        for r in residuals.iter_mut() {
            let k = cb.nearest(r);
            for (a, b) in r.iter_mut().zip(cb.entries.row(k)) {
                *a -= b;
            }
        }
        state.cluster_size.push(vec![1.0; c]);
        state.embed_sum.push(cb.entries.clone());
    }
    Ok(state)
}

/// Trains a codec on `data`. Deterministic for a given `seed`.
pub fn train_rvq(data: &[MotionSequence], cfg: &CodecConfig, seed: u64) -> Result<(RvqCodec, Vec<EpochLog>)> {
    if data.is_empty() {
        return Err(Error::Usage("train_rvq: dataset is empty".into()));
    }
    cfg.validate()?;
    let mut codec = RvqCodec::new(cfg.clone(), seed)?;
    for m in data {
        codec.check_motion(m)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5256_5131);
    let mut ema = init_codebooks(&mut codec, data, &mut rng)?;
    let mut opt = AdamW::new(&codec.store, cfg.optimizer);
    let layers = cfg.num_layers;
    let decay = cfg.ema_decay;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let total_steps = (cfg.epochs * data.len().div_ceil(cfg.batch_size)) as u64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        let mut last_residuals: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            opt.set_lr_scale(cosine_schedule(codec.steps, total_steps, 0.05));
            let mut tape = Tape::new();
            let p = codec.store.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(batch.len());
            let mut counts = vec![vec![0.0; cfg.codebook_size]; layers];
            let mut sums: Vec<Tensor> = (0..layers)
                .map(|_| Tensor::zeros(cfg.codebook_size, cfg.latent_dim))
                .collect();
            for r in last_residuals.iter_mut() {
                r.clear();
            }
            for &i in batch {
                let used = if rng.random::<f64>() < cfg.quant_dropout {
                    rng.random_range(1..=layers)
                } else {
                    layers
                };
                let z = codec.encode_var(&mut tape, &p, &data[i]);
                let (loss, q) = rvq_loss_on_tape(&codec, &mut tape, &p, z, &data[i], used, true)?;
                losses.push(loss);
                for l in 0..used {
                    for (row, &t) in q.residuals[l].iter_rows().zip(&q.tokens[l]) {
                        counts[l][t] += 1.0;
                        for (a, b) in sums[l].row_mut(t).iter_mut().zip(row) {
                            *a += b;
                        }
                        ema.usage[l][t] += 1;
                        last_residuals[l].push(row.to_vec());
                    }
                }
            }
            let total = tape.concat_rows(&losses);
            let total = tape.sum(total);
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numerical(format!(
                    "rvq training produced a non-finite loss at epoch {epoch}, batch {bi} (step {})",
                    codec.steps
                )));
            }
            tape.backward(loss);
            let grads = codec.store.grads(&tape, &p);
            opt.step(&mut codec.store, &grads);
            codec.steps += 1;
            epoch_loss += lv;
            batches += 1;

            for l in 0..layers {
                let cs = &mut ema.cluster_size[l];
                let es = &mut ema.embed_sum[l];
                for k in 0..cfg.codebook_size {
                    cs[k] = decay * cs[k] + (1.0 - decay) * counts[l][k];
                    for (a, b) in es.row_mut(k).iter_mut().zip(sums[l].row(k)) {
                        *a = decay * *a + (1.0 - decay) * b;
                    }
                }
                let n: f64 = cs.iter().sum();
                let eps = 1e-5;
                let entries = &mut codec.codebooks[l].entries;
                for k in 0..cfg.codebook_size {
                    let smoothed = (cs[k] + eps) / (n + cfg.codebook_size as f64 * eps) * n;
                    for (o, s) in entries.row_mut(k).iter_mut().zip(es.row(k)) {
                        *o = s / smoothed;
                    }
                }
            }
        }

        // dead codes: unused for the whole epoch, re-seeded from the last
        // batch; skipped after the final epoch so every entry has been fitted
        let mut reset = 0;
        for l in 0..layers {
            if last_residuals[l].is_empty() || epoch + 1 == cfg.epochs {
                continue;
            }
            for k in 0..cfg.codebook_size {
                if ema.usage[l][k] == 0 {
                    let src = &last_residuals[l][rng.random_range(0..last_residuals[l].len())];
                    codec.codebooks[l].entries.row_mut(k).copy_from_slice(src);
                    ema.embed_sum[l].row_mut(k).copy_from_slice(src);
                    ema.cluster_size[l][k] = 1.0;
                    reset += 1;
                }
            }
            ema.usage[l].iter_mut().for_each(|u| *u = 0);
        }

        let recon_l1 = mean_reconstruction_l1(&codec, data, layers)?;
        let log = EpochLog {
            epoch,
            loss: epoch_loss / batches as f64,
            recon_l1,
            dead_codes_reset: reset,
        };
        info!(
            "rvq epoch {epoch}: loss {:.4} recon L1 {:.4} reset {reset}",
            log.loss, log.recon_l1
        );
        logs.push(log);
    }

    codec.store.round_to_f32();
    for cb in codec.codebooks.iter_mut() {
        cb.entries.round_to_f32();
        let dups = cb.duplicate_entries();
        if !dups.is_empty() {
            warn!("codebook {} has {} identical entry pairs", cb.layer_index, dups.len());
        }
    }
    let final_l1 = mean_reconstruction_l1(&codec, data, layers)?;
    if final_l1 > cfg.l1_threshold {
        warn!(
            "rvq training finished with reconstruction L1 {final_l1:.4} above threshold {}",
            cfg.l1_threshold
        );
    }
    Ok((codec, logs))
}

/// Mean absolute per-element reconstruction error using the first
/// `layers` quantization layers.
pub fn mean_reconstruction_l1(codec: &RvqCodec, data: &[MotionSequence], layers: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for m in data {
        let q = codec.quantize(&codec.encode(m)?)?;
        let r = codec.decode_prefix(&q, layers)?;
        let n = m.num_frames();
        total += m
            .frames()
            .zip_map(&r.frames().slice_rows(0, n), |a, b| (a - b).abs())
            .sum();
        count += m.frames().len();
    }
    Ok(total / count as f64)
}
