//! Residual token transformer and its conditioning.
//!
//! Layer `l` tokens are predicted from the summed embeddings of layers
//! `1..l−1` plus a layer-index embedding. The condition is a TwinMixer
//! fusion in which the rectified observation predicts an element-wise
//! shift and scale applied to the raw observation.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{gelu, Tape, Var};
use crate::codec::{MotionSequence, RvqCodec};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::generator::{argmax, log_sum_exp, MaskedTransformer};
use crate::nn::{
    cosine_schedule, linear_weight, normal_tensor, AdamW, Bound, DecoderStack, ParamId, ParamStore, TrainConfig,
    TransformerConfig,
};
use crate::steering::Rectifier;
use crate::tensor::Tensor;

/// Which observation forms condition the residual transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MixerBranch {
    Raw,
    Rectified,
    #[default]
    Both,
}

impl std::str::FromStr for MixerBranch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(MixerBranch::Raw),
            "rectified" => Ok(MixerBranch::Rectified),
            "both" => Ok(MixerBranch::Both),
            _ => Err(Error::Usage(format!(
                "unknown mixer branch {s:?} (raw, rectified, both)"
            ))),
        }
    }
}

/// `c = α + (β + 1) ⊙ x2` with `[α, β] = Split(W2·GELU(W1·x1))`.
pub struct TwinMixer {
    pub(crate) w1: ParamId,
    pub(crate) w2: ParamId,
    dim: usize,
}

impl TwinMixer {
    /// `W2` starts at zero, so a fresh mixer passes `x2` through.
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, hidden: usize, rng: &mut R) -> Self {
        TwinMixer {
            w1: store.add("mixer.w1", linear_weight(rng, hidden, dim, 1.0)),
            w2: store.add("mixer.w2", Tensor::zeros(2 * dim, hidden)),
            dim,
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, p: &Bound, x1: Var, x2: Var) -> Var {
        let h = tape.linear(x1, p[self.w1], None);
        let h = tape.gelu(h);
        let ab = tape.linear(h, p[self.w2], None);
        let alpha = tape.slice_cols(ab, 0, self.dim);
        let beta = tape.slice_cols(ab, self.dim, self.dim);
        let bx = tape.mul(beta, x2);
        let shifted = tape.add(alpha, x2);
        tape.add(shifted, bx)
    }
}

/// Direct evaluation of the mixer for single vectors, given weights
/// `w1` `[D_h × D_v]` and `w2` `[2D_v × D_h]`.
pub fn twin_mixer(x1: &[f64], x2: &[f64], w1: &Tensor, w2: &Tensor) -> Result<Vec<f64>> {
    let d = x2.len();
    if x1.len() != d || w1.cols() != d || w2.rows() != 2 * d || w2.cols() != w1.rows() {
        return Err(Error::Usage("twin_mixer dimensions are inconsistent".into()));
    }
    let h = Tensor::row_vector(x1.to_vec()).matmul_nt(w1).map(gelu);
    let ab = h.matmul_nt(w2);
    let ab = ab.data();
    Ok((0..d).map(|i| ab[i] + (ab[d + i] + 1.0) * x2[i]).collect())
}

/// Mean NLL of `targets` under `logits` `[N′ × C]` over every position.
pub fn residual_nll(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Usage("residual_nll: one target per logit row required".into()));
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter_rows().zip(targets) {
        if t >= row.len() {
            return Err(Error::Usage(format!("target {t} outside {} classes", row.len())));
        }
        total += log_sum_exp(row) - row[t];
    }
    Ok(total / targets.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualArch {
    pub transformer: TransformerConfig,
    pub codebook_size: usize,
    /// Quantization layers `L + 1`.
    pub num_layers: usize,
    pub cond_dim: usize,
    pub mixer_hidden: usize,
    pub max_len: usize,
    pub per_layer_heads: bool,
    pub branch: MixerBranch,
}

pub struct ResidualTransformer {
    arch: ResidualArch,
    store: ParamStore,
    tok_emb: ParamId,
    layer_emb: ParamId,
    pos_emb: ParamId,
    cond_w: ParamId,
    cond_b: ParamId,
    stack: DecoderStack,
    heads: Vec<(ParamId, ParamId)>,
    mixer: TwinMixer,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualEpochLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Tokens per layer for one sample, `[layer][position]`.
pub type LayeredTokens = Vec<Vec<usize>>;

impl ResidualTransformer {
    pub fn new(arch: ResidualArch, seed: u64) -> Result<Self> {
        let t = arch.transformer;
        if t.heads == 0 || t.model_dim % t.heads != 0 {
            return Err(Error::Config("transformer heads must divide model_dim".into()));
        }
        if arch.num_layers < 2 || arch.codebook_size < 2 || arch.max_len == 0 || arch.cond_dim == 0 {
            return Err(Error::Config(
                "residual transformer needs ≥ 2 layers, C ≥ 2, max_len ≥ 1 and cond_dim ≥ 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = t.model_dim;
        let c = arch.codebook_size;
        let mut store = ParamStore::new();
        let tok_emb = store.add("tok_emb", normal_tensor(&mut rng, c + 1, d, 0.3));
        let layer_emb = store.add("layer_emb", normal_tensor(&mut rng, arch.num_layers, d, 0.3));
        let pos_emb = store.add("pos_emb", normal_tensor(&mut rng, arch.max_len + 1, d, 0.1));
        let cond_w = store.add("cond.weight", linear_weight(&mut rng, d, arch.cond_dim, 1.0));
        let cond_b = store.add("cond.bias", Tensor::zeros(1, d));
        let stack = DecoderStack::new(&mut store, "decoder", t, &mut rng);
        let n_heads = if arch.per_layer_heads { arch.num_layers } else { 1 };
        let heads = (0..n_heads)
            .map(|h| {
                (
                    store.add(format!("head{h}.weight"), linear_weight(&mut rng, c, d, 0.1)),
                    store.add(format!("head{h}.bias"), Tensor::zeros(1, c)),
                )
            })
            .collect();
        let mixer = TwinMixer::new(&mut store, arch.cond_dim, arch.mixer_hidden.max(1), &mut rng);
        Ok(ResidualTransformer {
            arch,
            store,
            tok_emb,
            layer_emb,
            pos_emb,
            cond_w,
            cond_b,
            stack,
            heads,
            mixer,
            steps: 0,
        })
    }

    pub fn arch(&self) -> &ResidualArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn mixer(&self) -> &TwinMixer {
        &self.mixer
    }

    pub fn pad_token(&self) -> usize {
        self.arch.codebook_size
    }

    pub fn training_steps(&self) -> u64 {
        self.steps
    }

    /// Condition rows `[B × D_v]` for raw and rectified observation rows,
    /// according to the configured branch.
    pub fn condition_tape(&self, tape: &mut Tape, p: &Bound, raw: Var, rectified: Var) -> Var {
        match self.arch.branch {
            MixerBranch::Raw => raw,
            MixerBranch::Rectified => rectified,
            MixerBranch::Both => self.mixer.forward_tape(tape, p, rectified, raw),
        }
    }

    /// Logits `[B·(N′+1) × C]` for layer `l` (1-based). Only layers
    /// `1..l−1` of each sample are read. `lens` gives valid lengths;
    /// positions past them are padding.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layered: &[&LayeredTokens],
        lens: &[usize],
        l: usize,
        cond: Var,
    ) -> Result<Var> {
        if l == 0 || l > self.arch.num_layers {
            return Err(Error::Usage(format!(
                "target layer {l} outside 1..={}",
                self.arch.num_layers
            )));
        }
        let b = layered.len();
        if b == 0 || lens.len() != b {
            return Err(Error::Usage("forward needs one length per sample".into()));
        }
        let n = *lens.iter().max().unwrap();
        if n == 0 || n > self.arch.max_len {
            return Err(Error::Usage(format!(
                "sequence length {n} outside 1..={}",
                self.arch.max_len
            )));
        }
        if tape.value(cond).shape() != (b, self.arch.cond_dim) {
            return Err(Error::Usage("condition rows do not match the batch".into()));
        }
        let pad = self.pad_token();
        let mut x: Option<Var> = None;
        for j in 0..l - 1 {
            let mut idx = Vec::with_capacity(b * n);
            for (s, &len) in layered.iter().zip(lens) {
                let layer = s
                    .get(j)
                    .ok_or_else(|| Error::Usage(format!("layer {} missing", j + 1)))?;
                if layer.len() < len {
                    return Err(Error::Usage("token layer shorter than its sample length".into()));
                }
                for i in 0..n {
                    let t = if i < len { layer[i] } else { pad };
                    if t > pad {
                        return Err(Error::Usage(format!("token {t} outside codebook")));
                    }
                    idx.push(t);
                }
            }
            let e = tape.gather(p[self.tok_emb], &idx);
            x = Some(match x {
                Some(acc) => tape.add(acc, e),
                None => e,
            });
        }
        let le = tape.gather(p[self.layer_emb], &vec![l - 1; b * n]);
        let x = match x {
            Some(acc) => tape.add(acc, le),
            None => le,
        };
        let prefix = tape.linear(cond, p[self.cond_w], Some(p[self.cond_b]));
        let mut parts = Vec::with_capacity(2 * b);
        for i in 0..b {
            parts.push(tape.slice_rows(prefix, i, 1));
            parts.push(tape.slice_rows(x, i * n, n));
        }
        let x = tape.concat_rows(&parts);
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..=n).collect();
        let pos = tape.gather(p[self.pos_emb], &pos_idx);
        let x = tape.add(x, pos);
        let mut valid = Vec::with_capacity(b * (n + 1));
        for &len in lens {
            valid.push(true);
            valid.extend((0..n).map(|i| i < len));
        }
        let h = self.stack.forward(tape, p, x, n + 1, &valid);
        let (hw, hb) = self.heads[if self.arch.per_layer_heads { l - 1 } else { 0 }];
        Ok(tape.linear(h, p[hw], Some(p[hb])))
    }

    /// Layer-`l` logits `[len × C]` per sample, without a gradient.
    pub fn predict(
        &self,
        layered: &[&LayeredTokens],
        lens: &[usize],
        l: usize,
        raw: &Tensor,
        rectified: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let r = tape.constant(raw.clone());
        let x1 = tape.constant(rectified.clone());
        let c = self.condition_tape(&mut tape, &p, r, x1);
        let logits = self.forward(&mut tape, &p, layered, lens, l, c)?;
        let lv = tape.value(logits);
        let n = *lens.iter().max().unwrap();
        Ok(lens
            .iter()
            .enumerate()
            .map(|(b, &len)| lv.slice_rows(b * (n + 1) + 1, len))
            .collect())
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new(
            "residual_transformer",
            json!({"arch": self.arch, "training_steps": self.steps, "sources": meta}),
        );
        for (n, t) in self.store.iter() {
            c.push(n, t);
        }
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind("residual_transformer", path)?;
        let arch: ResidualArch =
            serde_json::from_value(c.meta["arch"].clone()).map_err(|e| Error::format(path, format!("arch: {e}")))?;
        let mut m = ResidualTransformer::new(arch, 0)?;
        m.store.load_named(&c.tensors).map_err(|e| Error::format(path, e))?;
        m.steps = c.meta["training_steps"].as_u64().unwrap_or(0);
        Ok(m)
    }
}

/// CE weights so the weighted sum is the batch mean of per-sample mean NLL.
fn residual_rows(layered: &[&LayeredTokens], lens: &[usize], l: usize) -> (Vec<Option<usize>>, Vec<f64>) {
    let n = *lens.iter().max().unwrap();
    let b = layered.len() as f64;
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (s, &len) in layered.iter().zip(lens) {
        targets.push(None);
        weights.push(0.0);
        for i in 0..n {
            if i < len {
                targets.push(Some(s[l - 1][i]));
                weights.push(1.0 / (len as f64 * b));
            } else {
                targets.push(None);
                weights.push(0.0);
            }
        }
    }
    (targets, weights)
}

/// Trains the residual transformer on per-sample layered tokens with raw
/// and rectified observation rows. Layers `2..=L+1` are supervised, or
/// `1..=L+1` with `supervise_layer_one`; one layer is drawn per batch.
pub fn train_residual(
    model: &mut ResidualTransformer,
    layered: &[LayeredTokens],
    raw: &Tensor,
    rectified: &Tensor,
    supervise_layer_one: bool,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<ResidualEpochLog>> {
    let m = layered.len();
    if m == 0 || raw.rows() != m || rectified.rows() != m {
        return Err(Error::Usage(
            "train_residual: one raw and rectified row per sample required".into(),
        ));
    }
    let layers = model.arch.num_layers;
    if layered.iter().any(|s| s.len() != layers || s[0].is_empty()) {
        return Err(Error::Usage(format!("every sample needs {layers} token layers")));
    }
    cfg.validate("residual").map_err(Error::Config)?;
    let lo = if supervise_layer_one { 1 } else { 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(&model.store, cfg.optimizer);
    let total = cfg.total_steps(m);
    let mut order: Vec<usize> = (0..m).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut local = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut nb) = (0.0, 0);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let l = rng.random_range(lo..=layers);
            opt.set_lr_scale(cosine_schedule(local, total, cfg.lr_floor));
            let rows: Vec<&LayeredTokens> = batch.iter().map(|&i| &layered[i]).collect();
            let lens: Vec<usize> = rows.iter().map(|s| s[0].len()).collect();
            let pick = |t: &Tensor| Tensor::from_rows(&batch.iter().map(|&i| t.row(i)).collect::<Vec<_>>(), t.cols());
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, true);
            let r = tape.constant(pick(raw));
            let x1 = tape.constant(pick(rectified));
            let c = model.condition_tape(&mut tape, &p, r, x1);
            let logits = model.forward(&mut tape, &p, &rows, &lens, l, c)?;
            let (targets, weights) = residual_rows(&rows, &lens, l);
            let loss = tape.cross_entropy(logits, &targets, &weights);
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numerical(format!(
                    "residual training produced a non-finite loss at epoch {epoch}, batch {bi}, layer {l} (step {})",
                    model.steps
                )));
            }
            tape.backward(loss);
            let g = model.store.grads(&tape, &p);
            opt.step(&mut model.store, &g);
            model.steps += 1;
            local += 1;
            sum += lv;
            nb += 1;
        }
        let log = ResidualEpochLog {
            epoch,
            loss: sum / nb as f64,
        };
        info!("residual transformer epoch {epoch}: loss {:.4}", log.loss);
        logs.push(log);
    }
    model.store.round_to_f32();
    Ok(logs)
}

/// First-layer tokens predicted by the motion transformer for each
/// condition row, greedy unless `temperature > 0`.
pub fn coupled_first_layer_tokens(
    motion: &MaskedTransformer,
    conditions: &Tensor,
    lens: &[usize],
    decode_steps: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(motion
        .decode_batch(conditions, lens, decode_steps, temperature, &mut rng)?
        .into_iter()
        .map(|t| t.tokens)
        .collect())
}

/// Frozen modules used at inference.
pub struct ReactionGenerator<'a> {
    pub codec: &'a RvqCodec,
    pub motion: &'a MaskedTransformer,
    pub residual: &'a ResidualTransformer,
    /// `None` conditions the motion transformer on raw observations.
    pub rectifier: Option<&'a Rectifier>,
    pub decode_steps: usize,
    pub temperature: f64,
}

impl ReactionGenerator<'_> {
    /// Rectified rows, or normalized raw rows without a rectifier.
    pub fn rectified(&self, raw: &Tensor) -> Result<Tensor> {
        match self.rectifier {
            Some(r) => r.rectify_rows(raw),
            None => Ok(raw.clone()),
        }
    }

    /// Full token stacks for each observation row, `lens` in latent steps.
    pub fn generate_tokens(&self, raw: &Tensor, lens: &[usize], seed: u64) -> Result<Vec<LayeredTokens>> {
        let layers = self.residual.arch.num_layers;
        if self.codec.codebooks().len() != layers {
            return Err(Error::Config(format!(
                "codec has {} layers but the residual transformer expects {layers}",
                self.codec.codebooks().len()
            )));
        }
        let rect = self.rectified(raw)?;
        let first = coupled_first_layer_tokens(self.motion, &rect, lens, self.decode_steps, self.temperature, seed)?;
        let mut stacks: Vec<LayeredTokens> = first.into_iter().map(|t| vec![t]).collect();
        for l in 2..=layers {
            let refs: Vec<&LayeredTokens> = stacks.iter().collect();
            let logits = self.residual.predict(&refs, lens, l, raw, &rect)?;
            for (s, lg) in stacks.iter_mut().zip(logits) {
                s.push(lg.iter_rows().map(argmax).collect());
            }
        }
        Ok(stacks)
    }

    /// One motion of `lens[i]·rate` frames per observation row.
    pub fn generate(&self, raw: &Tensor, lens: &[usize], seed: u64) -> Result<Vec<MotionSequence>> {
        self.generate_tokens(raw, lens, seed)?
            .iter()
            .map(|s| self.codec.decode_codes(&self.codec.codes_from_tokens(s)?))
            .collect()
    }
}
