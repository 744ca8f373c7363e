//! Conditional masked token transformer over first-layer motion tokens.
//!
//! The condition is projected into one prefix position that is never
//! masked or supervised. Training corrupts a cosine-scheduled fraction of
//! tokens with `MASK`; inference starts fully masked and fills tokens over
//! a fixed number of steps, re-masking the least confident positions.

use std::f64::consts::PI;
use std::path::Path;

use log::info;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Tape, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{
    cosine_schedule, linear_weight, normal_tensor, AdamW, Bound, DecoderStack, ParamId, ParamStore, TrainConfig,
    TransformerConfig,
};
use crate::tensor::Tensor;

/// Which stage a token model serves. Fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Motion,
}

/// `cos(π·progress/2)`.
pub fn cosine_mask_ratio(progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::Usage(format!("mask progress {progress} outside [0, 1]")));
    }
    Ok((PI * progress / 2.0).cos())
}

/// Corrupted tokens with their supervision mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub corrupted: Vec<usize>,
    pub supervised: Vec<bool>,
    pub original: Vec<usize>,
}

impl MaskedBatch {
    pub fn num_supervised(&self) -> usize {
        self.supervised.iter().filter(|&&s| s).count()
    }
}

/// Replaces `max(1, round(ratio·n))` of the `n` non-PAD positions with
/// `mask`, chosen uniformly without replacement.
pub fn apply_mask<R: Rng>(tokens: &[usize], ratio: f64, mask: usize, pad: usize, rng: &mut R) -> Result<MaskedBatch> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Usage(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let live: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] != pad).collect();
    if live.is_empty() {
        return Err(Error::Usage("cannot mask an all-PAD sequence".into()));
    }
    let n = ((ratio * live.len() as f64).round() as usize).clamp(1, live.len());
    let mut corrupted = tokens.to_vec();
    let mut supervised = vec![false; tokens.len()];
    for j in index::sample(rng, live.len(), n) {
        corrupted[live[j]] = mask;
        supervised[live[j]] = true;
    }
    Ok(MaskedBatch {
        corrupted,
        supervised,
        original: tokens.to_vec(),
    })
}

/// Mean NLL over supervised positions of `logits` `[N′ × C]`.
pub fn masked_nll(logits: &Tensor, batch: &MaskedBatch) -> Result<f64> {
    if logits.rows() != batch.original.len() {
        return Err(Error::Usage(format!(
            "logits have {} rows for {} tokens",
            logits.rows(),
            batch.original.len()
        )));
    }
    let n = batch.num_supervised();
    if n == 0 {
        return Err(Error::Usage("masked_nll needs at least one supervised position".into()));
    }
    let mut total = 0.0;
    for i in 0..logits.rows() {
        if batch.supervised[i] {
            let row = logits.row(i);
            let t = batch.original[i];
            if t >= row.len() {
                return Err(Error::Usage(format!("target {t} outside {} classes", row.len())));
            }
            total += log_sum_exp(row) - row[t];
        }
    }
    Ok(total / n as f64)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let scaled: Vec<f64> = row.iter().map(|x| x / t).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|x| (x - lse).exp()).collect()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Shape of a masked token model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskedArch {
    pub transformer: TransformerConfig,
    pub codebook_size: usize,
    pub cond_dim: usize,
    /// Longest token sequence the positional table covers.
    pub max_len: usize,
}

pub struct MaskedTransformer {
    arch: MaskedArch,
    role: Role,
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    cond_w: ParamId,
    cond_b: ParamId,
    stack: DecoderStack,
    head_w: ParamId,
    head_b: ParamId,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mask_loss: f64,
    pub aux_loss: f64,
}

/// Per-step record of an iterative decode.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    pub tokens: Vec<usize>,
    /// Masked positions remaining after each step.
    pub masked_after_step: Vec<usize>,
}

impl MaskedTransformer {
    pub fn new(role: Role, arch: MaskedArch, seed: u64) -> Result<Self> {
        let t = arch.transformer;
        if t.heads == 0 || t.model_dim % t.heads != 0 {
            return Err(Error::Config("transformer heads must divide model_dim".into()));
        }
        if arch.codebook_size < 2 || arch.cond_dim == 0 || arch.max_len == 0 {
            return Err(Error::Config(
                "masked transformer needs C ≥ 2, cond_dim ≥ 1, max_len ≥ 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = t.model_dim;
        let c = arch.codebook_size;
        let mut store = ParamStore::new();
        let tok_emb = store.add("tok_emb", normal_tensor(&mut rng, c + 2, d, 0.3));
        let pos_emb = store.add("pos_emb", normal_tensor(&mut rng, arch.max_len + 1, d, 0.1));
        let cond_w = store.add("cond.weight", linear_weight(&mut rng, d, arch.cond_dim, 1.0));
        let cond_b = store.add("cond.bias", Tensor::zeros(1, d));
        let stack = DecoderStack::new(&mut store, "decoder", t, &mut rng);
        let head_w = store.add("head.weight", linear_weight(&mut rng, c, d, 0.1));
        let head_b = store.add("head.bias", Tensor::zeros(1, c));
        Ok(MaskedTransformer {
            arch,
            role,
            store,
            tok_emb,
            pos_emb,
            cond_w,
            cond_b,
            stack,
            head_w,
            head_b,
            steps: 0,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn arch(&self) -> &MaskedArch {
        &self.arch
    }

    pub fn mask_token(&self) -> usize {
        self.arch.codebook_size
    }

    pub fn pad_token(&self) -> usize {
        self.arch.codebook_size + 1
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

    /// Copies every parameter from `other` (same architecture).
    pub fn init_from(&mut self, other: &MaskedTransformer) -> Result<()> {
        if other.arch != self.arch {
            return Err(Error::Config(
                "cannot initialise from a transformer of a different shape".into(),
            ));
        }
        self.store
            .load_named(&other.store.named_tensors())
            .map_err(Error::Config)
    }

    /// Token embedding table rows `T^emb[t]`, `[N′ × d]`.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Tensor> {
        let table = self.store.get(self.tok_emb);
        let mut out = Tensor::zeros(tokens.len(), table.cols());
        for (i, &t) in tokens.iter().enumerate() {
            if t >= table.rows() {
                return Err(Error::Usage(format!(
                    "token {t} outside vocabulary of {}",
                    table.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(table.row(t));
        }
        Ok(out)
    }

    /// Logits for `B` equally long (PAD-filled) token rows under conditions
    /// `cond` `[B × D_c]`. The result is `[B·(N′+1) × C]`; row `b·(N′+1)` is
    /// the prefix position of sequence `b`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, tokens: &[Vec<usize>], cond: Var) -> Result<Var> {
        let b = tokens.len();
        let n = tokens.first().map_or(0, Vec::len);
        if b == 0 || n == 0 || tokens.iter().any(|t| t.len() != n) {
            return Err(Error::Usage(
                "forward needs a non-empty batch of equal-length rows".into(),
            ));
        }
        if n > self.arch.max_len {
            return Err(Error::Usage(format!(
                "sequence length {n} exceeds model max_len {}",
                self.arch.max_len
            )));
        }
        if tape.value(cond).shape() != (b, self.arch.cond_dim) {
            return Err(Error::Usage(format!(
                "condition shape {:?}, expected [{b} × {}]",
                tape.value(cond).shape(),
                self.arch.cond_dim
            )));
        }
        let vocab = self.arch.codebook_size + 2;
        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
        if let Some(&t) = flat.iter().find(|&&t| t >= vocab) {
            return Err(Error::Usage(format!("token {t} outside vocabulary of {vocab}")));
        }
        let pad = self.pad_token();
        let prefix = tape.linear(cond, p[self.cond_w], Some(p[self.cond_b]));
        let emb = tape.gather(p[self.tok_emb], &flat);
        let mut parts = Vec::with_capacity(2 * b);
        for i in 0..b {
            parts.push(tape.slice_rows(prefix, i, 1));
            parts.push(tape.slice_rows(emb, i * n, n));
        }
        let x = tape.concat_rows(&parts);
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..=n).collect();
        let pos = tape.gather(p[self.pos_emb], &pos_idx);
        let x = tape.add(x, pos);
        let mut valid = Vec::with_capacity(b * (n + 1));
        for row in tokens {
            valid.push(true);
            valid.extend(row.iter().map(|&t| t != pad));
        }
        let h = self.stack.forward(tape, p, x, n + 1, &valid);
        Ok(tape.linear(h, p[self.head_w], Some(p[self.head_b])))
    }

    /// Mean over the batch of per-sample mean NLL at masked positions.
    pub fn loss_on_tape(&self, tape: &mut Tape, p: &Bound, batches: &[MaskedBatch], cond: Var) -> Result<Var> {
        let corrupted: Vec<Vec<usize>> = batches.iter().map(|m| m.corrupted.clone()).collect();
        let logits = self.forward(tape, p, &corrupted, cond)?;
        let (targets, weights) = supervision_rows(batches)?;
        Ok(tape.cross_entropy(logits, &targets, &weights))
    }

    /// Per-sample masked NLL, without a gradient.
    pub fn per_sample_nll(&self, batches: &[MaskedBatch], cond: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let c = tape.constant(cond.clone());
        let corrupted: Vec<Vec<usize>> = batches.iter().map(|m| m.corrupted.clone()).collect();
        let logits = self.forward(&mut tape, &p, &corrupted, c)?;
        let lv = tape.value(logits);
        let n = corrupted[0].len();
        batches
            .iter()
            .enumerate()
            .map(|(b, m)| masked_nll(&lv.slice_rows(b * (n + 1) + 1, n), m))
            .collect()
    }

    /// Token logits `[N′ × C]` for each sequence, without a gradient.
    pub fn predict(&self, tokens: &[Vec<usize>], cond: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let c = tape.constant(cond.clone());
        let logits = self.forward(&mut tape, &p, tokens, c)?;
        let lv = tape.value(logits);
        let n = tokens[0].len();
        Ok((0..tokens.len()).map(|b| lv.slice_rows(b * (n + 1) + 1, n)).collect())
    }

    /// Iterative decoding for one condition; see [`Self::decode_batch`].
    pub fn iterative_decode<R: Rng>(
        &self,
        cond: &[f64],
        steps: usize,
        len: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<DecodeTrace> {
        let c = Tensor::row_vector(cond.to_vec());
        Ok(self.decode_batch(&c, &[len], steps, temperature, rng)?.remove(0))
    }

    /// Decodes one sequence per condition row. Each step predicts every
    /// position; masked ones take the argmax (or a sample when
    /// `temperature > 0`), and then the `round(n·cos(π s / 2S))` least
    /// confident positions, fixed or not, are masked again. Confidence is
    /// the softmax probability of the position's token; ties re-mask the
    /// lower index first.
    pub fn decode_batch<R: Rng>(
        &self,
        cond: &Tensor,
        lens: &[usize],
        steps: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<DecodeTrace>> {
        if steps == 0 {
            return Err(Error::Usage("decode needs at least one step".into()));
        }
        if lens.len() != cond.rows() || lens.contains(&0) {
            return Err(Error::Usage("one positive length per condition required".into()));
        }
        let n = *lens.iter().max().unwrap();
        let (mask, pad) = (self.mask_token(), self.pad_token());
        let mut tokens: Vec<Vec<usize>> = lens
            .iter()
            .map(|&l| (0..n).map(|i| if i < l { mask } else { pad }).collect())
            .collect();
        let mut traces: Vec<Vec<usize>> = vec![Vec::with_capacity(steps); lens.len()];
        for s in 1..=steps {
            let logits = self.predict(&tokens, cond)?;
            for (b, lg) in logits.iter().enumerate() {
                let len = lens[b];
                let mut conf = Vec::with_capacity(len);
                for i in 0..len {
                    let probs = softmax(lg.row(i), temperature);
                    if tokens[b][i] == mask {
                        let t = if temperature > 0.0 {
                            sample_index(&probs, rng)
                        } else {
                            argmax(lg.row(i))
                        };
                        tokens[b][i] = t;
                    }
                    conf.push((probs[tokens[b][i]], i));
                }
                let keep_masked = (len as f64 * cosine_mask_ratio(s as f64 / steps as f64)?).round() as usize;
                conf.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for &(_, i) in conf.iter().take(keep_masked) {
                    tokens[b][i] = mask;
                }
                let masked = tokens[b][..len].iter().filter(|&&t| t == mask).count();
                debug_assert_eq!(masked, keep_masked);
                traces[b].push(masked);
            }
        }
        Ok(tokens
            .into_iter()
            .zip(traces)
            .zip(lens)
            .map(|((mut t, m), &l)| {
                t.truncate(l);
                DecodeTrace {
                    tokens: t,
                    masked_after_step: m,
                }
            })
            .collect())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "masked_transformer",
            json!({
                "arch": self.arch,
                "role": self.role,
                "training_steps": self.steps,
            }),
        );
        for (name, t) in self.store.iter() {
            c.push(name, t);
        }
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind("masked_transformer", path)?;
        let arch: MaskedArch =
            serde_json::from_value(c.meta["arch"].clone()).map_err(|e| Error::format(path, format!("arch: {e}")))?;
        let role: Role =
            serde_json::from_value(c.meta["role"].clone()).map_err(|e| Error::format(path, format!("role: {e}")))?;
        let mut m = MaskedTransformer::new(role, arch, 0)?;
        m.store.load_named(&c.tensors).map_err(|e| Error::format(path, e))?;
        m.steps = c.meta["training_steps"].as_u64().unwrap_or(0);
        Ok(m)
    }
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// CE targets/weights over the `[B·(N′+1)]` rows of a forward pass so the
/// weighted sum equals the mean over samples of per-sample mean NLL.
pub(crate) fn supervision_rows(batches: &[MaskedBatch]) -> Result<(Vec<Option<usize>>, Vec<f64>)> {
    let b = batches.len() as f64;
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for m in batches {
        let k = m.num_supervised();
        if k == 0 {
            return Err(Error::Usage("sample without supervised positions".into()));
        }
        targets.push(None);
        weights.push(0.0);
        for (i, &s) in m.supervised.iter().enumerate() {
            targets.push(s.then_some(m.original[i]));
            weights.push(if s { 1.0 / (k as f64 * b) } else { 0.0 });
        }
    }
    Ok((targets, weights))
}

/// Pads token rows to the longest with `pad`.
pub fn pad_rows(rows: &[&[usize]], pad: usize) -> Vec<Vec<usize>> {
    let n = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut v = r.to_vec();
            v.resize(n, pad);
            v
        })
        .collect()
}

/// Supplies per-sample conditions during masked training, optionally with
/// trainable parameters of its own and an auxiliary loss.
pub trait ConditionSource {
    fn cond_dim(&self) -> usize;

    /// Parameters optimised alongside the transformer, if any.
    fn trainable(&mut self) -> Option<&mut ParamStore> {
        None
    }

    /// Records `[B × D_c]` conditions for `indices` and an optional
    /// auxiliary loss. `bound` binds [`Self::trainable`] when present.
    fn record(&self, tape: &mut Tape, bound: Option<&Bound>, indices: &[usize]) -> Result<(Var, Option<Var>)>;
}

/// Fixed condition rows, one per sample.
pub struct FixedConditions<'a>(pub &'a Tensor);

impl ConditionSource for FixedConditions<'_> {
    fn cond_dim(&self) -> usize {
        self.0.cols()
    }

    fn record(&self, tape: &mut Tape, _: Option<&Bound>, indices: &[usize]) -> Result<(Var, Option<Var>)> {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.0.row(i)).collect();
        Ok((tape.constant(Tensor::from_rows(&rows, self.0.cols())), None))
    }
}

/// Trains `model` on first-layer token sequences with per-sample
/// conditions from `source`. Deterministic for a given `seed`.
pub fn train_masked(
    model: &mut MaskedTransformer,
    tokens: &[Vec<usize>],
    source: &mut dyn ConditionSource,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<MaskedEpochLog>> {
    if tokens.is_empty() || tokens.iter().any(Vec::is_empty) {
        return Err(Error::Usage("train_masked needs non-empty token sequences".into()));
    }
    if source.cond_dim() != model.arch.cond_dim {
        return Err(Error::Config(format!(
            "condition dim {} does not match model cond_dim {}",
            source.cond_dim(),
            model.arch.cond_dim
        )));
    }
    cfg.validate("masked").map_err(Error::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(&model.store, cfg.optimizer);
    let mut aux_opt = source.trainable().map(|s| AdamW::new(s, cfg.optimizer));
    let total_steps = cfg.total_steps(tokens.len());
    let (mask, pad) = (model.mask_token(), model.pad_token());
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut local_step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_mask, mut sum_aux, mut nb) = (0.0, 0.0, 0.0, 0);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let rows: Vec<&[usize]> = batch.iter().map(|&i| tokens[i].as_slice()).collect();
            let padded = pad_rows(&rows, pad);
            let masked = padded
                .iter()
                .map(|t| {
                    let ratio = cosine_mask_ratio(rng.random::<f64>())?;
                    apply_mask(t, ratio.max(f64::MIN_POSITIVE), mask, pad, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = cosine_schedule(local_step, total_steps, cfg.lr_floor);
            opt.set_lr_scale(scale);
            let mut tape = Tape::new();
            let pm = model.store.bind(&mut tape, true);
            let pa = source.trainable().map(|s| s.bind(&mut tape, true));
            let (cond, aux) = source.record(&mut tape, pa.as_ref(), batch)?;
            let mask_loss = model.loss_on_tape(&mut tape, &pm, &masked, cond)?;
            let loss = match aux {
                Some(a) => tape.add(mask_loss, a),
                None => mask_loss,
            };
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numerical(format!(
                    "{:?} transformer training produced a non-finite loss at epoch {epoch}, batch {bi} (step {})",
                    model.role, model.steps
                )));
            }
            sum += lv;
            sum_mask += tape.value(mask_loss).item();
            sum_aux += aux.map_or(0.0, |a| tape.value(a).item());
            nb += 1;
            tape.backward(loss);
            let g = model.store.grads(&tape, &pm);
            opt.step(&mut model.store, &g);
            if let (Some(store), Some(o), Some(pa)) = (source.trainable(), aux_opt.as_mut(), pa.as_ref()) {
                o.set_lr_scale(scale);
                let g = store.grads(&tape, pa);
                o.step(store, &g);
            }
            model.steps += 1;
            local_step += 1;
        }
        let log = MaskedEpochLog {
            epoch,
            loss: sum / nb as f64,
            mask_loss: sum_mask / nb as f64,
            aux_loss: sum_aux / nb as f64,
        };
        info!(
            "{:?} transformer epoch {epoch}: loss {:.4} (mask {:.4}, aux {:.4})",
            model.role, log.loss, log.mask_loss, log.aux_loss
        );
        logs.push(log);
    }
    model.store.round_to_f32();
    if let Some(s) = source.trainable() {
        s.round_to_f32();
    }
    Ok(logs)
}
