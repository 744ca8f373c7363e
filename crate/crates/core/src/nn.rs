//! Parameter storage, initialisation, the AdamW optimiser and the
//! pre-norm Transformer decoder stack shared by every token model.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| {
                    if trainable {
                        tape.param(v.clone())
                    } else {
                        tape.constant(v.clone())
                    }
                })
                .collect(),
        )
    }

    /// Gradients for a bound store after `tape.backward`; missing ones are zero.
    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(&bound.0)
            .map(|(v, &var)| match tape.grad(var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(v.rows(), v.cols()),
            })
            .collect()
    }

    /// Snap to on-disk precision so in-memory and reloaded models agree.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.round_to_f32();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Replaces values from `(name, tensor)` pairs; every name must exist with
    /// the same shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<(), String> {
        if tensors.len() != self.values.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                tensors.len()
            ));
        }
        for (name, t) in tensors {
            let id = self.id(name).ok_or_else(|| format!("unexpected tensor {name}"))?;
            let slot = &mut self.values[id.0];
            if slot.shape() != t.shape() {
                return Err(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                ));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

pub fn normal_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Weight `[out × in]` with variance `gain² / in`.
pub fn linear_weight<R: Rng>(rng: &mut R, out: usize, inp: usize, gain: f64) -> Tensor {
    normal_tensor(rng, out, inp, gain / (inp as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-5,
            clip_norm: 1.0,
        }
    }
}

/// Optimisation schedule of one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Final learning-rate fraction of the cosine decay; `1` keeps it flat.
    pub lr_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 5e-4,
                ..AdamWConfig::default()
            },
            lr_floor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stage: &str) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err(format!("{stage}: batch_size must be positive"));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(format!("{stage}: learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(format!("{stage}: lr_floor must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn total_steps(&self, samples: usize) -> u64 {
        (self.epochs * samples.div_ceil(self.batch_size)) as u64
    }
}

/// Half-cosine decay from 1 to `floor` over `total` steps.
pub fn cosine_schedule(step: u64, total: u64, floor: f64) -> f64 {
    let t = (step as f64 / total.max(1) as f64).min(1.0);
    floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Decoupled-weight-decay Adam. Decay applies to matrices only, not to
/// row-vector biases and norm gains.
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    lr_scale: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || {
            store
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        AdamW {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
            lr_scale: 1.0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Multiplier on the configured learning rate for subsequent steps.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> f64 {
        assert_eq!(grads.len(), store.len());
        let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = self.cfg;
        let lr = c.lr * self.lr_scale;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut store.values[i];
            let decay = if p.rows() > 1 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                let mj = &mut m.data_mut()[j];
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                let vj = &mut v.data_mut()[j];
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                let mhat = m.data()[j] / bc1;
                let vhat = v.data()[j] / bc2;
                let pj = &mut p.data_mut()[j];
                *pj -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *pj);
            }
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            model_dim: 128,
            layers: 4,
            heads: 4,
            ffn_dim: 512,
        }
    }
}

struct BlockIds {
    ln1: (ParamId, ParamId),
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2: (ParamId, ParamId),
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

/// Pre-norm bidirectional Transformer decoder units followed by a final norm.
pub struct DecoderStack {
    cfg: TransformerConfig,
    blocks: Vec<BlockIds>,
    final_ln: (ParamId, ParamId),
}

fn add_norm(store: &mut ParamStore, prefix: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{prefix}.gain"), Tensor::filled(1, d, 1.0)),
        store.add(format!("{prefix}.bias"), Tensor::zeros(1, d)),
    )
}

impl DecoderStack {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        assert!(cfg.heads > 0 && d % cfg.heads == 0, "heads must divide model_dim");
        let resid_gain = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("{prefix}.block{i}");
                BlockIds {
                    ln1: add_norm(store, &format!("{p}.ln1"), d),
                    qkv_w: store.add(format!("{p}.qkv.weight"), linear_weight(rng, 3 * d, d, 1.0)),
                    qkv_b: store.add(format!("{p}.qkv.bias"), Tensor::zeros(1, 3 * d)),
                    out_w: store.add(format!("{p}.out.weight"), linear_weight(rng, d, d, resid_gain)),
                    out_b: store.add(format!("{p}.out.bias"), Tensor::zeros(1, d)),
                    ln2: add_norm(store, &format!("{p}.ln2"), d),
                    ff1_w: store.add(format!("{p}.ff1.weight"), linear_weight(rng, cfg.ffn_dim, d, 1.0)),
                    ff1_b: store.add(format!("{p}.ff1.bias"), Tensor::zeros(1, cfg.ffn_dim)),
                    ff2_w: store.add(
                        format!("{p}.ff2.weight"),
                        linear_weight(rng, d, cfg.ffn_dim, resid_gain),
                    ),
                    ff2_b: store.add(format!("{p}.ff2.bias"), Tensor::zeros(1, d)),
                }
            })
            .collect();
        let final_ln = add_norm(store, &format!("{prefix}.ln_f"), d);
        DecoderStack { cfg, blocks, final_ln }
    }

    pub fn config(&self) -> TransformerConfig {
        self.cfg
    }

    /// `x` is `[B·seg_len × d]`; attention stays within each segment.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var, seg_len: usize, key_valid: &[bool]) -> Var {
        let d = self.cfg.model_dim;
        for b in &self.blocks {
            let h = tape.layer_norm(x, p[b.ln1.0], p[b.ln1.1]);
            let qkv = tape.linear(h, p[b.qkv_w], Some(p[b.qkv_b]));
            let q = tape.slice_cols(qkv, 0, d);
            let k = tape.slice_cols(qkv, d, d);
            let v = tape.slice_cols(qkv, 2 * d, d);
            let a = tape.attention(q, k, v, seg_len, self.cfg.heads, key_valid);
            let a = tape.linear(a, p[b.out_w], Some(p[b.out_b]));
            x = tape.add(x, a);
            let h = tape.layer_norm(x, p[b.ln2.0], p[b.ln2.1]);
            let h = tape.linear(h, p[b.ff1_w], Some(p[b.ff1_b]));
            let h = tape.gelu(h);
            let h = tape.linear(h, p[b.ff2_w], Some(p[b.ff2_b]));
            x = tape.add(x, h);
        }
        tape.layer_norm(x, p[self.final_ln.0], p[self.final_ln.1])
    }
}
