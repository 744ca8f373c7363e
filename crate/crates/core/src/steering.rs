//! Prototype feedback steering.
//!
//! Class prototypes are mean-pooled base-transformer embeddings of each
//! class's first-layer tokens, normalized and then frozen. A gated delta
//! modulator rectifies observation embeddings, and a scaled margin softmax
//! over prototype similarities pulls each rectified embedding toward its
//! class prototype.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{gelu, layer_norm_rows, sigmoid, Tape, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::generator::{log_sum_exp, ConditionSource, MaskedTransformer};
use crate::nn::{linear_weight, normal_tensor, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

const MIN_NORM: f64 = 1e-8;

/// Per-position mean of embedded class tokens, `[N′ × D″]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAggregate {
    pub mean: Tensor,
    pub counts: Vec<usize>,
}

/// Masked per-position mean over `N′ = max_len` positions of the base
/// model's token embeddings. Shorter sequences only contribute to the
/// positions they have.
pub fn aggregate_class(sequences: &[&[usize]], base: &MaskedTransformer, max_len: usize) -> Result<ClassAggregate> {
    if sequences.is_empty() {
        return Err(Error::Usage("aggregate_class: class has no samples".into()));
    }
    let d = base.arch().transformer.model_dim;
    let mut sum = Tensor::zeros(max_len, d);
    let mut counts = vec![0usize; max_len];
    for seq in sequences {
        if seq.len() > max_len {
            return Err(Error::Usage(format!("sequence length {} exceeds {max_len}", seq.len())));
        }
        let e = base.embed_tokens(seq)?;
        for j in 0..seq.len() {
            counts[j] += 1;
            for (a, b) in sum.row_mut(j).iter_mut().zip(e.row(j)) {
                *a += b;
            }
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        if c > 0 {
            sum.row_mut(j).iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    Ok(ClassAggregate { mean: sum, counts })
}

/// `K` unit-norm prototypes, `[K × D″]`. Frozen once built.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    protos: Tensor,
    frozen: bool,
}

impl PrototypeSet {
    /// Wraps rows that must already be unit-norm; the set is frozen.
    pub fn from_unit_rows(protos: Tensor) -> Result<Self> {
        for (k, r) in protos.iter_rows().enumerate() {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Usage(format!("prototype {k} has norm {n}, expected 1")));
            }
        }
        Ok(PrototypeSet { protos, frozen: true })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.protos
    }

    pub fn num_classes(&self) -> usize {
        self.protos.rows()
    }

    pub fn dim(&self) -> usize {
        self.protos.cols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Always refused: prototypes never change after construction.
    pub fn set_row(&mut self, k: usize, _row: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Usage(format!("prototype {k} is frozen and cannot be modified")));
        }
        unreachable!("prototype sets are frozen at construction")
    }

    /// Index of the prototype with the largest inner product.
    pub fn nearest(&self, e: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, p) in self.protos.iter_rows().enumerate() {
            let s: f64 = p.iter().zip(e).map(|(a, b)| a * b).sum();
            if s > best.1 {
                best = (k, s);
            }
        }
        best.0
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new(
            "prototypes",
            json!({"num_classes": self.num_classes(), "dim": self.dim(), "sources": meta}),
        );
        c.push("prototypes", &self.protos);
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind("prototypes", path)?;
        let t = c
            .tensor("prototypes")
            .ok_or_else(|| Error::format(path, "missing prototypes tensor"))?;
        // stored as f32; renormalizing would break bit-exact round trips
        Ok(PrototypeSet {
            protos: t.clone(),
            frozen: true,
        })
    }
}

/// Builds one prototype per class: the mean over valid positions of the
/// class aggregate, normalized. `labels` are 0-based.
pub fn build_prototypes(
    tokens: &[Vec<usize>],
    labels: &[usize],
    num_classes: usize,
    base: &MaskedTransformer,
) -> Result<PrototypeSet> {
    if tokens.len() != labels.len() {
        return Err(Error::Usage("one label per token sequence required".into()));
    }
    let max_len = tokens.iter().map(Vec::len).max().unwrap_or(0);
    let d = base.arch().transformer.model_dim;
    let mut protos = Tensor::zeros(num_classes, d);
    for k in 0..num_classes {
        let seqs: Vec<&[usize]> = tokens
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == k)
            .map(|(t, _)| t.as_slice())
            .collect();
        if seqs.is_empty() {
            return Err(Error::Usage(format!(
                "class {k} has no samples; every class must be present"
            )));
        }
        let agg = aggregate_class(&seqs, base, max_len)?;
        let valid: Vec<usize> = (0..max_len).filter(|&j| agg.counts[j] > 0).collect();
        let mut p = vec![0.0; d];
        for &j in &valid {
            for (a, b) in p.iter_mut().zip(agg.mean.row(j)) {
                *a += b;
            }
        }
        p.iter_mut().for_each(|x| *x /= valid.len() as f64);
        let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < MIN_NORM {
            return Err(Error::Numerical(format!(
                "degenerate prototype for class {k}: norm {n:e}"
            )));
        }
        for (o, x) in protos.row_mut(k).iter_mut().zip(&p) {
            *o = x / n;
        }
    }
    Ok(PrototypeSet { protos, frozen: true })
}

/// Scaled margin softmax for one embedding `e` with 0-based label `y`.
pub fn rmc_loss(e: &[f64], y: usize, protos: &PrototypeSet, mu: f64, eps: f64) -> Result<f64> {
    if e.len() != protos.dim() {
        return Err(Error::Usage(format!(
            "embedding dim {} does not match prototype dim {}",
            e.len(),
            protos.dim()
        )));
    }
    if y >= protos.num_classes() {
        return Err(Error::Usage(format!(
            "label {y} outside {} classes",
            protos.num_classes()
        )));
    }
    let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-4 {
        return Err(Error::Usage(format!("rmc_loss needs a unit embedding, got norm {n}")));
    }
    let logits: Vec<f64> = protos
        .matrix()
        .iter_rows()
        .enumerate()
        .map(|(k, p)| {
            let s = mu * p.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
            if k == y {
                s - eps
            } else {
                s
            }
        })
        .collect();
    Ok(log_sum_exp(&logits) - logits[y])
}

/// Batch mean of [`rmc_loss`] over rows of `e`.
pub fn rmc_loss_batch(e: &Tensor, labels: &[usize], protos: &PrototypeSet, mu: f64, eps: f64) -> Result<f64> {
    if e.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Usage("one label per embedding row required".into()));
    }
    let mut total = 0.0;
    for (r, &y) in e.iter_rows().zip(labels) {
        total += rmc_loss(r, y, protos, mu, eps)?;
    }
    Ok(total / labels.len() as f64)
}

/// Records the batch-mean margin loss for unit rows `e`.
pub fn rmc_loss_on_tape(tape: &mut Tape, e: Var, labels: &[usize], protos: &PrototypeSet, mu: f64, eps: f64) -> Var {
    let b = labels.len();
    let k = protos.num_classes();
    let p = tape.constant(protos.matrix().clone());
    let sims = tape.matmul_nt(e, p);
    let scaled = tape.scale(sims, mu);
    let mut margin = Tensor::zeros(b, k);
    for (i, &y) in labels.iter().enumerate() {
        margin.set(i, y, -eps);
    }
    let margin = tape.constant(margin);
    let logits = tape.add(scaled, margin);
    let targets: Vec<Option<usize>> = labels.iter().map(|&y| Some(y)).collect();
    tape.cross_entropy(logits, &targets, &vec![1.0 / b as f64; b])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectifierArch {
    pub obs_dim: usize,
    pub hidden_dim: usize,
    pub proto_dim: usize,
}

/// Gated delta-rectification modulator `G` with the projection `P` into
/// prototype space.
#[derive(Clone)]
pub struct Rectifier {
    arch: RectifierArch,
    store: ParamStore,
    pub(crate) ln_gain: ParamId,
    pub(crate) ln_bias: ParamId,
    pub(crate) w1: ParamId,
    pub(crate) w2: ParamId,
    pub(crate) w3: ParamId,
    /// Fixed semi-orthogonal `[D″ × D_v]` map; not trained.
    proj: Tensor,
}

impl Rectifier {
    /// `W2` starts at zero, so a fresh modulator is the identity.
    pub fn new(arch: RectifierArch, seed: u64) -> Result<Self> {
        if arch.obs_dim == 0 || arch.hidden_dim == 0 || arch.proto_dim == 0 {
            return Err(Error::Config("rectifier dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dv, dh) = (arch.obs_dim, arch.hidden_dim);
        let mut store = ParamStore::new();
        let ln_gain = store.add("gdr.norm.gain", Tensor::filled(1, dv, 1.0));
        let ln_bias = store.add("gdr.norm.bias", Tensor::zeros(1, dv));
        let w1 = store.add("gdr.w1", linear_weight(&mut rng, dh, dv, 1.0));
        let w2 = store.add("gdr.w2", Tensor::zeros(dv, dh));
        let w3 = store.add("gdr.w3", linear_weight(&mut rng, dv, dv, 1.0));
        let proj = semi_orthogonal(&mut rng, arch.proto_dim, dv);
        Ok(Rectifier {
            arch,
            store,
            ln_gain,
            ln_bias,
            w1,
            w2,
            w3,
            proj,
        })
    }

    pub fn arch(&self) -> &RectifierArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn projection(&self) -> &Tensor {
        &self.proj
    }

    /// `y = x + σ(W3·LN(x)) ⊙ W2·GELU(W1·LN(x))` for rows of `x`.
    pub fn forward_tape(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = tape.layer_norm(x, p[self.ln_gain], p[self.ln_bias]);
        let a = tape.linear(h, p[self.w1], None);
        let a = tape.gelu(a);
        let delta = tape.linear(a, p[self.w2], None);
        let g = tape.linear(h, p[self.w3], None);
        let g = tape.sigmoid(g);
        let gd = tape.mul(g, delta);
        tape.add(x, gd)
    }

    /// Unit embeddings in prototype space, `normalize(P·G(x))`.
    pub fn project_tape(&self, tape: &mut Tape, y: Var) -> Var {
        let w = tape.constant(self.proj.clone());
        let e = tape.linear(y, w, None);
        tape.normalize_rows(e)
    }

    /// Gate and delta for one vector, evaluated directly.
    pub fn gate_and_delta(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.arch.obs_dim || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage(format!(
                "observation must be {} finite values",
                self.arch.obs_dim
            )));
        }
        let (xhat, _) = layer_norm_rows(&Tensor::row_vector(x.to_vec()));
        let gain = self.store.get(self.ln_gain);
        let bias = self.store.get(self.ln_bias);
        let h = xhat.zip_map(gain, |a, g| a * g).zip_map(bias, |a, b| a + b);
        let a = h.matmul_nt(self.store.get(self.w1)).map(gelu);
        let delta = a.matmul_nt(self.store.get(self.w2));
        let gate = h.matmul_nt(self.store.get(self.w3)).map(sigmoid);
        Ok((gate.into_vec(), delta.into_vec()))
    }

    pub fn gated_delta_rectify(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (g, d) = self.gate_and_delta(x)?;
        Ok(x.iter().zip(g.iter().zip(&d)).map(|(x, (g, d))| x + g * d).collect())
    }

    /// `normalize(G(x))`, the condition used by the motion transformer.
    pub fn rectified_embedding(&self, x: &[f64]) -> Result<Vec<f64>> {
        normalized(self.gated_delta_rectify(x)?)
    }

    /// `normalize(P·G(x))`, the embedding compared against prototypes.
    pub fn prototype_embedding(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = Tensor::row_vector(self.gated_delta_rectify(x)?);
        normalized(y.matmul_nt(&self.proj).into_vec())
    }

    /// Rectified conditions for rows of `obs`.
    pub fn rectify_rows(&self, obs: &Tensor) -> Result<Tensor> {
        let rows = obs
            .iter_rows()
            .map(|r| self.rectified_embedding(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_rows(&rows, self.arch.obs_dim))
    }

    pub fn project_rows(&self, obs: &Tensor) -> Result<Tensor> {
        let rows = obs
            .iter_rows()
            .map(|r| self.prototype_embedding(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_rows(&rows, self.arch.proto_dim))
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new("rectifier", json!({"arch": self.arch, "sources": meta}));
        for (n, t) in self.store.iter() {
            c.push(n, t);
        }
        c.push(PROJ_NAME, &self.proj);
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind("rectifier", path)?;
        let arch: RectifierArch =
            serde_json::from_value(c.meta["arch"].clone()).map_err(|e| Error::format(path, format!("arch: {e}")))?;
        let mut r = Rectifier::new(arch, 0)?;
        let (proj, params): (Vec<_>, Vec<_>) = c.tensors.iter().cloned().partition(|(n, _)| n == PROJ_NAME);
        r.store.load_named(&params).map_err(|e| Error::format(path, e))?;
        match proj.as_slice() {
            [(_, t)] if t.shape() == r.proj.shape() => r.proj = t.clone(),
            _ => return Err(Error::format(path, "missing or malformed projection tensor")),
        }
        Ok(r)
    }
}

const PROJ_NAME: &str = "proj.weight";

/// `[rows × cols]` with orthonormal columns (`rows ≥ cols`) or rows, from
/// the QR factorization of a Gaussian matrix, rounded to f32. With
/// orthonormal columns it preserves cosines exactly.
fn semi_orthogonal<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let (tall, wide) = (rows.max(cols), rows.min(cols));
    let g = normal_tensor(rng, tall, wide, 1.0);
    let q = nalgebra::DMatrix::from_row_slice(tall, wide, g.data()).qr().q();
    let q = if rows >= cols { q } else { q.transpose() };
    let mut t = Tensor::from_vec(rows, cols, q.transpose().as_slice().to_vec());
    t.round_to_f32();
    t
}

fn normalized(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > MIN_NORM) {
        return Err(Error::Numerical(format!("degenerate embedding: norm {n:e}")));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Conditions for motion-transformer training: rectified observations,
/// plus `λ · L_RMC` on their projections.
pub struct SteeringConditions<'a> {
    pub rectifier: &'a mut Rectifier,
    pub observations: &'a Tensor,
    pub labels: &'a [usize],
    pub prototypes: &'a PrototypeSet,
    pub mu: f64,
    pub eps: f64,
    pub lambda: f64,
    /// When false, `G` and `P` stay fixed.
    pub train_rectifier: bool,
}

impl ConditionSource for SteeringConditions<'_> {
    fn cond_dim(&self) -> usize {
        self.rectifier.arch.obs_dim
    }

    fn trainable(&mut self) -> Option<&mut ParamStore> {
        if self.train_rectifier {
            Some(&mut self.rectifier.store)
        } else {
            None
        }
    }

    fn record(&self, tape: &mut Tape, bound: Option<&Bound>, indices: &[usize]) -> Result<(Var, Option<Var>)> {
        let owned;
        let p = match bound {
            Some(b) => b,
            None => {
                owned = self.rectifier.store.bind(tape, false);
                &owned
            }
        };
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.observations.row(i)).collect();
        let x = tape.constant(Tensor::from_rows(&rows, self.observations.cols()));
        let y = self.rectifier.forward_tape(tape, p, x);
        for i in 0..indices.len() {
            let n = tape.value(y).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > MIN_NORM) {
                return Err(Error::Numerical(format!(
                    "degenerate rectified embedding for sample {}",
                    indices[i]
                )));
            }
        }
        let cond = tape.normalize_rows(y);
        if self.lambda == 0.0 {
            return Ok((cond, None));
        }
        let e = self.rectifier.project_tape(tape, y);
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        let rmc = rmc_loss_on_tape(tape, e, &labels, self.prototypes, self.mu, self.eps);
        Ok((cond, Some(tape.scale(rmc, self.lambda))))
    }
}
