//! Distribution metrics for generated motions and relation diagnostics
//! for observation embeddings.

use std::path::Path;

use image::{Rgb, RgbImage};
use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::codec::{MotionSequence, RvqCodec};
use crate::error::{Error, Result};
use crate::generator::MaskedTransformer;
use crate::tensor::Tensor;

/// Feature rows `[M × D_f]` with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl FeatureSet {
    pub fn new(features: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if !features.all_finite() {
            return Err(Error::Numerical("feature set contains non-finite values".into()));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::Usage(format!(
                    "{} labels for {} features",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(FeatureSet { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Mean-pooled base-transformer token embeddings of each motion's
/// first-layer tokens.
pub fn extract_features(motions: &[MotionSequence], codec: &RvqCodec, base: &MaskedTransformer) -> Result<Tensor> {
    if motions.is_empty() {
        return Err(Error::Usage("extract_features: no motions".into()));
    }
    let d = base.arch().transformer.model_dim;
    let mut out = Tensor::zeros(motions.len(), d);
    for (i, m) in motions.iter().enumerate() {
        let tokens = codec.tokenize(m)?;
        let e = base.embed_tokens(&tokens[0])?;
        let row = out.row_mut(i);
        for r in e.iter_rows() {
            for (o, x) in row.iter_mut().zip(r) {
                *o += x;
            }
        }
        row.iter_mut().for_each(|x| *x /= e.rows() as f64);
    }
    Ok(out)
}

fn mean_and_cov(x: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (m, d) = x.shape();
    let a = DMatrix::from_row_slice(m, d, x.data());
    let mu = a.row_mean();
    let mut centered = a.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mu;
    }
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    (mu.transpose(), cov)
}

fn sym_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Fréchet distance between Gaussian fits of two feature sets, with
/// unbiased covariances. `Tr((Σa Σb)^½)` is computed from the eigenvalues
/// of the symmetric matrix `Σa^½ Σb Σa^½`, negatives clamped to zero.
pub fn fid(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.cols();
    if b.cols() != d || a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Usage(
            "fid needs two feature sets of equal width with at least 2 rows each".into(),
        ));
    }
    if a.rows() <= d || b.rows() <= d {
        warn!(
            "fid on {} and {} samples of dimension {d}: covariances are rank deficient",
            a.rows(),
            b.rows()
        );
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    let ea = sym_eigen(cov_a.clone());
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(|v| v.max(0.0).sqrt()))
        * ea.eigenvectors.transpose();
    let inner = sym_eigen(&sqrt_a * &cov_b * &sqrt_a);
    let scale = cov_a.trace().abs().max(cov_b.trace().abs()).max(1.0);
    let mut tr_sqrt = 0.0;
    for &v in inner.eigenvalues.iter() {
        if v < -1e-6 * scale {
            warn!("fid: clamping eigenvalue {v:.3e} of the covariance product to zero");
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let diff = (&mu_a - &mu_b).norm_squared();
    let value = diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "fid is not finite (mean term {diff}, traces {} and {}, sqrt trace {tr_sqrt})",
            cov_a.trace(),
            cov_b.trace()
        )));
    }
    Ok(value.max(0.0))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance over `pairs` random pairs. Pairs are disjoint when
/// `M ≥ 2·pairs`, otherwise drawn with replacement.
pub fn diversity<R: Rng>(f: &Tensor, pairs: usize, rng: &mut R) -> Result<f64> {
    let m = f.rows();
    if m < 2 || pairs == 0 {
        return Err(Error::Usage(format!(
            "diversity needs at least 2 features and 1 pair (got {m} and {pairs})"
        )));
    }
    let mut total = 0.0;
    if m >= 2 * pairs {
        let idx = sample(rng, m, 2 * pairs);
        for p in 0..pairs {
            total += dist(f.row(idx.index(2 * p)), f.row(idx.index(2 * p + 1)));
        }
    } else {
        warn!("diversity: {m} features for {pairs} pairs, sampling with replacement");
        for _ in 0..pairs {
            let idx = sample(rng, m, 2);
            total += dist(f.row(idx.index(0)), f.row(idx.index(1)));
        }
    }
    Ok(total / pairs as f64)
}

/// Mean over classes of the mean distance between `pairs_per_class`
/// random within-class pairs of distinct samples.
pub fn multimodality<R: Rng>(f: &Tensor, labels: &[usize], pairs_per_class: usize, rng: &mut R) -> Result<f64> {
    if labels.len() != f.rows() || labels.is_empty() || pairs_per_class == 0 {
        return Err(Error::Usage(
            "multimodality needs one label per feature and ≥ 1 pair".into(),
        ));
    }
    let k = labels.iter().max().unwrap() + 1;
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut total = 0.0;
    let mut classes = 0;
    for (c, idx) in members.iter().enumerate() {
        match idx.len() {
            0 => continue,
            1 => return Err(Error::Usage(format!("multimodality: class {c} has a single sample"))),
            n => {
                let mut s = 0.0;
                for _ in 0..pairs_per_class {
                    let p = sample(rng, n, 2);
                    s += dist(f.row(idx[p.index(0)]), f.row(idx[p.index(1)]));
                }
                total += s / pairs_per_class as f64;
                classes += 1;
            }
        }
    }
    Ok(total / classes as f64)
}

/// `S[a][b]` is the mean cosine over pairs from classes `a` and `b`,
/// excluding self-pairs on the diagonal.
pub fn relation_matrix(e: &Tensor, labels: &[usize], num_classes: usize) -> Result<Tensor> {
    if labels.len() != e.rows() {
        return Err(Error::Usage(format!(
            "{} labels for {} embeddings",
            labels.len(),
            e.rows()
        )));
    }
    let mut unit = e.clone();
    for i in 0..e.rows() {
        let row = unit.row_mut(i);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Usage(format!("embedding {i} has zero norm")));
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    let mut members = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Usage(format!("label {l} outside {num_classes} classes")));
        }
        members[l].push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::Usage(format!("class {c} has no embeddings")));
    }
    let gram = unit.matmul_nt(&unit);
    let mut s = Tensor::zeros(num_classes, num_classes);
    for a in 0..num_classes {
        for b in a..num_classes {
            let (mut sum, mut n) = (0.0, 0usize);
            for &i in &members[a] {
                for &j in &members[b] {
                    if i != j {
                        sum += gram.get(i, j);
                        n += 1;
                    }
                }
            }
            // a singleton class has no off-self pair; its embedding matches itself
            let v = if n == 0 { 1.0 } else { sum / n as f64 };
            s.set(a, b, v);
            s.set(b, a, v);
        }
    }
    Ok(s)
}

/// Mean off-diagonal entry of a relation matrix.
pub fn distortion_score(s: &Tensor) -> Result<f64> {
    let k = s.rows();
    if k < 2 || s.cols() != k {
        return Err(Error::Usage("distortion_score needs a square matrix with K ≥ 2".into()));
    }
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                total += s.get(a, b);
            }
        }
    }
    Ok(total / (k * (k - 1)) as f64)
}

/// Mean and 95% confidence half-width (Student t) over repeated trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci95: f64,
    pub trials: usize,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let r = values.len();
        let mean = values.iter().sum::<f64>() / r as f64;
        let ci95 = if r < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
            let t = StudentsT::new(0.0, 1.0, (r - 1) as f64)
                .expect("positive degrees of freedom")
                .inverse_cdf(0.975);
            t * (var / r as f64).sqrt()
        };
        MetricSummary {
            mean,
            ci95,
            trials: r,
            values,
        }
    }
}

/// Repeats a stochastic metric with per-trial RNG streams of `seed`.
pub fn repeat_trials(
    trials: usize,
    seed: u64,
    mut f: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<MetricSummary> {
    if trials == 0 {
        return Err(Error::Usage("metric repeats must be ≥ 1".into()));
    }
    let mut values = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        values.push(f(&mut rng)?);
    }
    Ok(MetricSummary::from_values(values))
}

pub fn write_relation_csv(path: &Path, s: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = std::iter::once("class".to_string())
        .chain((0..s.cols()).map(|b| format!("c{b}")))
        .collect();
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (a, row) in s.iter_rows().enumerate() {
        let rec: Vec<String> = std::iter::once(format!("c{a}"))
            .chain(row.iter().map(|v| format!("{v:?}")))
            .collect();
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_relation_csv(path: &Path) -> Result<Tensor> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::format(path, format!("{v:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let k = rows.len();
    if k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::format(path, "relation matrix is not square"));
    }
    Ok(Tensor::from_rows(&rows, k))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Heatmap of a relation matrix: blue at −1, white at 0, red at +1.
pub fn render_heatmap(path: &Path, s: &Tensor, cell: u32) -> Result<()> {
    let k = s.rows() as u32;
    let mut img = RgbImage::new(k * cell, k * cell);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = s.get((y / cell) as usize, (x / cell) as usize).clamp(-1.0, 1.0);
        let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
        *px = if v >= 0.0 {
            Rgb([255, fade(v), fade(v)])
        } else {
            Rgb([fade(v), fade(v), 255])
        };
    }
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}
