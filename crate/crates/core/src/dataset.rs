//! Paired (observation, reaction) datasets: a synthetic generator and the
//! portable on-disk format.
//!
//! A dataset directory holds `manifest.json`, `motions/<id>.f32` and
//! `obs/<id>.f32`. Blobs are raw little-endian `f32`, row-major, and the
//! manifest records a CRC32 for each one.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::MotionSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_samples: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub pose_dim: usize,
    pub obs_dim: usize,
    /// Weight of the shared confound direction in every class mean.
    pub distortion: f64,
    pub motion_noise: f64,
    pub amplitude_jitter: f64,
    pub phase_jitter: f64,
    pub obs_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            samples_per_class: 50,
            test_samples: 50,
            min_frames: 16,
            max_frames: 24,
            pose_dim: 8,
            obs_dim: 32,
            distortion: 0.8,
            motion_noise: 0.01,
            amplitude_jitter: 0.05,
            phase_jitter: 0.1,
            obs_noise: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range [{}, {}] is empty",
                self.min_frames, self.max_frames
            ));
        }
        if self.pose_dim == 0 || self.obs_dim == 0 {
            return bad("pose_dim and obs_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.distortion) {
            return bad("distortion must lie in [0, 1]".into());
        }
        if self.distortion == 0.0 && self.obs_dim < self.num_classes {
            return bad(format!(
                "obs_dim {} cannot hold {} orthogonal class means",
                self.obs_dim, self.num_classes
            ));
        }
        for (name, v) in [
            ("motion_noise", self.motion_noise),
            ("amplitude_jitter", self.amplitude_jitter),
            ("phase_jitter", self.phase_jitter),
            ("obs_noise", self.obs_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// 0-based class index.
    pub category: usize,
    pub motion_file: String,
    pub obs_file: String,
    pub num_frames: usize,
    pub motion_crc32: u32,
    pub obs_crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub pose_dim: usize,
    pub obs_dim: usize,
    pub num_classes: usize,
    /// Generator settings, absent for externally produced data.
    pub config: Option<SynthConfig>,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub category: usize,
    pub motion: MotionSequence,
    pub observation: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pose_dim: usize,
    pub obs_dim: usize,
    pub num_classes: usize,
    pub config: Option<SynthConfig>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn motions(&self) -> Vec<MotionSequence> {
        self.samples.iter().map(|s| s.motion.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.category).collect()
    }

    /// Observations stacked as `[M × D_v]`.
    pub fn observations(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.samples.iter().map(|s| s.observation.as_slice()).collect();
        Tensor::from_rows(&rows, self.obs_dim)
    }

    pub fn max_frames(&self) -> usize {
        self.samples.iter().map(|s| s.motion.num_frames()).max().unwrap_or(0)
    }
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 40) | index);
    rng
}

/// Orthonormal class directions `b_k` and a confound `s`, orthogonal to
/// every `b_k` whenever the dimension allows it.
fn observation_basis(cfg: &SynthConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = stream(cfg.seed, 1, 0);
    let d = cfg.obs_dim;
    let want = cfg.num_classes + 1;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(want);
    for _ in 0..want {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if basis.len() < d {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        unit(&mut v);
        basis.push(v);
    }
    let s = basis.pop().unwrap();
    (basis, s)
}

/// Normalized class means `m_k = normalize((1−ρ)·b_k + ρ·s)`.
pub fn class_means(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let (basis, s) = observation_basis(cfg);
    let r = cfg.distortion;
    basis
        .into_iter()
        .map(|b| {
            let mut m: Vec<f64> = b.iter().zip(&s).map(|(x, y)| (1.0 - r) * x + r * y).collect();
            unit(&mut m);
            m
        })
        .collect()
}

struct ClassSignature {
    freq: Vec<f64>,
    phase: Vec<f64>,
    amp: Vec<f64>,
    offset: Vec<f64>,
}

fn class_signatures(cfg: &SynthConfig) -> Vec<ClassSignature> {
    (0..cfg.num_classes)
        .map(|k| {
            let mut rng = stream(cfg.seed, 2, k as u64);
            let d = cfg.pose_dim;
            ClassSignature {
                // cycles per 16 frames
                freq: (0..d).map(|_| rng.random_range(0.5..2.0)).collect(),
                phase: (0..d).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
                amp: (0..d).map(|_| rng.random_range(0.4..1.0)).collect(),
                offset: (0..d).map(|_| rng.random_range(-0.3..0.3)).collect(),
            }
        })
        .collect()
}

fn synth_sample(
    cfg: &SynthConfig,
    sig: &ClassSignature,
    mean: &[f64],
    category: usize,
    id: String,
    mut rng: ChaCha8Rng,
) -> Result<Sample> {
    let n = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let d = cfg.pose_dim;
    let amp_j: Vec<f64> = (0..d)
        .map(|_| 1.0 + cfg.amplitude_jitter * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let phase_j: f64 = cfg.phase_jitter * rng.sample::<f64, _>(StandardNormal);
    let mut frames = Tensor::zeros(n, d);
    for t in 0..n {
        for j in 0..d {
            let arg = std::f64::consts::TAU * sig.freq[j] * t as f64 / 16.0 + sig.phase[j] + phase_j;
            let noise: f64 = rng.sample(StandardNormal);
            let v = sig.offset[j] + sig.amp[j] * amp_j[j] * arg.sin() + cfg.motion_noise * noise;
            frames.set(t, j, v);
        }
    }
    frames.round_to_f32();
    let mut obs: Vec<f64> = mean
        .iter()
        .map(|m| m + cfg.obs_noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    unit(&mut obs);
    obs.iter_mut().for_each(|x| *x = *x as f32 as f64);
    Ok(Sample {
        id,
        category,
        motion: MotionSequence::new(frames)?,
        observation: obs,
    })
}

/// Generates the train split (`K · samples_per_class`, grouped by class)
/// and the test split (`test_samples`, class `i mod K`).
pub fn generate_dataset(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let sigs = class_signatures(cfg);
    let means = class_means(cfg);
    let make = |split: &str, tag: u64, cats: Vec<usize>| -> Result<Dataset> {
        let samples = cats
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                let id = format!("{split}-{i:05}");
                synth_sample(cfg, &sigs[k], &means[k], k, id, stream(cfg.seed, tag, i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            pose_dim: cfg.pose_dim,
            obs_dim: cfg.obs_dim,
            num_classes: cfg.num_classes,
            config: Some(cfg.clone()),
            samples,
        })
    };
    let k = cfg.num_classes;
    let train = make(
        "train",
        3,
        (0..k * cfg.samples_per_class)
            .map(|i| i / cfg.samples_per_class)
            .collect(),
    )?;
    let test = make("test", 4, (0..cfg.test_samples).map(|i| i % k).collect())?;
    Ok((train, test))
}

fn f32_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `data` under `dir`, creating `dir` (but not its parent).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<DatasetManifest> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::io(
                parent,
                std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
            ));
        }
    }
    for sub in ["", "motions", "obs"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(data.len());
    for s in &data.samples {
        if s.observation.len() != data.obs_dim || s.motion.pose_dim() != data.pose_dim {
            return Err(Error::Usage(format!("sample {} has inconsistent dimensions", s.id)));
        }
        let motion_file = format!("motions/{}.f32", s.id);
        let obs_file = format!("obs/{}.f32", s.id);
        let mb = f32_le(s.motion.frames().data());
        let ob = f32_le(&s.observation);
        write_file(&dir.join(&motion_file), &mb)?;
        write_file(&dir.join(&obs_file), &ob)?;
        entries.push(ManifestEntry {
            sample_id: s.id.clone(),
            category: s.category,
            motion_file,
            obs_file,
            num_frames: s.motion.num_frames(),
            motion_crc32: crc32fast::hash(&mb),
            obs_crc32: crc32fast::hash(&ob),
        });
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        pose_dim: data.pose_dim,
        obs_dim: data.obs_dim,
        num_classes: data.num_classes,
        config: data.config.clone(),
        samples: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_file(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

fn read_blob(dir: &Path, rel: &str, expect_len: usize, crc: u32) -> Result<Vec<f64>> {
    let path: PathBuf = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != expect_len * 4 {
        return Err(Error::format(
            &path,
            format!(
                "truncated or oversized blob: {} bytes, expected {}",
                bytes.len(),
                expect_len * 4
            ),
        ));
    }
    let found = crc32fast::hash(&bytes);
    if found != crc {
        return Err(Error::Checksum {
            path,
            expected: crc,
            found,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, format!("invalid manifest: {e}")))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!(
                "unsupported dataset format version {} (expected {DATASET_FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

/// Reads and verifies every blob listed in the manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        if e.num_frames == 0 {
            return Err(Error::format(
                dir.join("manifest.json"),
                format!("{} has zero frames", e.sample_id),
            ));
        }
        let m = read_blob(dir, &e.motion_file, e.num_frames * manifest.pose_dim, e.motion_crc32)?;
        let o = read_blob(dir, &e.obs_file, manifest.obs_dim, e.obs_crc32)?;
        let motion = MotionSequence::new(Tensor::from_vec(e.num_frames, manifest.pose_dim, m))
            .map_err(|err| Error::format(dir.join(&e.motion_file), err.to_string()))?;
        samples.push(Sample {
            id: e.sample_id.clone(),
            category: e.category,
            motion,
            observation: o,
        });
    }
    Ok(Dataset {
        pose_dim: manifest.pose_dim,
        obs_dim: manifest.obs_dim,
        num_classes: manifest.num_classes,
        config: manifest.config,
        samples,
    })
}

/// Nearest-class-mean classifier over motions truncated to a common
/// length. Returns predicted classes for `queries`.
pub struct MotionClassifier {
    frames: usize,
    means: Vec<Vec<f64>>,
}

impl MotionClassifier {
    pub fn fit(data: &Dataset, frames: usize) -> Result<Self> {
        if frames == 0 || data.samples.iter().any(|s| s.motion.num_frames() < frames) {
            return Err(Error::Usage("classifier frame count exceeds a training motion".into()));
        }
        let d = frames * data.pose_dim;
        let mut means = vec![vec![0.0; d]; data.num_classes];
        let mut counts = vec![0usize; data.num_classes];
        for s in &data.samples {
            counts[s.category] += 1;
            for (a, b) in means[s.category].iter_mut().zip(&s.motion.frames().data()[..d]) {
                *a += b;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            if c == 0 {
                return Err(Error::Usage("classifier needs every class present".into()));
            }
            m.iter_mut().for_each(|x| *x /= c as f64);
        }
        Ok(MotionClassifier { frames, means })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn predict(&self, motion: &MotionSequence) -> Result<usize> {
        let d = self.means[0].len();
        if motion.num_frames() < self.frames || motion.frames().len() < d {
            return Err(Error::Usage(format!(
                "motion has {} frames, classifier needs {}",
                motion.num_frames(),
                self.frames
            )));
        }
        let x = &motion.frames().data()[..d];
        let mut best = (0, f64::INFINITY);
        for (k, m) in self.means.iter().enumerate() {
            let dist: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        Ok(best.0)
    }

    pub fn accuracy(&self, motions: &[MotionSequence], labels: &[usize]) -> Result<f64> {
        let mut hit = 0;
        for (m, &y) in motions.iter().zip(labels) {
            if self.predict(m)? == y {
                hit += 1;
            }
        }
        Ok(hit as f64 / motions.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{distortion_score, relation_matrix};
    use proptest::prelude::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn split_sizes_and_categories() {
        let (train, test) = generate_dataset(&SynthConfig::default()).unwrap();
        assert_eq!(train.len(), 200);
        assert_eq!(test.len(), 50);
        assert_eq!(test.samples[5].category, 1);
        assert_eq!(train.samples[120].category, 2);
    }

    #[test]
    fn class_mean_cosine_matches_mixing_formula() {
        for rho in [0.0, 0.3, 0.8, 1.0] {
            let cfg = SynthConfig {
                distortion: rho,
                ..SynthConfig::default()
            };
            let m = class_means(&cfg);
            // with s ⟂ b_k: cos = ρ² / ((1−ρ)² + ρ²)
            let expect = rho * rho / ((1.0 - rho).powi(2) + rho * rho);
            assert!((cos(&m[0], &m[1]) - expect).abs() < 1e-12, "rho {rho}");
        }
    }

    fn observation_distortion(rho: f64, noise: f64, seed: u64) -> f64 {
        let cfg = SynthConfig {
            distortion: rho,
            obs_noise: noise,
            seed,
            ..SynthConfig::default()
        };
        let (train, _) = generate_dataset(&cfg).unwrap();
        let s = relation_matrix(&train.observations(), &train.labels(), train.num_classes).unwrap();
        distortion_score(&s).unwrap()
    }

    #[test]
    fn distortion_extremes_without_noise() {
        let cfg = SynthConfig {
            distortion: 0.0,
            obs_noise: 0.0,
            ..SynthConfig::default()
        };
        let (train, _) = generate_dataset(&cfg).unwrap();
        let s = relation_matrix(&train.observations(), &train.labels(), 4).unwrap();
        assert!(s.max_abs_diff(&Tensor::identity(4)) < 1e-6);
        let (train, _) = generate_dataset(&SynthConfig { distortion: 1.0, ..cfg }).unwrap();
        let s = relation_matrix(&train.observations(), &train.labels(), 4).unwrap();
        assert!(s.max_abs_diff(&Tensor::filled(4, 4, 1.0)) < 1e-6);
        assert!(observation_distortion(0.0, 0.03, 0) < 0.05);
        assert!(observation_distortion(0.8, 0.03, 0) >= 0.6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn distortion_dial_is_monotone(seed in 0u64..1000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(observation_distortion(lo, 0.03, seed) <= observation_distortion(hi, 0.03, seed) + 1e-12);
        }
    }

    #[test]
    fn orthogonal_means_need_enough_dimensions() {
        let cfg = SynthConfig {
            distortion: 0.0,
            obs_dim: 3,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_gives_identical_data() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
    }

    #[test]
    fn motions_are_class_separable() {
        let (train, test) = generate_dataset(&SynthConfig::default()).unwrap();
        let clf = MotionClassifier::fit(&train, 16).unwrap();
        let acc = clf.accuracy(&test.motions(), &test.labels()).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn write_read_round_trip_and_corruption() {
        let cfg = SynthConfig {
            samples_per_class: 3,
            test_samples: 4,
            ..SynthConfig::default()
        };
        let (train, _) = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train");
        let manifest = write_dataset(&p, &train).unwrap();
        assert_eq!(manifest.samples.len(), 12);
        assert_eq!(read_dataset(&p).unwrap(), train);

        let file = p.join(&manifest.samples[2].obs_file);
        let mut bytes = fs::read(&file).unwrap();
        bytes[7] ^= 1;
        fs::write(&file, &bytes).unwrap();
        let err = read_dataset(&p).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }));
        assert!(err.to_string().contains("train-00002"), "{err}");

        bytes.truncate(8);
        fs::write(&file, &bytes).unwrap();
        assert!(read_dataset(&p).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn missing_parent_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = generate_dataset(&SynthConfig {
            samples_per_class: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let err = write_dataset(&dir.path().join("no/such/dir"), &train).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
