//! Stage orchestration over a run directory.
//!
//! A run directory holds `checkpoints/`, an append-only `ledger.jsonl`
//! and, while a command runs, a `.lock` file. Every checkpoint records the
//! content hashes of the artifacts it was built from under `sources`;
//! loading a downstream checkpoint against a different upstream one is a
//! configuration error.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::codec::{train_rvq, MotionSequence, RvqCodec};
use crate::config::{AblationConfig, PipelineConfig};
use crate::container::{sha256_hex, Container};
use crate::dataset::{generate_dataset, read_dataset, write_dataset, Dataset, MotionClassifier, Sample};
use crate::error::{Error, Result};
use crate::generator::{train_masked, FixedConditions, MaskedArch, MaskedTransformer, Role};
use crate::metrics::{
    distortion_score, diversity, extract_features, fid, multimodality, relation_matrix, render_heatmap, repeat_trials,
    write_relation_csv, MetricSummary,
};
use crate::refinement::{
    coupled_first_layer_tokens, train_residual, LayeredTokens, ReactionGenerator, ResidualArch, ResidualTransformer,
};
use crate::steering::{build_prototypes, PrototypeSet, Rectifier, RectifierArch, SteeringConditions};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Rvq,
    Base,
    Motion,
    Residual,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Rvq => "rvq",
            Stage::Base => "base",
            Stage::Motion => "motion",
            Stage::Residual => "residual",
        }
    }

    fn seed(self, seed: u64) -> u64 {
        let k = match self {
            Stage::Rvq => 1,
            Stage::Base => 2,
            Stage::Motion => 3,
            Stage::Residual => 4,
        };
        seed.wrapping_mul(1000).wrapping_add(k)
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rvq" => Ok(Stage::Rvq),
            "base" => Ok(Stage::Base),
            "motion" => Ok(Stage::Motion),
            "residual" => Ok(Stage::Residual),
            _ => Err(Error::Usage(format!(
                "unknown stage {s:?} (rvq, base, motion, residual)"
            ))),
        }
    }
}

/// Checkpoint files and the stage that writes them.
const CHECKPOINTS: [(&str, Stage); 6] = [
    ("codec", Stage::Rvq),
    ("base", Stage::Base),
    ("prototypes", Stage::Motion),
    ("rectifier", Stage::Motion),
    ("motion", Stage::Motion),
    ("residual", Stage::Residual),
];

/// A locked run directory.
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        let ckpt = root.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let lock = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Usage(format!(
                    "run directory {} is locked by another command (remove {} if no command is running)",
                    root.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        Ok(RunDir {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn ledger(&self) -> RunLedger {
        RunLedger {
            path: self.root.join("ledger.jsonl"),
        }
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub command: String,
    pub stage: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hash: Option<String>,
    /// Written artifacts by name.
    pub checkpoints: BTreeMap<String, String>,
    /// Artifacts read, by name.
    pub upstream: BTreeMap<String, String>,
    pub ablation: AblationConfig,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub report: Option<Value>,
    pub wall_clock_s: f64,
}

impl LedgerEntry {
    fn new(command: &str, stage: Option<Stage>, cfg: &PipelineConfig) -> Self {
        LedgerEntry {
            command: command.into(),
            stage: stage.map(|s| s.name().to_string()),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            dataset_hash: None,
            checkpoints: BTreeMap::new(),
            upstream: BTreeMap::new(),
            ablation: cfg.ablation,
            losses: Vec::new(),
            report: None,
            wall_clock_s: 0.0,
        }
    }
}

pub struct RunLedger {
    path: PathBuf,
}

impl RunLedger {
    pub fn append(&self, entry: &LedgerEntry) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format(&self.path, e.to_string())))
            .collect()
    }
}

/// A loaded checkpoint with its file hash and recorded sources.
pub struct Loaded<T> {
    pub value: T,
    pub hash: String,
    pub sources: Value,
    pub path: PathBuf,
}

fn load_checkpoint<T>(
    run: &RunDir,
    name: &str,
    needed_by: &str,
    parse: impl Fn(&Container, &Path) -> Result<T>,
) -> Result<Loaded<T>> {
    let path = run.checkpoint(name);
    if !path.exists() {
        let stage = CHECKPOINTS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| s.name())
            .unwrap_or(name);
        return Err(Error::Usage(format!(
            "{needed_by} requires the {name} checkpoint from stage `{stage}` ({} is missing); run `train {stage}` first",
            path.display()
        )));
    }
    let (c, hash) = Container::load(&path)?;
    let value = parse(&c, &path)?;
    Ok(Loaded {
        value,
        hash,
        sources: c.meta.get("sources").cloned().unwrap_or(Value::Null),
        path,
    })
}

/// Fails unless `sources[key]` records `expected` (a hash or `None`).
fn check_source<T>(of: &Loaded<T>, key: &str, expected: Option<&str>) -> Result<()> {
    let recorded = of.sources.get(key).and_then(Value::as_str);
    if recorded != expected {
        let short = |h: Option<&str>| h.map_or("none".to_string(), |h| h[..12.min(h.len())].to_string());
        return Err(Error::Config(format!(
            "hash mismatch: {} was built from {key} {} but the current {key} is {}; retrain the downstream stages",
            of.path.display(),
            short(recorded),
            short(expected)
        )));
    }
    Ok(())
}

/// `root` itself when it holds a manifest, else `root/split`.
pub fn resolve_split(root: &Path, split: &str) -> PathBuf {
    if root.join("manifest.json").exists() {
        root.to_path_buf()
    } else {
        root.join(split)
    }
}

fn load_data(root: &Path, split: &str) -> Result<(Dataset, String)> {
    let dir = resolve_split(root, split);
    let manifest = dir.join("manifest.json");
    let bytes = fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
    Ok((read_dataset(&dir)?, sha256_hex(&bytes)))
}

fn refuse_overwrite(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        return Err(Error::Usage(format!(
            "refusing to overwrite {}; pass --force",
            p.display()
        )));
    }
    Ok(())
}

fn save_with_sources(mut c: Container, sources: Value, path: &Path) -> Result<String> {
    c.meta["sources"] = sources;
    c.save(path)
}

/// Writes the train and test splits to `out/train` and `out/test`.
pub fn cmd_synth(cfg: &PipelineConfig, out: &Path, force: bool) -> Result<(Dataset, Dataset)> {
    let mut synth = cfg.data.clone();
    synth.seed = cfg.seed;
    let (train, test) = generate_dataset(&synth)?;
    match fs::create_dir(out) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            refuse_overwrite(&[out.join("train"), out.join("test")], force)?;
        }
        Err(e) => return Err(Error::io(out, e)),
    }
    write_dataset(&out.join("train"), &train)?;
    write_dataset(&out.join("test"), &test)?;
    info!(
        "wrote {} train and {} test samples to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok((train, test))
}

fn masked_arch(cfg: &PipelineConfig, cond_dim: usize, max_len: usize) -> MaskedArch {
    MaskedArch {
        transformer: cfg.transformer,
        codebook_size: cfg.codec.codebook_size,
        cond_dim,
        max_len,
    }
}

fn max_len(cfg: &PipelineConfig, data: &Dataset) -> usize {
    cfg.max_latent_len().max(cfg.codec.latent_len(data.max_frames()))
}

fn tokenize_all(codec: &RvqCodec, data: &Dataset) -> Result<Vec<LayeredTokens>> {
    data.samples.iter().map(|s| codec.tokenize(&s.motion)).collect()
}

fn load_codec(run: &RunDir, needed_by: &str) -> Result<Loaded<RvqCodec>> {
    load_checkpoint(run, "codec", needed_by, RvqCodec::from_container)
}

fn load_masked(run: &RunDir, name: &str, needed_by: &str) -> Result<Loaded<MaskedTransformer>> {
    load_checkpoint(run, name, needed_by, MaskedTransformer::from_container)
}

/// The rectifier a motion checkpoint was trained with, if any.
fn load_rectifier_of<T>(run: &RunDir, motion: &Loaded<T>, needed_by: &str) -> Result<Option<Loaded<Rectifier>>> {
    if motion.sources.get("rectifier").and_then(Value::as_str).is_none() {
        return Ok(None);
    }
    let r = load_checkpoint(run, "rectifier", needed_by, Rectifier::from_container)?;
    check_source(motion, "rectifier", Some(&r.hash))?;
    Ok(Some(r))
}

/// Trains one stage on the train split under `data_root`.
pub fn cmd_train(
    stage: Stage,
    cfg: &PipelineConfig,
    data_root: &Path,
    run: &RunDir,
    force: bool,
) -> Result<LedgerEntry> {
    let start = Instant::now();
    let (data, dhash) = load_data(data_root, "train")?;
    if data.pose_dim != cfg.codec.pose_dim {
        return Err(Error::Config(format!(
            "dataset pose_dim {} differs from codec.pose_dim {}",
            data.pose_dim, cfg.codec.pose_dim
        )));
    }
    let outputs: Vec<PathBuf> = CHECKPOINTS
        .iter()
        .filter(|(_, s)| *s == stage)
        .map(|(n, _)| run.checkpoint(n))
        .collect();
    refuse_overwrite(&outputs, force)?;
    let seed = stage.seed(cfg.seed);
    let needed_by = format!("stage `{}`", stage.name());
    let mut entry = LedgerEntry::new("train", Some(stage), cfg);
    entry.dataset_hash = Some(dhash.clone());
    let obs = data.observations();
    let labels = data.labels();
    let ml = max_len(cfg, &data);
    match stage {
        Stage::Rvq => {
            let (codec, logs) = train_rvq(&data.motions(), &cfg.codec, seed)?;
            let h = save_with_sources(
                codec.to_container(),
                json!({"dataset": dhash}),
                &run.checkpoint("codec"),
            )?;
            entry.checkpoints.insert("codec".into(), h);
            entry.losses = logs.iter().map(|l| l.loss).collect();
        }
        Stage::Base => {
            let codec = load_codec(run, &needed_by)?;
            check_source(&codec, "dataset", Some(&dhash))?;
            let tokens: Vec<Vec<usize>> = tokenize_all(&codec.value, &data)?
                .into_iter()
                .map(|mut l| l.swap_remove(0))
                .collect();
            let mut base = MaskedTransformer::new(Role::Base, masked_arch(cfg, data.obs_dim, ml), seed)?;
            let logs = train_masked(&mut base, &tokens, &mut FixedConditions(&obs), &cfg.base, seed)?;
            let h = save_with_sources(
                base.to_container(),
                json!({"codec": codec.hash, "dataset": dhash}),
                &run.checkpoint("base"),
            )?;
            entry.upstream.insert("codec".into(), codec.hash);
            entry.checkpoints.insert("base".into(), h);
            entry.losses = logs.iter().map(|l| l.loss).collect();
        }
        Stage::Motion => {
            let codec = load_codec(run, &needed_by)?;
            let base = load_masked(run, "base", &needed_by)?;
            check_source(&base, "codec", Some(&codec.hash))?;
            check_source(&base, "dataset", Some(&dhash))?;
            let tokens: Vec<Vec<usize>> = tokenize_all(&codec.value, &data)?
                .into_iter()
                .map(|mut l| l.swap_remove(0))
                .collect();
            let mut motion = MaskedTransformer::new(Role::Motion, masked_arch(cfg, data.obs_dim, ml), seed)?;
            if cfg.ablation.init_from_base {
                motion.init_from(&base.value)?;
            }
            let mut sources = json!({
                "codec": codec.hash,
                "base": base.hash,
                "dataset": dhash,
                "prototypes": null,
                "rectifier": null,
            });
            let logs = if cfg.ablation.pfs {
                let protos = build_prototypes(&tokens, &labels, data.num_classes, &base.value)?;
                let ppath = run.checkpoint("prototypes");
                let phash = protos
                    .to_container(json!({"base": base.hash, "codec": codec.hash}))
                    .save(&ppath)?;
                // train against the stored (f32) prototypes
                let (pc, _) = Container::load(&ppath)?;
                let protos = PrototypeSet::from_container(&pc, &ppath)?;
                let arch = RectifierArch {
                    obs_dim: data.obs_dim,
                    hidden_dim: cfg.steering.rectifier_hidden,
                    proto_dim: cfg.transformer.model_dim,
                };
                let mut rectifier = Rectifier::new(arch, seed ^ 0x5eed)?;
                let logs = {
                    let mut cond = SteeringConditions {
                        rectifier: &mut rectifier,
                        observations: &obs,
                        labels: &labels,
                        prototypes: &protos,
                        mu: cfg.steering.mu,
                        eps: cfg.steering.eps,
                        lambda: cfg.steering.lambda,
                        train_rectifier: cfg.steering.train_rectifier,
                    };
                    train_masked(&mut motion, &tokens, &mut cond, &cfg.motion, seed)?
                };
                rectifier.params_mut().round_to_f32();
                let rhash = rectifier
                    .to_container(json!({"prototypes": phash, "base": base.hash, "codec": codec.hash}))
                    .save(&run.checkpoint("rectifier"))?;
                sources["prototypes"] = json!(phash);
                sources["rectifier"] = json!(rhash);
                entry.checkpoints.insert("prototypes".into(), phash);
                entry.checkpoints.insert("rectifier".into(), rhash);
                logs
            } else {
                for stale in ["prototypes", "rectifier"] {
                    let p = run.checkpoint(stale);
                    if p.exists() {
                        fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                    }
                }
                train_masked(&mut motion, &tokens, &mut FixedConditions(&obs), &cfg.motion, seed)?
            };
            let h = save_with_sources(motion.to_container(), sources, &run.checkpoint("motion"))?;
            entry.upstream.insert("codec".into(), codec.hash);
            entry.upstream.insert("base".into(), base.hash);
            entry.checkpoints.insert("motion".into(), h);
            entry.losses = logs.iter().map(|l| l.loss).collect();
        }
        Stage::Residual => {
            let codec = load_codec(run, &needed_by)?;
            let motion = load_masked(run, "motion", &needed_by)?;
            check_source(&motion, "codec", Some(&codec.hash))?;
            check_source(&motion, "dataset", Some(&dhash))?;
            let rectifier = load_rectifier_of(run, &motion, &needed_by)?;
            let rectified = match &rectifier {
                Some(r) => r.value.rectify_rows(&obs)?,
                None => obs.clone(),
            };
            let mut layered = tokenize_all(&codec.value, &data)?;
            let coupled = cfg.ablation.coupled();
            if coupled {
                let lens: Vec<usize> = layered.iter().map(|l| l[0].len()).collect();
                let first = coupled_first_layer_tokens(
                    &motion.value,
                    &rectified,
                    &lens,
                    cfg.refinement.coupled_decode_steps,
                    0.0,
                    seed,
                )?;
                for (l, f) in layered.iter_mut().zip(first) {
                    l[0] = f;
                }
            }
            let arch = ResidualArch {
                transformer: cfg.transformer,
                codebook_size: cfg.codec.codebook_size,
                num_layers: codec.value.codebooks().len(),
                cond_dim: data.obs_dim,
                mixer_hidden: cfg.refinement.mixer_hidden,
                max_len: ml,
                per_layer_heads: cfg.refinement.per_layer_heads,
                branch: cfg.ablation.branch(),
            };
            let mut residual = ResidualTransformer::new(arch, seed)?;
            let logs = train_residual(
                &mut residual,
                &layered,
                &obs,
                &rectified,
                cfg.ablation.supervise_layer_one,
                &cfg.residual,
                seed,
            )?;
            let rhash = rectifier.as_ref().map(|r| r.hash.clone());
            let h = residual
                .to_container(json!({
                    "codec": codec.hash,
                    "motion": motion.hash,
                    "rectifier": rhash,
                    "dataset": dhash,
                    "coupled": coupled,
                }))
                .save(&run.checkpoint("residual"))?;
            entry.upstream.insert("codec".into(), codec.hash);
            entry.upstream.insert("motion".into(), motion.hash);
            if let Some(r) = rhash {
                entry.upstream.insert("rectifier".into(), r);
            }
            entry.checkpoints.insert("residual".into(), h);
            entry.losses = logs.iter().map(|l| l.loss).collect();
        }
    }
    entry.wall_clock_s = start.elapsed().as_secs_f64();
    run.ledger().append(&entry)?;
    info!("stage {} finished in {:.1} s", stage.name(), entry.wall_clock_s);
    Ok(entry)
}

/// Frozen inference modules loaded from a run, lineage-checked.
pub struct InferenceModules {
    pub codec: Loaded<RvqCodec>,
    pub motion: Loaded<MaskedTransformer>,
    pub residual: Loaded<ResidualTransformer>,
    pub rectifier: Option<Loaded<Rectifier>>,
}

impl InferenceModules {
    pub fn load(run: &RunDir) -> Result<Self> {
        let who = "generation";
        let codec = load_codec(run, who)?;
        let motion = load_masked(run, "motion", who)?;
        let residual = load_checkpoint(run, "residual", who, ResidualTransformer::from_container)?;
        check_source(&motion, "codec", Some(&codec.hash))?;
        check_source(&residual, "codec", Some(&codec.hash))?;
        check_source(&residual, "motion", Some(&motion.hash))?;
        let rectifier = load_rectifier_of(run, &motion, who)?;
        check_source(&residual, "rectifier", rectifier.as_ref().map(|r| r.hash.as_str()))?;
        Ok(InferenceModules {
            codec,
            motion,
            residual,
            rectifier,
        })
    }

    pub fn generator(&self, cfg: &PipelineConfig) -> ReactionGenerator<'_> {
        ReactionGenerator {
            codec: &self.codec.value,
            motion: &self.motion.value,
            residual: &self.residual.value,
            rectifier: self.rectifier.as_ref().map(|r| &r.value),
            decode_steps: cfg.generation.decode_steps,
            temperature: cfg.generation.temperature,
        }
    }
}

const GENERATE_CHUNK: usize = 64;

/// One generated motion per observation of the test split under
/// `data_root`, written in dataset format to `out`. Lengths follow each
/// sample's frame count rounded up to whole latent steps.
pub fn cmd_generate(cfg: &PipelineConfig, run: &RunDir, data_root: &Path, out: &Path, force: bool) -> Result<Dataset> {
    let start = Instant::now();
    refuse_overwrite(&[out.join("manifest.json")], force)?;
    let modules = InferenceModules::load(run)?;
    let (data, dhash) = load_data(data_root, "test")?;
    let gen = modules.generator(cfg);
    let lens: Vec<usize> = data
        .samples
        .iter()
        .map(|s| modules.codec.value.config().latent_len(s.motion.num_frames()))
        .collect();
    let obs = data.observations();
    let mut motions: Vec<MotionSequence> = Vec::with_capacity(data.len());
    for (c, chunk) in (0..data.len()).collect::<Vec<_>>().chunks(GENERATE_CHUNK).enumerate() {
        let rows = obs.slice_rows(chunk[0], chunk.len());
        let seed = cfg.seed.wrapping_add(c as u64);
        motions.extend(gen.generate(&rows, &lens[chunk[0]..chunk[0] + chunk.len()], seed)?);
    }
    if let Some(i) = motions.iter().position(|m| !m.frames().all_finite()) {
        return Err(Error::Numerical(format!("generated motion {i} is not finite")));
    }
    let samples = data
        .samples
        .iter()
        .zip(motions)
        .map(|(s, m)| Sample {
            id: s.id.clone(),
            category: s.category,
            motion: m,
            observation: s.observation.clone(),
        })
        .collect();
    let generated = Dataset {
        pose_dim: data.pose_dim,
        obs_dim: data.obs_dim,
        num_classes: data.num_classes,
        config: None,
        samples,
    };
    write_dataset(out, &generated)?;
    let mut entry = LedgerEntry::new("generate", None, cfg);
    entry.dataset_hash = Some(dhash);
    for (name, h) in [
        ("codec", &modules.codec.hash),
        ("motion", &modules.motion.hash),
        ("residual", &modules.residual.hash),
    ] {
        entry.upstream.insert(name.into(), h.clone());
    }
    if let Some(r) = &modules.rectifier {
        entry.upstream.insert("rectifier".into(), r.hash.clone());
    }
    let mbytes = fs::read(out.join("manifest.json")).map_err(|e| Error::io(out, e))?;
    entry
        .checkpoints
        .insert("generated_manifest".into(), sha256_hex(&mbytes));
    entry.report = Some(json!({"outputs": generated.len(), "dir": out.display().to_string()}));
    entry.wall_clock_s = start.elapsed().as_secs_f64();
    run.ledger().append(&entry)?;
    Ok(generated)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub generated_samples: usize,
    pub reference_samples: usize,
    pub fid: MetricSummary,
    pub diversity: MetricSummary,
    pub multimodality: MetricSummary,
    /// Nearest-class-mean accuracy of generated motions under a classifier
    /// fit to the reference motions.
    pub class_accuracy: MetricSummary,
}

/// Metrics of `generated` against `reference`, with features from the run's
/// codec and base transformer.
pub fn cmd_evaluate(cfg: &PipelineConfig, run: &RunDir, generated: &Path, reference: &Path) -> Result<EvalReport> {
    let start = Instant::now();
    let codec = load_codec(run, "evaluation")?;
    let base = load_masked(run, "base", "evaluation")?;
    check_source(&base, "codec", Some(&codec.hash))?;
    let (gen, ghash) = load_data(generated, "test")?;
    let (refd, _) = load_data(reference, "test")?;
    if gen.is_empty() || refd.is_empty() {
        return Err(Error::Usage(
            "evaluation needs non-empty generated and reference sets".into(),
        ));
    }
    let fg = extract_features(&gen.motions(), &codec.value, &base.value)?;
    let fr = extract_features(&refd.motions(), &codec.value, &base.value)?;
    let labels = gen.labels();
    let m = cfg.metrics;
    let fid_v = MetricSummary::from_values(vec![fid(&fg, &fr)?]);
    let div = repeat_trials(m.repeats, cfg.seed, |rng| diversity(&fg, m.diversity_pairs, rng))?;
    let mm = repeat_trials(m.repeats, cfg.seed, |rng| {
        multimodality(&fg, &labels, m.pairs_per_class, rng)
    })?;
    let frames = gen
        .samples
        .iter()
        .chain(&refd.samples)
        .map(|s| s.motion.num_frames())
        .min()
        .unwrap();
    let clf = MotionClassifier::fit(&refd, frames)?;
    let acc = MetricSummary::from_values(vec![clf.accuracy(&gen.motions(), &labels)?]);
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        generated_samples: gen.len(),
        reference_samples: refd.len(),
        fid: fid_v,
        diversity: div,
        multimodality: mm,
        class_accuracy: acc,
    };
    let mut entry = LedgerEntry::new("evaluate", None, cfg);
    entry.dataset_hash = Some(ghash);
    entry.upstream.insert("codec".into(), codec.hash);
    entry.upstream.insert("base".into(), base.hash);
    entry.report = Some(serde_json::to_value(&report)?);
    entry.wall_clock_s = start.elapsed().as_secs_f64();
    run.ledger().append(&entry)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSummary {
    pub distortion_score: f64,
    pub csv: String,
    pub heatmap: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub schema_version: u32,
    pub samples: usize,
    pub num_classes: usize,
    pub raw: RelationSummary,
    /// Present when the run has a trained rectifier.
    pub rectified: Option<RelationSummary>,
    pub projected: Option<RelationSummary>,
    /// Nearest-prototype accuracy of projected rectified observations.
    pub prototype_accuracy: Option<f64>,
}

fn relation_outputs(name: &str, e: &Tensor, labels: &[usize], k: usize, out: &Path) -> Result<RelationSummary> {
    let s = relation_matrix(e, labels, k)?;
    let csv = format!("relation_{name}.csv");
    let png = format!("relation_{name}.png");
    write_relation_csv(&out.join(&csv), &s)?;
    render_heatmap(&out.join(&png), &s, 32)?;
    Ok(RelationSummary {
        distortion_score: distortion_score(&s)?,
        csv,
        heatmap: png,
    })
}

/// Relation matrices of the observations in the test split under
/// `data_root`: raw, and with a run, rectified and projected.
pub fn cmd_diagnose(
    cfg: &PipelineConfig,
    data_root: &Path,
    run: Option<&RunDir>,
    out: &Path,
) -> Result<DiagnoseReport> {
    let start = Instant::now();
    let (data, dhash) = load_data(data_root, "test")?;
    if data.num_classes < 2 {
        return Err(Error::Usage(
            "diagnose needs labelled observations from at least 2 classes".into(),
        ));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let obs = data.observations();
    let labels = data.labels();
    let k = data.num_classes;
    let raw = relation_outputs("raw", &obs, &labels, k, out)?;
    let mut report = DiagnoseReport {
        schema_version: REPORT_SCHEMA_VERSION,
        samples: data.len(),
        num_classes: k,
        raw,
        rectified: None,
        projected: None,
        prototype_accuracy: None,
    };
    if let Some(run) = run {
        let mut entry = LedgerEntry::new("diagnose", None, cfg);
        entry.dataset_hash = Some(dhash);
        let motion = load_masked(run, "motion", "diagnosis")?;
        if let Some(r) = load_rectifier_of(run, &motion, "diagnosis")? {
            let protos = load_checkpoint(run, "prototypes", "diagnosis", PrototypeSet::from_container)?;
            check_source(&r, "prototypes", Some(&protos.hash))?;
            let rect = r.value.rectify_rows(&obs)?;
            let proj = r.value.project_rows(&obs)?;
            report.rectified = Some(relation_outputs("rectified", &rect, &labels, k, out)?);
            report.projected = Some(relation_outputs("projected", &proj, &labels, k, out)?);
            let hits = proj
                .iter_rows()
                .zip(&labels)
                .filter(|(e, &y)| protos.value.nearest(e) == y)
                .count();
            report.prototype_accuracy = Some(hits as f64 / labels.len() as f64);
            entry.upstream.insert("rectifier".into(), r.hash);
            entry.upstream.insert("prototypes".into(), protos.hash);
        }
        entry.report = Some(serde_json::to_value(&report)?);
        entry.wall_clock_s = start.elapsed().as_secs_f64();
        run.ledger().append(&entry)?;
    }
    write_json(&out.join("diagnose.json"), &report)?;
    Ok(report)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
