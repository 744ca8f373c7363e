//! Pipeline configuration: every stage's hyperparameters in one JSON file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::container::sha256_hex;
use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::nn::{TrainConfig, TransformerConfig};
use crate::refinement::MixerBranch;

/// Environment variable consulted when no `--config` is given.
pub const CONFIG_ENV: &str = "REACTGEN_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    /// Scale `μ` of the margin softmax.
    pub mu: f64,
    /// Additive margin `ε`.
    pub eps: f64,
    /// Weight `λ` of the margin loss next to the masked loss.
    pub lambda: f64,
    pub rectifier_hidden: usize,
    pub train_rectifier: bool,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            mu: 30.0,
            eps: 0.4,
            lambda: 1.0,
            rectifier_hidden: 64,
            train_rectifier: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    pub mixer_hidden: usize,
    pub per_layer_heads: bool,
    /// Decode steps used to produce coupled first-layer tokens.
    pub coupled_decode_steps: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            mixer_hidden: 64,
            per_layer_heads: false,
            coupled_decode_steps: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub decode_steps: usize,
    /// `0` decodes greedily.
    pub temperature: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            decode_steps: 10,
            temperature: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub repeats: usize,
    pub diversity_pairs: usize,
    pub pairs_per_class: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            repeats: 20,
            diversity_pairs: 100,
            pairs_per_class: 10,
        }
    }
}

/// Switches for the ablation grid. `pfs = false` conditions the motion
/// transformer on raw observations; `dcrr = false` implies `decoupled`
/// and the raw mixer branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub pfs: bool,
    pub dcrr: bool,
    /// Residual training on quantizer first-layer tokens.
    pub decoupled: bool,
    pub mixer_branch: MixerBranch,
    pub supervise_layer_one: bool,
    /// Start the motion transformer from the base transformer's weights.
    pub init_from_base: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            pfs: true,
            dcrr: true,
            decoupled: false,
            mixer_branch: MixerBranch::Both,
            supervise_layer_one: false,
            init_from_base: false,
        }
    }
}

impl AblationConfig {
    pub fn coupled(&self) -> bool {
        self.dcrr && !self.decoupled
    }

    pub fn branch(&self) -> MixerBranch {
        if self.dcrr {
            self.mixer_branch
        } else {
            MixerBranch::Raw
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub codec: CodecConfig,
    /// Shared by the base, motion and residual transformers.
    pub transformer: TransformerConfig,
    pub base: TrainConfig,
    pub motion: TrainConfig,
    pub residual: TrainConfig,
    pub steering: SteeringConfig,
    pub refinement: RefinementConfig,
    pub generation: GenerationConfig,
    pub metrics: MetricsConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            data: SynthConfig::default(),
            codec: CodecConfig::default(),
            transformer: TransformerConfig::default(),
            base: TrainConfig::default(),
            motion: TrainConfig::default(),
            residual: TrainConfig::default(),
            steering: SteeringConfig::default(),
            refinement: RefinementConfig::default(),
            generation: GenerationConfig::default(),
            metrics: MetricsConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// The explicit path, else the path in `REACTGEN_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(env) {
            Some(p) => Self::from_file(&p),
            None => {
                let cfg = PipelineConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.data.validate()?;
        self.codec.validate()?;
        if self.codec.pose_dim != self.data.pose_dim {
            return bad(format!(
                "codec.pose_dim {} differs from data.pose_dim {}",
                self.codec.pose_dim, self.data.pose_dim
            ));
        }
        let t = self.transformer;
        if t.model_dim == 0 || t.heads == 0 || t.model_dim % t.heads != 0 || t.ffn_dim == 0 {
            return bad("transformer: heads must divide a positive model_dim; ffn_dim must be positive".into());
        }
        for (name, s) in [
            ("base", &self.base),
            ("motion", &self.motion),
            ("residual", &self.residual),
        ] {
            s.validate(name).map_err(Error::Config)?;
        }
        let st = &self.steering;
        if !(st.mu >= 0.0 && st.mu.is_finite()) {
            return bad("steering.mu must be a finite non-negative number".into());
        }
        if !(0.0..2.0).contains(&st.eps) {
            return bad("steering.eps must lie in [0, 2)".into());
        }
        if !(st.lambda >= 0.0 && st.lambda.is_finite()) {
            return bad("steering.lambda must be finite and non-negative".into());
        }
        if st.rectifier_hidden == 0 || self.refinement.mixer_hidden == 0 {
            return bad("rectifier_hidden and mixer_hidden must be positive".into());
        }
        if self.refinement.coupled_decode_steps == 0 || self.generation.decode_steps == 0 {
            return bad("decode steps must be positive".into());
        }
        if !(self.generation.temperature >= 0.0 && self.generation.temperature.is_finite()) {
            return bad("generation.temperature must be finite and non-negative".into());
        }
        let m = &self.metrics;
        if m.repeats == 0 || m.diversity_pairs == 0 || m.pairs_per_class == 0 {
            return bad("metric repeats and pair counts must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Latent positions of the longest synthetic motion.
    pub fn max_latent_len(&self) -> usize {
        self.codec.latent_len(self.data.max_frames)
    }
}
