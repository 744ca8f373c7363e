use std::fs;
use std::path::Path;

use reactgen::config::PipelineConfig;
use reactgen::container::Container;
use reactgen::pipeline::{cmd_synth, cmd_train, RunDir, Stage};

const TINY: &str = r#"{
  "data": { "samples_per_class": 6, "test_samples": 8 },
  "codec": { "latent_dim": 8, "codebook_size": 16, "num_layers": 3, "hidden_dim": 16, "epochs": 3, "batch_size": 8 },
  "transformer": { "model_dim": 16, "layers": 1, "heads": 2, "ffn_dim": 32 },
  "base": { "epochs": 2, "batch_size": 8 },
  "motion": { "epochs": 2, "batch_size": 8 },
  "residual": { "epochs": 3, "batch_size": 8 },
  "steering": { "rectifier_hidden": 8 },
  "refinement": { "mixer_hidden": 8, "coupled_decode_steps": 2 },
  "generation": { "decode_steps": 2 }
}"#;

fn tiny() -> PipelineConfig {
    PipelineConfig::from_json(TINY, Path::new("tiny.json")).unwrap()
}

fn sources(path: &Path) -> serde_json::Value {
    let (c, _) = Container::load(path).unwrap();
    c.meta["sources"].clone()
}

#[test]
fn residual_stage_leaves_upstream_checkpoints_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let data = dir.path().join("data");
    cmd_synth(&cfg, &data, false).unwrap();
    let run = RunDir::open(&dir.path().join("run")).unwrap();
    for stage in [Stage::Rvq, Stage::Base, Stage::Motion] {
        cmd_train(stage, &cfg, &data, &run, false).unwrap();
    }
    let frozen = ["codec", "base", "prototypes", "rectifier", "motion"];
    let before: Vec<Vec<u8>> = frozen.iter().map(|n| fs::read(run.checkpoint(n)).unwrap()).collect();
    cmd_train(Stage::Residual, &cfg, &data, &run, false).unwrap();
    for (name, bytes) in frozen.iter().zip(&before) {
        assert_eq!(&fs::read(run.checkpoint(name)).unwrap(), bytes, "{name} changed");
    }

    let res = sources(&run.checkpoint("residual"));
    assert_eq!(res["coupled"], true);
    let motion_hash = reactgen::container::sha256_hex(&before[4]);
    assert_eq!(res["motion"], serde_json::Value::String(motion_hash));

    let mut decoupled = cfg.clone();
    decoupled.ablation.decoupled = true;
    cmd_train(Stage::Residual, &decoupled, &data, &run, true).unwrap();
    assert_eq!(sources(&run.checkpoint("residual"))["coupled"], false);
}

#[test]
fn prototypes_are_rebuilt_identically_and_never_trained() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let data = dir.path().join("data");
    cmd_synth(&cfg, &data, false).unwrap();
    let run = RunDir::open(&dir.path().join("run")).unwrap();
    for stage in [Stage::Rvq, Stage::Base, Stage::Motion] {
        cmd_train(stage, &cfg, &data, &run, false).unwrap();
    }
    let first = fs::read(run.checkpoint("prototypes")).unwrap();
    let mut longer = cfg.clone();
    longer.motion.epochs = 4;
    cmd_train(Stage::Motion, &longer, &data, &run, true).unwrap();
    assert_eq!(fs::read(run.checkpoint("prototypes")).unwrap(), first);
    let motion = sources(&run.checkpoint("motion"));
    assert_eq!(
        motion["prototypes"],
        serde_json::Value::String(reactgen::container::sha256_hex(&first))
    );
}
