use std::time::{Duration, Instant};

use reactgen::codec::{mean_reconstruction_l1, train_rvq, CodecConfig, MotionSequence};
use reactgen::dataset::{generate_dataset, SynthConfig};
use reactgen::Tensor;

#[test]
fn identical_motions_are_memorized() {
    let frames = Tensor::from_vec(16, 8, (0..128).map(|i| ((i as f64) * 0.37).sin() * 0.8).collect());
    let data = vec![MotionSequence::new(frames).unwrap(); 20];
    let cfg = CodecConfig {
        codebook_size: 2,
        latent_dim: 8,
        hidden_dim: 32,
        epochs: 150,
        batch_size: 20,
        ..CodecConfig::default()
    };
    let (codec, logs) = train_rvq(&data, &cfg, 0).unwrap();
    let l1 = mean_reconstruction_l1(&codec, &data, cfg.num_layers).unwrap();
    assert!(l1 < 0.02, "memorization L1 {l1}");
    assert!(logs.last().unwrap().recon_l1 < logs[0].recon_l1);
}

#[test]
fn toy_codec_reconstructs_and_prefixes_improve() {
    let (train, _) = generate_dataset(&SynthConfig::default()).unwrap();
    let motions = train.motions();
    assert_eq!(motions.len(), 200);
    let cfg = CodecConfig::default();
    let start = Instant::now();
    let (codec, logs) = train_rvq(&motions, &cfg, 0).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(logs.len(), cfg.epochs);
    assert!(elapsed < Duration::from_secs(120), "training took {elapsed:?}");

    let prefix: Vec<f64> = (1..=cfg.num_layers)
        .map(|m| mean_reconstruction_l1(&codec, &motions, m).unwrap())
        .collect();
    assert!(prefix[cfg.num_layers - 1] < 0.05, "final L1 {prefix:?}");
    for w in prefix.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "prefix errors not monotone: {prefix:?}");
    }
    assert!(prefix[cfg.num_layers - 1] <= prefix[0]);

    let (again, _) = train_rvq(&motions, &cfg, 0).unwrap();
    assert_eq!(codec.to_container().to_bytes(), again.to_container().to_bytes());
}
