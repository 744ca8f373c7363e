//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reactgen::codec::{Codebook, LatentSequence};
use reactgen::nn::normal_tensor;
use reactgen::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `layers` random codebooks of `size` entries in `dim` dimensions.
pub fn codebooks(layers: usize, size: usize, dim: usize, seed: u64) -> Vec<Codebook> {
    let mut r = rng(seed);
    (0..layers)
        .map(|l| Codebook {
            entries: normal_tensor(&mut r, size, dim, 1.0 / (l + 1) as f64),
            layer_index: l + 1,
        })
        .collect()
}

pub fn latent(len: usize, dim: usize, seed: u64) -> LatentSequence {
    LatentSequence {
        codes: normal_tensor(&mut rng(seed), len, dim, 1.0),
    }
}

pub fn features(rows: usize, dim: usize, seed: u64) -> Tensor {
    normal_tensor(&mut rng(seed), rows, dim, 1.0)
}
