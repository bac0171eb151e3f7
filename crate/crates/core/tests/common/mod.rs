#![allow(dead_code)]

use linefl::adapter::{AdapterConfig, AdapterModel, PositionalEncoding};
use linefl::windowing::{WindowSample, WindowSpec};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` samples of capacity `cap` with random valid lengths and labels.
pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, cap: usize, dim: usize) -> Vec<WindowSample> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=cap);
            sample_with_len(rng, &format!("s{i}"), len, cap, dim)
        })
        .collect()
}

pub fn sample_with_len(rng: &mut ChaCha8Rng, id: &str, len: usize, cap: usize, dim: usize) -> WindowSample {
    let mut states = Array2::<f32>::zeros((cap, dim));
    for r in 0..len {
        for c in 0..dim {
            states[[r, c]] = rng.random_range(-1.0..1.0);
        }
    }
    let labels = (0..cap).map(|r| if r < len && rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let mask = (0..cap).map(|r| r < len).collect();
    WindowSample { states, labels, mask, spec: WindowSpec { doc_id: id.into(), start: 1, length: len } }
}

/// Tiny random architecture: D <= 32, d <= 16, 0..=2 layers.
pub fn tiny_config(rng: &mut ChaCha8Rng) -> AdapterConfig {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let d = heads * rng.random_range((2 / heads).max(1)..=16 / heads);
    let mut cfg = AdapterConfig::small(rng.random_range(2..=32), d, rng.random_range(0..=2), heads);
    cfg.ff_multiplier = rng.random_range(1..=4);
    cfg.positional_encoding = match rng.random_range(0..3) {
        0 => PositionalEncoding::Sinusoidal,
        1 => PositionalEncoding::Learned,
        _ => PositionalEncoding::None,
    };
    cfg.max_positions = 8;
    cfg
}

pub fn seeded_model(cfg: AdapterConfig, seed: u64) -> AdapterModel {
    AdapterModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}
