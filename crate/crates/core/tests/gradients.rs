mod common;

use linefl::adapter::{backward, check_gradients, forward, grad_check, AdapterConfig, GradCheckOptions, Mode};
use linefl::par::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn opts() -> GradCheckOptions {
    GradCheckOptions { exec: Exec::Sequential, ..Default::default() }
}

#[test]
fn tiny_configurations_pass_finite_differences() {
    for seed in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = common::tiny_config(&mut rng);
        let model = common::seeded_model(cfg.clone(), seed);
        let cap = rng.random_range(1..=8);
        let batch = common::random_batch(&mut rng, 3, cap, cfg.input_dim);
        let err = grad_check(&model, &batch, &opts()).unwrap();
        assert!(err < 1e-4, "seed {seed} {cfg:?}: relative error {err:e}");
    }
}

#[test]
fn linear_probe_is_near_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = common::seeded_model(AdapterConfig::linear_probe(16, 8), 11);
    let batch = common::random_batch(&mut rng, 4, 4, 16);
    assert!(grad_check(&model, &batch, &opts()).unwrap() < 1e-6);
}

#[test]
fn checker_catches_a_corrupted_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = common::seeded_model(AdapterConfig::small(16, 8, 1, 2), 12);
    let batch = common::random_batch(&mut rng, 2, 4, 16);
    let trace = forward(&model, &batch, Mode::Eval, Exec::Sequential).unwrap();
    let mut grads = backward(&model, &trace, &batch, Exec::Sequential).unwrap();
    grads.w_d[[0, 0]] += 0.5 * grads.w_d[[0, 0]].abs().max(1e-3);
    assert!(check_gradients(&model, &batch, &grads, &opts()).unwrap() > 1e-2);
}

#[test]
fn sampled_check_matches_full_on_shared_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = common::seeded_model(AdapterConfig::small(8, 4, 2, 2), 13);
    let batch = common::random_batch(&mut rng, 2, 5, 8);
    let full = grad_check(&model, &batch, &opts()).unwrap();
    let sampled = grad_check(&model, &batch, &GradCheckOptions { per_tensor: Some(2), ..opts() }).unwrap();
    assert!(sampled <= full);
}
