use adafuse_core::batch::ClipBatch;
use adafuse_core::fusion::{Ablation, M2P2Model, ModelConfig};
use adafuse_core::gradcheck::{model_grad_check, GradCheckOptions};
use adafuse_core::synth::{generate, PerModality, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(ablation: Ablation, seed: u64) -> adafuse_core::gradcheck::GradCheckReport {
    let data = generate(&SynthConfig {
        n_episodes: 1,
        clips_per_episode: 4,
        seq_len: PerModality::splat([2, 6]),
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut cfg = ModelConfig::new(data.task, data.dims);
    cfg.ablation = ablation;
    let model = M2P2Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    let clips: Vec<_> = data.clips.iter().collect();
    let batch = ClipBatch::new(data.task, &clips).unwrap();
    let weights = [0.5, 0.2, 0.3];
    model_grad_check(&model, &batch, weights, 0.1, GradCheckOptions::new(1e-3, 1e-4)).unwrap()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        let r = run(Ablation::default(), seed);
        assert!(r.passed, "{r:?}");
        // entries whose probe interval crosses a ReLU or max-pool kink
        assert!(r.skipped * 10 <= r.checked, "{r:?}");
    }
}

#[test]
fn unimodal_model_gradients_match_finite_differences() {
    let r = run(Ablation::unimodal(adafuse_core::data::Modality::Visual), 1);
    assert!(r.passed, "{r:?}");
}
