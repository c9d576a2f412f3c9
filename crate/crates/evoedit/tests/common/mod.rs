#![allow(dead_code)]

use evoedit::backbone::Dit;
use evoedit::objectives::StudentSample;
use evoedit::pipeline::{prepare, Prepared, TrainConfig};
use evoedit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest configuration that still exercises every code path.
pub fn mini_config() -> TrainConfig {
    TrainConfig {
        train_triplets: 6,
        vae_hidden: 8,
        vae_steps: 3,
        dit_depth: 2,
        dit_width: 16,
        dit_heads: 2,
        text_dim: 8,
        taps: vec![0, 1],
        teacher_steps: 2,
        teacher_grad_accum: 1,
        student_steps: 3,
        grad_accum: 2,
        ..Default::default()
    }
}

pub fn mini() -> (TrainConfig, Prepared) {
    let cfg = mini_config();
    let p = prepare(&cfg, None, |_| {}).unwrap();
    (cfg, p)
}

/// Zero-initialized modulation makes most blocks inert; give them weight so
/// gradients reach every parameter.
pub fn activate(model: &mut Dit, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, v) in model.params.iter_mut() {
        if k.contains("ada") || k.starts_with("final") {
            *v = Tensor::randn(v.shape(), 0.3, &mut rng);
        }
    }
}

pub fn samples(p: &Prepared, n: usize, seed: u64) -> Vec<StudentSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let item = &p.data.items[i % p.data.items.len()];
            StudentSample {
                id: item.id.clone(),
                x0: item.x0.clone(),
                x1: Tensor::randn(item.x0.shape(), 1.0, &mut rng),
                t: rng.random_range(0.05..0.95),
                first: item.first.clone(),
                last: item.last.clone(),
                z_tail_gt: p.cache.get(&item.id).unwrap().clone(),
                teacher_text: item.caption_emb.clone(),
                student_text: item.instruction_emb.clone(),
            }
        })
        .collect()
}
