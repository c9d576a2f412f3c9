mod common;

use std::collections::BTreeSet;

use evoedit::autograd::Graph;
use evoedit::backbone::{ConditionBundle, Dit};
use evoedit::error::Error;
use evoedit::flow::{noise_interpolate, timestep_weight};
use evoedit::objectives::{student_step_losses, LossWeights};
use evoedit::optim::{AdamW, AdamWConfig, CosineSchedule};
use evoedit::pipeline::{student_gradients, train_student, TailCache};
use evoedit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{activate, mini, samples};

fn total_loss(
    p: &evoedit::pipeline::Prepared,
    student: &Dit,
    s: &evoedit::objectives::StudentSample,
    w: &LossWeights,
) -> (f64, Option<f64>, Option<f64>) {
    let g = Graph::new();
    let b = student.params.bind(&g, false);
    let l = student_step_losses(&p.teacher.ema, student, &b, &p.vae, s, w, &evoedit::flow::Schedule::rectified(1.0))
        .unwrap();
    (l.total.item(), l.kd.map(|v| v.item()), l.tail.map(|v| v.item()))
}

#[test]
fn kd_vanishes_for_a_copy_seeing_the_same_inputs() {
    let (cfg, mut p) = mini();
    activate(&mut p.teacher.ema, 1);
    let student = p.teacher.ema.clone();
    let w = cfg.loss_weights();
    let mut s = samples(&p, 1, 2).remove(0);
    s.last = Tensor::zeros(s.last.shape());
    s.teacher_text = s.student_text.clone();
    let (_, kd, _) = total_loss(&p, &student, &s, &w);
    assert_eq!(kd, Some(0.0));

    // The real teacher inputs (last frame, refined caption) differ.
    let s = samples(&p, 1, 2).remove(0);
    let (_, kd, _) = total_loss(&p, &student, &s, &w);
    assert!(kd.unwrap() > 1e-6, "{kd:?}");
}

#[test]
fn kd_matches_an_independent_sum_of_squares() {
    let (cfg, mut p) = mini();
    activate(&mut p.teacher.ema, 1);
    let mut student = p.teacher.ema.clone();
    activate(&mut student, 7);
    let w = cfg.loss_weights();
    let s = samples(&p, 1, 3).remove(0);
    let (_, kd, _) = total_loss(&p, &student, &s, &w);

    let sched = cfg.schedule();
    let x_t = noise_interpolate(&s.x0, &s.x1, s.t, &sched).unwrap();
    let taps: BTreeSet<usize> = cfg.taps.iter().copied().collect();
    let tea = ConditionBundle::teacher(s.t, 1.0, s.teacher_text.clone(), s.first.clone(), s.last.clone());
    let stu = ConditionBundle::student(s.t, 1.0, s.student_text.clone(), s.first.clone());
    let (_, ht) = p.teacher.ema.forward(&x_t, &tea, &taps).unwrap();
    let (_, hs) = student.forward(&x_t, &stu, &taps).unwrap();
    let mut want = 0.0;
    for b in &taps {
        for (a, c) in hs.blocks[b].data().iter().zip(ht.blocks[b].data()) {
            want += (a - c) * (a - c);
        }
    }
    let got = kd.unwrap();
    assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn zero_tail_weight_leaves_only_distillation() {
    let (cfg, mut p) = mini();
    activate(&mut p.teacher.ema, 1);
    let mut student = p.teacher.ema.clone();
    activate(&mut student, 4);
    let s = samples(&p, 1, 5).remove(0);
    let w = LossWeights {
        lambda_tail: 0.0,
        lambda_kd: 0.7,
        ..cfg.loss_weights()
    };
    let (total, kd, tail) = total_loss(&p, &student, &s, &w);
    assert!(tail.is_none());
    assert_eq!(total, 0.7 * kd.unwrap());

    let w = LossWeights {
        lambda_kd: 0.0,
        ..cfg.loss_weights()
    };
    let (total, kd, tail) = total_loss(&p, &student, &s, &w);
    assert!(kd.is_none());
    assert_eq!(total, tail.unwrap());
}

/// Independent oracle: w(t)·(‖d‖₁ + β·Σ|spatial differences of d|) with
/// d = encode(tile(decode(last block of x̂0)[frame 3])) − z_gt.
fn tail_oracle(p: &evoedit::pipeline::Prepared, student: &Dit, s: &evoedit::objectives::StudentSample, beta: f64) -> f64 {
    let x_t = noise_interpolate(&s.x0, &s.x1, s.t, &evoedit::flow::Schedule::rectified(1.0)).unwrap();
    let cond = ConditionBundle::student(s.t, 1.0, s.student_text.clone(), s.first.clone());
    let u = student.velocity(&x_t, &cond).unwrap();
    let x0_hat: Vec<f64> = x_t.data().iter().zip(u.data()).map(|(x, v)| x - s.t * v).collect();
    let x0_hat = evoedit::vae3d::LatentClip::new(Tensor::new(x_t.shape(), x0_hat), evoedit::vae3d::LatentProvenance::FlowState);
    let last = x0_hat.block(x0_hat.block_count() - 1);
    let frame = p.vae.decode(&last).unwrap().frame(3);
    let z = p.vae.tile_and_encode_tail(&frame).unwrap().blocks;
    let shape = z.shape().to_vec();
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    let d: Vec<f64> = z.data().iter().zip(s.z_tail_gt.data()).map(|(a, b)| a - b).collect();
    let at = |y: usize, x: usize, ch: usize| d[(y * w + x) * c + ch];
    let mut smooth = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                if x + 1 < w {
                    smooth += (at(y, x + 1, ch) - at(y, x, ch)).abs();
                }
                if y + 1 < h {
                    smooth += (at(y + 1, x, ch) - at(y, x, ch)).abs();
                }
            }
        }
    }
    let l1: f64 = d.iter().map(|v| v.abs()).sum();
    (1.0 - s.t).powi(3) * (l1 + beta * smooth)
}

#[test]
fn tail_term_matches_decode_tile_encode_oracle() {
    let (cfg, mut p) = mini();
    activate(&mut p.teacher.ema, 1);
    let mut student = p.teacher.ema.clone();
    activate(&mut student, 3);
    let w = LossWeights {
        lambda_kd: 0.0,
        ..cfg.loss_weights()
    };
    for (i, t) in [0.15, 0.5, 0.85].into_iter().enumerate() {
        let mut s = samples(&p, 1, 10 + i as u64).remove(0);
        s.t = t;
        let (_, _, tail) = total_loss(&p, &student, &s, &w);
        let got = tail.unwrap();
        let want = tail_oracle(&p, &student, &s, w.beta);
        assert!((got - want).abs() <= 1e-9 * want, "t={t}: {got} vs {want}");
        assert!((timestep_weight(t, 1.0, 3.0).unwrap() - (1.0 - t).powi(3)).abs() < 1e-15);
    }
}

#[test]
fn teacher_is_never_written() {
    let (cfg, p) = mini();
    let before = p.teacher.ema.params.content_hash();
    let raw_before = p.teacher.raw.params.content_hash();
    let run = train_student(&cfg, &p.setup(), 3, None, |_| {}).unwrap();
    assert_eq!(p.teacher.ema.params.content_hash(), before);
    assert_eq!(p.teacher.raw.params.content_hash(), raw_before);
    assert_ne!(run.raw.params, p.teacher.ema.params);
    assert_eq!(run.history.len(), 3);
}

#[test]
fn gradient_matches_finite_differences() {
    let (cfg, mut p) = mini();
    activate(&mut p.teacher.ema, 1);
    let mut student = p.teacher.ema.clone();
    activate(&mut student, 2);
    let w = cfg.loss_weights();
    let sched = cfg.schedule();
    let batch = samples(&p, 1, 3);
    let (grads, _) = student_gradients(&p.setup(), &student, std::slice::from_ref(&batch), &w, &sched).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let names: Vec<String> = student.params.iter().map(|(k, _)| k.clone()).collect();
    let h = 1e-5;
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..24 {
        let name = &names[rng.random_range(0..names.len())];
        let i = rng.random_range(0..student.params.get(name).unwrap().len());
        let at = |d: f64| {
            let mut m = student.clone();
            m.params.get_mut(name).unwrap().data_mut()[i] += d;
            total_loss(&p, &m, &batch[0], &w).0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let an = grads.get(name).unwrap().data()[i];
        num += (fd - an).powi(2);
        den += fd * fd;
    }
    let rel = (num / den).sqrt();
    assert!(rel <= 1e-3, "relative error {rel:e}");
}

#[test]
fn accumulation_equals_one_large_batch() {
    let (cfg, mut p) = mini();
    activate(&mut p.teacher.ema, 1);
    let student = p.teacher.ema.clone();
    let batch = samples(&p, 8, 8);
    let w = cfg.loss_weights();
    let sched = cfg.schedule();
    let split: Vec<_> = batch.chunks(2).map(|c| c.to_vec()).collect();
    let (ga, sa) = student_gradients(&p.setup(), &student, &split, &w, &sched).unwrap();
    let (gb, sb) = student_gradients(&p.setup(), &student, &[batch], &w, &sched).unwrap();
    assert!((sa.total - sb.total).abs() <= 1e-9 * sb.total.abs());
    let update = |g| {
        let mut params = student.params.clone();
        AdamW::new(&params, AdamWConfig::default()).step(&mut params, g, 1e-3);
        params.add_scaled(&student.params, -1.0);
        params
    };
    let (da, mut diff) = (update(&ga), update(&gb));
    diff.add_scaled(&da, -1.0);
    let rel = (diff.sum_squares() / da.sum_squares()).sqrt();
    assert!(rel <= 1e-5, "{rel:e}");
}

#[test]
fn learning_rate_schedule() {
    let s = CosineSchedule {
        peak: 1e-4,
        total: 400,
        warmup_fraction: 0.05,
    };
    assert_eq!(s.warmup_steps(), 20);
    assert_eq!(s.lr(0), 0.0);
    assert!((s.lr(10) - 0.5e-4).abs() < 1e-18);
    assert_eq!(s.lr(20), 1e-4);
    assert!(s.lr(21) < 1e-4);
    assert!((s.lr(210) - 0.5e-4).abs() < 1e-18);
    assert_eq!(s.lr(400), 0.0);
    for k in 21..400 {
        assert!(s.lr(k + 1) <= s.lr(k));
    }
}

#[test]
fn tail_cache_is_exact_and_guarded() {
    let (cfg, p) = mini();
    let triplets: Vec<_> = p.data.items.iter().map(|i| i.triplet.clone()).collect();
    assert_eq!(p.cache.len(), cfg.train_triplets);
    for t in &triplets {
        let fresh = p.vae.tile_and_encode_tail(&t.edited).unwrap().blocks;
        assert_eq!(p.cache.get(&t.id()).unwrap(), &fresh);
    }
    let again = evoedit::pipeline::precompute_tail_cache(&triplets, &p.vae).unwrap();
    assert_eq!(again.to_container().to_bytes(), p.cache.to_container().to_bytes());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tail.bin");
    p.cache.save(&path).unwrap();
    let loaded = TailCache::load(&path).unwrap();
    for id in p.cache.ids() {
        assert_eq!(loaded.get(id).unwrap(), p.cache.get(id).unwrap());
    }
    // The on-disk VAE is the one the cache was built from.
    p.vae.save(&dir.path().join("vae.ckpt")).unwrap();
    let vae = evoedit::vae3d::Vae3d::load(&dir.path().join("vae.ckpt")).unwrap();
    loaded.check_vae(&vae).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x10;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(TailCache::load(&path), Err(Error::CacheIntegrity(_))));

    let dup = vec![triplets[0].clone(), triplets[0].clone()];
    assert!(evoedit::pipeline::precompute_tail_cache(&dup, &p.vae).is_err());
    assert!(matches!(p.cache.get("nope"), Err(Error::CacheIntegrity(_))));
}

#[test]
fn reloaded_artifacts_equal_fresh_ones() {
    let cfg = common::mini_config();
    let dir = tempfile::tempdir().unwrap();
    let p = evoedit::pipeline::prepare(&cfg, Some(dir.path()), |_| {}).unwrap();
    let vae = evoedit::vae3d::Vae3d::load(&dir.path().join("vae.ckpt")).unwrap();
    let teacher = evoedit::pipeline::TrainedModel::load(&dir.path().join("teacher.ckpt")).unwrap();
    assert_eq!(vae.params, p.vae.params);
    assert_eq!(teacher.ema, p.teacher.ema);
    assert_eq!(teacher.raw, p.teacher.raw);
    TailCache::load(&dir.path().join("tail_cache.bin")).unwrap().check_vae(&vae).unwrap();
}
