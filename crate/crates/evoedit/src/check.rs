//! Fast invariant suite behind `evoedit check`.
//!
//! Each check is small enough to run in seconds on a miniature
//! configuration and reports a one-line detail either way.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::backbone::{Dit, HiddenStates};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::flow::{
    invert_cfm, invert_rf, noise_interpolate, timestep_weight, velocity_target, Schedule, DEFAULT_SAMPLING_STEPS,
};
use crate::icg::{classify_instruction, compile, generate_caption};
use crate::objectives::{loss_kd_values, loss_tail_values, LossWeights, StudentSample};
use crate::optim::{AdamW, AdamWConfig};
use crate::pipeline::{infer_edit_counted, prepare, student_gradients, Prepared, TrainConfig};
use crate::synthworld::{balanced_sampler, make_evolution_clip, make_triplet, EditTask, TaskDistribution};
use crate::tensor::Tensor;
use crate::vae3d::{Vae3d, VaeConfig, VideoClip};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn() -> Result<std::result::Result<String, String>>;

const CHECKS: [(&str, CheckFn); 12] = [
    ("flow inversion round trip", flow_inversion),
    ("timestep weight law", weight_law),
    ("vae shape law and tail tiling", vae_contract),
    ("student loss gradient vs finite differences", gradient),
    ("teacher untouched by student training", frozen_teacher),
    ("analytic loss values", analytic_losses),
    ("caption compiler round trip", captions),
    ("8-step deterministic sampling", sampling),
    ("task shares of the balanced sampler", distribution),
    ("container corruption detection", container),
    ("gradient accumulation equivalence", accumulation),
    ("triplet and clip invariants", triplets),
];

/// Runs every check; a check that errors counts as failed.
pub fn run_checks() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome { name, passed, detail }
        })
        .collect()
}

fn verdict(ok: bool, detail: String) -> Result<std::result::Result<String, String>> {
    Ok(if ok { Ok(detail) } else { Err(detail) })
}

fn flow_inversion() -> Result<std::result::Result<String, String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rect = Schedule::rectified(1.0);
    let pow = Schedule::power(1.0, 2.0)?;
    let mut worst: f64 = 0.0;
    let mut bitwise = true;
    for _ in 0..200 {
        let x0 = Tensor::randn(&[16], 1.0, &mut rng);
        let x1 = Tensor::randn(&[16], 1.0, &mut rng);
        let t: f64 = rng.random_range(0.01..1.0);
        for s in [rect, pow] {
            let xt = noise_interpolate(&x0, &x1, t, &s)?;
            let u = velocity_target(&x0, &x1, t, &s)?;
            worst = worst.max(invert_cfm(&xt, t, &u, &s)?.max_abs_diff(&x0));
        }
        let xt = noise_interpolate(&x0, &x1, t, &rect)?;
        let u = velocity_target(&x0, &x1, t, &rect)?;
        bitwise &= invert_rf(&xt, t, &u, 1.0)? == invert_cfm(&xt, t, &u, &rect)?;
    }
    verdict(worst <= 1e-6 && bitwise, format!("max error {worst:.2e}, rectified bitwise {bitwise}"))
}

fn weight_law() -> Result<std::result::Result<String, String>> {
    let w0 = timestep_weight(0.0, 1.0, 3.0)?;
    let w1 = timestep_weight(1.0, 1.0, 3.0)?;
    let wh = timestep_weight(0.5, 1.0, 3.0)?;
    let mut mono = true;
    let mut prev = f64::INFINITY;
    for i in 0..1000 {
        let w = timestep_weight(i as f64 / 999.0, 1.0, 3.0)?;
        mono &= w < prev;
        prev = w;
    }
    verdict(
        w0 == 1.0 && w1 == 0.0 && (wh - 0.125).abs() < 1e-15 && mono,
        format!("w(0)={w0}, w(T/2)={wh}, w(T)={w1}, strictly decreasing {mono}"),
    )
}

fn vae_contract() -> Result<std::result::Result<String, String>> {
    let vae = Vae3d::new(VaeConfig {
        hidden: 8,
        ..Default::default()
    })?;
    let t = make_triplet(5, EditTask::ColorAlteration, 32)?;
    let mut shapes = Vec::new();
    for f in [4, 8, 12] {
        let z = vae.encode(&VideoClip::repeat(&t.source, f))?;
        shapes.push(z.blocks.shape()[0] == f / 4);
    }
    let tiled = vae.tile_and_encode_tail(&t.edited)? == vae.encode(&VideoClip::repeat(&t.edited, 4))?;
    verdict(
        shapes.iter().all(|&b| b) && tiled,
        format!("block counts ok {shapes:?}, tile == encode(repeat) {tiled}"),
    )
}

fn mini_config() -> TrainConfig {
    TrainConfig {
        train_triplets: 4,
        vae_hidden: 8,
        vae_steps: 2,
        dit_depth: 2,
        dit_width: 16,
        dit_heads: 2,
        text_dim: 8,
        taps: vec![0, 1],
        teacher_steps: 1,
        teacher_grad_accum: 1,
        student_steps: 2,
        grad_accum: 2,
        ..Default::default()
    }
}

fn mini_prepared() -> Result<(TrainConfig, Prepared)> {
    let cfg = mini_config();
    let p = prepare(&cfg, None, |_| {})?;
    Ok((cfg, p))
}

fn samples(p: &Prepared, n: usize, seed: u64) -> Result<Vec<StudentSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let item = &p.data.items[i % p.data.items.len()];
            Ok(StudentSample {
                id: item.id.clone(),
                x0: item.x0.clone(),
                x1: Tensor::randn(item.x0.shape(), 1.0, &mut rng),
                t: rng.random_range(0.05..0.95),
                first: item.first.clone(),
                last: item.last.clone(),
                z_tail_gt: p.cache.get(&item.id)?.clone(),
                teacher_text: item.caption_emb.clone(),
                student_text: item.instruction_emb.clone(),
            })
        })
        .collect()
}

/// Nonzero modulation weights so every parameter path carries gradient.
pub(crate) fn activate(model: &mut Dit, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, v) in model.params.iter_mut() {
        if k.contains("ada") || k.starts_with("final") {
            *v = Tensor::randn(v.shape(), 0.3, &mut rng);
        }
    }
}

fn gradient() -> Result<std::result::Result<String, String>> {
    let (cfg, mut p) = mini_prepared()?;
    activate(&mut p.teacher.ema, 1);
    let mut student = p.teacher.ema.clone();
    activate(&mut student, 2);
    let weights = cfg.loss_weights();
    let sched = cfg.schedule();
    let batch = samples(&p, 1, 3)?;
    let setup = p.setup();
    let (grads, _) = student_gradients(&setup, &student, std::slice::from_ref(&batch), &weights, &sched)?;
    let loss_at = |m: &Dit| -> Result<f64> {
        let g = Graph::new();
        let b = m.params.bind(&g, false);
        let l = crate::objectives::student_step_losses(setup.teacher, m, &b, setup.vae, &batch[0], &weights, &sched)?;
        Ok(l.total.item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = student.params.iter().map(|(k, _)| k.clone()).collect();
    let h = 1e-5;
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..24 {
        let name = &names[rng.random_range(0..names.len())];
        let len = student.params.get(name).unwrap().len();
        let i = rng.random_range(0..len);
        let mut plus = student.clone();
        plus.params.get_mut(name).unwrap().data_mut()[i] += h;
        let mut minus = student.clone();
        minus.params.get_mut(name).unwrap().data_mut()[i] -= h;
        let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
        let an = grads.get(name).unwrap().data()[i];
        num += (fd - an) * (fd - an);
        den += fd * fd;
    }
    let rel = (num / den.max(1e-300)).sqrt();
    verdict(rel <= 1e-3, format!("relative error {rel:.2e} over 24 coordinates"))
}

fn frozen_teacher() -> Result<std::result::Result<String, String>> {
    let (cfg, p) = mini_prepared()?;
    let before = p.teacher.ema.params.content_hash();
    let run = crate::pipeline::train_student(&cfg, &p.setup(), cfg.student_steps, None, |_| {})?;
    let after = p.teacher.ema.params.content_hash();
    let moved = run.raw.params != p.teacher.ema.params;
    verdict(before == after && moved, format!("teacher hash stable {}, student moved {moved}", before == after))
}

fn analytic_losses() -> Result<std::result::Result<String, String>> {
    let mut h = HiddenStates::default();
    h.blocks.insert(1, Tensor::full(&[3, 5], 0.7));
    let kd = loss_kd_values(&h, &h, &BTreeSet::from([1]))?;
    let n = 2 * 3 * 4;
    let w = LossWeights {
        beta: 0.0,
        ..Default::default()
    };
    let tail = loss_tail_values(&[(0.5, Tensor::full(&[1, 2, 3, 4], 0.5))], &Tensor::zeros(&[1, 2, 3, 4]), &w, 1.0)?;
    let want = 0.125 * 0.5 * n as f64;
    verdict(kd == 0.0 && (tail - want).abs() <= 1e-9, format!("L_kd {kd}, L_tail {tail} (expected {want})"))
}

fn captions() -> Result<std::result::Result<String, String>> {
    let mut bad = Vec::new();
    for task in EditTask::ALL {
        for seed in 0..5 {
            let t = make_triplet(seed, task, 32)?;
            let got = classify_instruction(&t.instruction)?;
            let cap = generate_caption(&t.instruction, got);
            if got != task || cap.generic || classify_instruction(&cap.text).is_err() || compile(&t.instruction).is_err() {
                bad.push(t.instruction.clone());
            }
        }
    }
    verdict(bad.is_empty(), format!("{} instructions failed: {bad:?}", bad.len()))
}

fn sampling() -> Result<std::result::Result<String, String>> {
    let (_, p) = mini_prepared()?;
    let t = make_triplet(9, EditTask::SubjectAddition, 32)?;
    let run = |seed| infer_edit_counted(&p.teacher.ema, &p.vae, &t.source, &t.instruction, 8, DEFAULT_SAMPLING_STEPS, seed);
    let (a, calls) = run(5)?;
    let (b, _) = run(5)?;
    let (c, _) = run(6)?;
    verdict(
        calls == 8 && a == b && a != c,
        format!("{calls} evaluations, same seed identical {}, new seed differs {}", a == b, a != c),
    )
}

fn distribution() -> Result<std::result::Result<String, String>> {
    let d = TaskDistribution::published_shares();
    let mut s = balanced_sampler(&d, 123);
    let mut counts = [0usize; 11];
    let n = 10_000;
    for _ in 0..n {
        counts[s.next_task().index()] += 1;
    }
    let worst = EditTask::ALL
        .iter()
        .map(|t| (100.0 * counts[t.index()] as f64 / n as f64 - 100.0 * d.share(*t)).abs())
        .fold(0.0, f64::max);
    verdict(worst <= 1.5, format!("largest share deviation {worst:.2} points"))
}

fn container() -> Result<std::result::Result<String, String>> {
    let mut c = Container::new(serde_json::json!({"kind": "check"}));
    c.push_f64("z", Tensor::new(&[3], vec![0.1, 0.2, 0.3]));
    let mut bytes = c.to_bytes();
    let ok = Container::from_bytes(&bytes)? == c;
    let n = bytes.len();
    bytes[n - 3] ^= 1;
    let caught = matches!(Container::from_bytes(&bytes), Err(Error::CacheIntegrity(_)));
    verdict(ok && caught, format!("exact round trip {ok}, corruption caught {caught}"))
}

fn accumulation() -> Result<std::result::Result<String, String>> {
    let (cfg, mut p) = mini_prepared()?;
    activate(&mut p.teacher.ema, 1);
    let student = p.teacher.ema.clone();
    let batch = samples(&p, 8, 8)?;
    let setup = p.setup();
    let weights = cfg.loss_weights();
    let sched = cfg.schedule();
    let singles: Vec<Vec<StudentSample>> = batch.iter().map(|s| vec![s.clone()]).collect();
    let (ga, _) = student_gradients(&setup, &student, &singles, &weights, &sched)?;
    let (gb, _) = student_gradients(&setup, &student, &[batch], &weights, &sched)?;
    let step = |g: &crate::nn::Params| {
        let mut params = student.params.clone();
        AdamW::new(&params, AdamWConfig::default()).step(&mut params, g, 1e-3);
        params
    };
    let (pa, pb) = (step(&ga), step(&gb));
    let mut da = pa.clone();
    da.add_scaled(&student.params, -1.0);
    let mut diff = pa.clone();
    diff.add_scaled(&pb, -1.0);
    let rel = (diff.sum_squares() / da.sum_squares()).sqrt();
    verdict(rel <= 1e-5, format!("relative update difference {rel:.2e}"))
}

fn triplets() -> Result<std::result::Result<String, String>> {
    let mut problems = Vec::new();
    for task in EditTask::ALL {
        let t = make_triplet(21, task, 32)?;
        for y in 0..32 {
            for x in 0..32 {
                if !t.mask.get(x, y) && t.source.pixel(x, y) != t.edited.pixel(x, y) {
                    problems.push(format!("{task}: change outside mask"));
                }
            }
        }
        let clip = make_evolution_clip(&t, 8)?;
        if clip.frames[0] != t.source || clip.frames[7] != t.edited {
            problems.push(format!("{task}: clip not anchored"));
        }
    }
    problems.dedup();
    verdict(problems.is_empty(), format!("{} problems {problems:?}", problems.len()))
}
