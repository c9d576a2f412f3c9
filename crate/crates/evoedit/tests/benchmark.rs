use evoedit::evalbench::{consistency, edit_success, eval_set, overall, psnr_score, score_outputs};
use evoedit::image::Image;
use evoedit::pipeline::{training_triplets, TrainConfig};
use evoedit::synthworld::{balanced_sampler, make_triplet, EditTask, TaskDistribution, EVAL_SEEDS, TRAIN_SEEDS};

/// Plain masked PSNR with peak 1, written out independently.
fn masked_psnr(a: &Image, b: &Image, keep: impl Fn(usize) -> bool) -> f64 {
    let (mut sse, mut n) = (0.0, 0.0);
    for px in 0..a.width * a.height {
        if !keep(px) {
            continue;
        }
        for c in 0..3 {
            let d = a.data[3 * px + c] - b.data[3 * px + c];
            sse += d * d;
            n += 1.0;
        }
    }
    10.0 * (n / sse).log10()
}

fn score(db: f64) -> f64 {
    ((db - 10.0) / 2.0).clamp(0.0, 10.0)
}

#[test]
fn psnr_map_endpoints() {
    assert_eq!(psnr_score(10.0), 0.0);
    assert_eq!(psnr_score(30.0), 10.0);
    assert_eq!(psnr_score(20.0), 5.0);
    assert_eq!(psnr_score(f64::INFINITY), 10.0);
    assert_eq!(psnr_score(3.0), 0.0);
    assert_eq!(psnr_score(55.0), 10.0);
    assert_eq!(overall(5.0, 10.0), 0.6 * 5.0 + 0.4 * 10.0);
}

#[test]
fn perfect_and_identity_outputs() {
    for task in EditTask::ALL {
        let t = make_triplet(4, task, 32).unwrap();
        assert_eq!(edit_success(&t.edited, &t).unwrap(), 10.0, "{task}");
        let c = consistency(&t.edited, &t).unwrap();
        assert_eq!(c.score, 10.0, "{task}");
        assert_eq!(c.global, task.is_global());

        // Returning the source untouched keeps the background but does not edit.
        let want = score(masked_psnr(&t.source, &t.edited, |i| t.mask.data[i]));
        let got = edit_success(&t.source, &t).unwrap();
        assert!((got - want).abs() < 1e-12, "{task}: {got} vs {want}");
        assert_eq!(consistency(&t.source, &t).unwrap().score, 10.0);
    }
}

#[test]
fn consistency_measures_only_outside_the_mask() {
    let t = make_triplet(8, EditTask::SubjectAddition, 32).unwrap();
    let mut out = t.edited.clone();
    let outside: Vec<usize> = (0..32 * 32).filter(|&i| !t.mask.data[i]).collect();
    for &i in outside.iter().step_by(7) {
        out.data[3 * i] = (out.data[3 * i] + 0.3).min(1.0);
    }
    let want = score(masked_psnr(&out, &t.source, |i| !t.mask.data[i]));
    let c = consistency(&out, &t).unwrap();
    assert!(!c.global);
    assert!((c.score - want).abs() < 1e-12);
    assert_eq!(edit_success(&out, &t).unwrap(), 10.0);
}

#[test]
fn mismatched_output_size_is_rejected() {
    let t = make_triplet(1, EditTask::ColorAlteration, 32).unwrap();
    assert!(edit_success(&Image::new(16, 16), &t).is_err());
}

#[test]
fn report_aggregates_are_unweighted_task_means() {
    let set = eval_set(2, 5, 32);
    assert_eq!(set.len(), 22);
    let pairs: Vec<_> = set.iter().map(|t| (t.clone(), t.source.clone())).collect();
    let r = score_outputs(5, &pairs).unwrap();
    assert_eq!(r.per_task.len(), 11);
    let mean_edit = r.per_task.iter().map(|t| t.scores.edit_success).sum::<f64>() / 11.0;
    assert!((r.aggregate.edit_success - mean_edit).abs() < 1e-12);
    assert!(r.per_task.iter().filter(|t| t.global).count() == 2);
    for t in &r.per_task {
        assert!((t.scores.overall - overall(t.scores.edit_success, t.scores.consistency)).abs() < 1e-12);
    }
}

#[test]
fn held_out_and_training_seeds_are_disjoint() {
    for t in eval_set(3, 7, 32) {
        assert!(EVAL_SEEDS.contains(&t.seed), "{}", t.seed);
    }
    let cfg = TrainConfig::default();
    for t in training_triplets(&cfg, 200) {
        assert!(TRAIN_SEEDS.contains(&t.seed));
    }
    assert_eq!(TRAIN_SEEDS.end, EVAL_SEEDS.start);
}

#[test]
fn sampler_matches_published_shares() {
    let d = TaskDistribution::published_shares();
    let n = 20_000;
    let mut counts = [0f64; 11];
    let mut s = balanced_sampler(&d, 77);
    for _ in 0..n {
        counts[s.next_task().index()] += 1.0;
    }
    let mut chi2 = 0.0;
    for t in EditTask::ALL {
        let expected = d.share(t) * n as f64;
        chi2 += (counts[t.index()] - expected).powi(2) / expected;
        let points = 100.0 * (counts[t.index()] / n as f64 - d.share(t));
        assert!(points.abs() <= 1.5, "{t}: {points:.2} points");
    }
    // 10 degrees of freedom, p = 0.001.
    assert!(chi2 < 29.59, "chi-square {chi2:.2}");
    let total: f64 = EditTask::ALL.iter().map(|t| d.share(*t)).sum();
    assert!((total - 1.0).abs() < 1e-12);
}
