//! Oracle benchmark over held-out synthetic triplets.
//!
//! Two region scores, both a clipped linear map of PSNR (10 dB → 0,
//! 30 dB → 10):
//!
//! * **edit success** — output vs. the edited target inside the edit mask;
//! * **consistency** — output vs. the source outside the mask. Global tasks
//!   (style, tone) have no outside, so they score 10 by convention and are
//!   flagged.
//!
//! `overall = 0.6 · edit_success + 0.4 · consistency`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Dit;
use crate::error::{Error, Result};
use crate::icg::compile;
use crate::image::{psnr, Image};
use crate::objectives::rollout_teacher;
use crate::pipeline::{infer_edit_counted, train_student, Prepared, StepLog, TeacherText, TrainConfig, TrainedModel};
use crate::synthworld::{make_triplet, EditTask, EditTriplet, EVAL_SEEDS};
use crate::vae3d::{LatentClip, LatentProvenance, Vae3d};

pub const PSNR_ZERO: f64 = 10.0;
pub const PSNR_FULL: f64 = 30.0;
pub const EDIT_WEIGHT: f64 = 0.6;
pub const CONSISTENCY_WEIGHT: f64 = 0.4;

/// Clipped linear PSNR → `[0, 10]` map; `+∞` maps to 10.
pub fn psnr_score(db: f64) -> f64 {
    (10.0 * (db - PSNR_ZERO) / (PSNR_FULL - PSNR_ZERO)).clamp(0.0, 10.0)
}

fn check_size(output: &Image, triplet: &EditTriplet) -> Result<()> {
    if !output.same_size(&triplet.edited) {
        return Err(Error::Shape(format!(
            "output {}x{} vs target {}x{}",
            output.width, output.height, triplet.edited.width, triplet.edited.height
        )));
    }
    Ok(())
}

pub fn edit_success(output: &Image, triplet: &EditTriplet) -> Result<f64> {
    check_size(output, triplet)?;
    Ok(psnr(output, &triplet.edited, Some(&triplet.mask)).map_or(10.0, psnr_score))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub score: f64,
    /// The task has no non-edit region; `score` is 10 by convention.
    pub global: bool,
}

pub fn consistency(output: &Image, triplet: &EditTriplet) -> Result<Consistency> {
    check_size(output, triplet)?;
    let outside = triplet.mask.invert();
    if triplet.task.is_global() || outside.count() == 0 {
        return Ok(Consistency {
            score: 10.0,
            global: true,
        });
    }
    Ok(Consistency {
        score: psnr(output, &triplet.source, Some(&outside)).map_or(10.0, psnr_score),
        global: false,
    })
}

pub fn overall(edit_success: f64, consistency: f64) -> f64 {
    EDIT_WEIGHT * edit_success + CONSISTENCY_WEIGHT * consistency
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub edit_success: f64,
    pub consistency: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub task: EditTask,
    pub samples: usize,
    pub global: bool,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub samples: usize,
    pub per_task: Vec<TaskScores>,
    /// Unweighted mean over tasks.
    pub aggregate: Scores,
    /// Mean consistency over local (non-global) tasks only.
    pub local_consistency: f64,
}

/// `n` held-out triplets per task, seeds drawn from the evaluation range.
pub fn eval_set(n_per_task: usize, seed: u64, resolution: usize) -> Vec<EditTriplet> {
    let mut out = Vec::with_capacity(11 * n_per_task);
    for task in EditTask::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(100 + task.index() as u64);
        let mut got = 0;
        while got < n_per_task {
            if let Ok(t) = make_triplet(rng.random_range(EVAL_SEEDS), task, resolution) {
                out.push(t);
                got += 1;
            }
        }
    }
    out
}

/// Sampling settings for the benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSettings {
    pub n_per_task: usize,
    pub seed: u64,
    pub resolution: usize,
    pub frames: usize,
    pub steps: usize,
}

impl BenchSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            n_per_task: cfg.eval_per_task,
            seed: cfg.eval_seed,
            resolution: cfg.resolution,
            frames: cfg.frames,
            steps: cfg.sampling_steps,
        }
    }
}

/// Scores arbitrary outputs against their triplets.
pub fn score_outputs(seed: u64, pairs: &[(EditTriplet, Image)]) -> Result<BenchReport> {
    let mut per_task = Vec::new();
    let mut local = Vec::new();
    for task in EditTask::ALL {
        let mine: Vec<_> = pairs.iter().filter(|(t, _)| t.task == task).collect();
        if mine.is_empty() {
            continue;
        }
        let (mut es, mut cs, mut global) = (0.0, 0.0, false);
        for (t, out) in &mine {
            es += edit_success(out, t)?;
            let c = consistency(out, t)?;
            cs += c.score;
            global |= c.global;
            if !c.global {
                local.push(c.score);
            }
        }
        let n = mine.len() as f64;
        let (es, cs) = (es / n, cs / n);
        per_task.push(TaskScores {
            task,
            samples: mine.len(),
            global,
            scores: Scores {
                edit_success: es,
                consistency: cs,
                overall: overall(es, cs),
            },
        });
    }
    let k = per_task.len().max(1) as f64;
    let mean = |f: fn(&Scores) -> f64| per_task.iter().map(|t| f(&t.scores)).sum::<f64>() / k;
    let aggregate = Scores {
        edit_success: mean(|s| s.edit_success),
        consistency: mean(|s| s.consistency),
        overall: mean(|s| s.overall),
    };
    Ok(BenchReport {
        seed,
        samples: pairs.len(),
        per_task,
        aggregate,
        local_consistency: if local.is_empty() {
            10.0
        } else {
            local.iter().sum::<f64>() / local.len() as f64
        },
    })
}

/// Runs the student (its weights as given — pass EMA weights for the
/// usual evaluation) on the held-out set.
pub fn run_benchmark(student: &Dit, vae: &Vae3d, settings: &BenchSettings) -> Result<BenchReport> {
    if settings.n_per_task == 0 {
        return Err(Error::InvalidArgument("n_per_task must be at least 1".into()));
    }
    let set = eval_set(settings.n_per_task, settings.seed, settings.resolution);
    let mut pairs = Vec::with_capacity(set.len());
    for (i, t) in set.into_iter().enumerate() {
        let noise_seed = settings.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let (out, _) =
            infer_edit_counted(student, vae, &t.source, &t.instruction, settings.frames, settings.steps, noise_seed)?;
        pairs.push((t, out));
    }
    score_outputs(settings.seed, &pairs)
}

/// Mean PSNR of a teacher rollout's first frame against the source and its
/// last frame against the target — how well the teacher honours the two
/// frames it is given. Per-frame PSNR is capped at 60 dB.
pub fn teacher_anchoring(teacher: &Dit, vae: &Vae3d, settings: &BenchSettings) -> Result<(f64, f64)> {
    let set = eval_set(settings.n_per_task, settings.seed, settings.resolution);
    if set.is_empty() {
        return Err(Error::InvalidArgument("n_per_task must be at least 1".into()));
    }
    let (mut first, mut last) = (0.0, 0.0);
    for (i, t) in set.iter().enumerate() {
        let caption = compile(&t.instruction)?.text;
        let z = rollout_teacher(teacher, vae, t, &caption, settings.frames, settings.steps, settings.seed ^ i as u64)?;
        let clip = vae.decode(&LatentClip::new(z.blocks, LatentProvenance::FlowState))?;
        first += psnr(&clip.frame(0), &t.source, None).map_or(60.0, |db| db.min(60.0));
        last += psnr(&clip.frame(clip.len() - 1), &t.edited, None).map_or(60.0, |db| db.min(60.0));
    }
    let n = set.len() as f64;
    Ok((first / n, last / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoDistill,
    NoTail,
    TeacherNoIcg,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoDistill,
        AblationVariant::NoTail,
        AblationVariant::TeacherNoIcg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoDistill => "no_distill",
            AblationVariant::NoTail => "no_tail",
            AblationVariant::TeacherNoIcg => "teacher_no_icg",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "Full objective",
            AblationVariant::NoDistill => "w/o distillation",
            AblationVariant::NoTail => "w/o tail supervision",
            AblationVariant::TeacherNoIcg => "teacher w/o ICG",
        }
    }

    /// The shared config with exactly this variant's factor changed.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoDistill => c.lambda_kd = 0.0,
            AblationVariant::NoTail => c.lambda_tail = 0.0,
            AblationVariant::TeacherNoIcg => c.teacher_text = TeacherText::Instruction,
        }
        c
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub report: BenchReport,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// The untrained student (a copy of the teacher run in student mode).
    pub baseline: BenchReport,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    fn lines(&self) -> Vec<(String, &BenchReport)> {
        std::iter::once(("Untrained student".to_string(), &self.baseline))
            .chain(self.rows.iter().map(|r| (r.variant.label().to_string(), &r.report)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>8} {:>8} {:>8} {:>8}", "Setting", "Edit", "Consist", "Local", "Overall");
        for (name, r) in self.lines() {
            let a = r.aggregate;
            let _ = writeln!(
                s,
                "{:<22} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                name, a.edit_success, a.consistency, r.local_consistency, a.overall
            );
        }
        for line in self.ordering_summary() {
            let _ = writeln!(s, "{line}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,edit_success,consistency,local_consistency,overall\n");
        for (name, r) in self.lines() {
            let a = r.aggregate;
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                name, a.edit_success, a.consistency, r.local_consistency, a.overall
            );
        }
        s
    }

    /// One line per expected ordering, marked as holding or not.
    pub fn ordering_summary(&self) -> Vec<String> {
        let score = |v| self.row(v).map(|r| r.report.aggregate.overall);
        let mut out = Vec::new();
        let mut check = |a: AblationVariant, b: AblationVariant, strict: bool| {
            if let (Some(x), Some(y)) = (score(a), score(b)) {
                let ok = if strict { x > y } else { x >= y };
                let op = if strict { ">" } else { ">=" };
                out.push(format!(
                    "{} {op} {}: {} ({x:.3} vs {y:.3})",
                    a.name(),
                    b.name(),
                    if ok { "holds" } else { "violated" }
                ));
            }
        };
        use AblationVariant::*;
        check(Full, NoDistill, true);
        check(Full, NoTail, true);
        check(Full, TeacherNoIcg, true);
        check(TeacherNoIcg, NoTail, false);
        check(NoTail, NoDistill, false);
        out
    }
}

pub fn write_report(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Text table for a single report, one row per task plus the aggregate.
pub fn report_table(r: &BenchReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<36} {:>8} {:>8} {:>8}", "Task", "Edit", "Consist", "Overall");
    for t in &r.per_task {
        let mark = if t.global { "*" } else { "" };
        let _ = writeln!(
            s,
            "{:<36} {:>8.3} {:>8.3} {:>8.3}",
            format!("{}{mark}", t.task.name()),
            t.scores.edit_success,
            t.scores.consistency,
            t.scores.overall
        );
    }
    let a = r.aggregate;
    let _ = writeln!(s, "{:<36} {:>8.3} {:>8.3} {:>8.3}", "Average", a.edit_success, a.consistency, a.overall);
    s
}

pub fn report_csv(r: &BenchReport) -> String {
    let mut s = String::from("task,samples,global,edit_success,consistency,overall\n");
    for t in &r.per_task {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6}",
            t.task.slug(),
            t.samples,
            t.global,
            t.scores.edit_success,
            t.scores.consistency,
            t.scores.overall
        );
    }
    s
}

/// Trains one student per variant from the same prepared artifacts and
/// evaluates each (EMA weights) on the same held-out set, alongside the
/// untrained student.
pub fn run_ablations(
    variants: &[AblationVariant],
    prepared: &Prepared,
    cfg: &TrainConfig,
    settings: &BenchSettings,
    mut log: impl FnMut(AblationVariant, &StepLog),
) -> Result<(AblationTable, Vec<(AblationVariant, TrainedModel)>)> {
    let baseline = run_benchmark(&prepared.teacher.ema, &prepared.vae, settings)?;
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for &v in variants {
        let vc = v.apply(cfg);
        let model = train_student(&vc, &prepared.setup(), vc.student_steps, None, |l| log(v, l))?;
        let report = run_benchmark(&model.ema, &prepared.vae, settings)?;
        rows.push(AblationRow {
            variant: v,
            report,
            final_loss: model.history.last().map(|l| l.loss),
        });
        models.push((v, model));
    }
    Ok((AblationTable { baseline, rows }, models))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_map() {
        assert_eq!(psnr_score(10.0), 0.0);
        assert_eq!(psnr_score(30.0), 10.0);
        assert_eq!(psnr_score(20.0), 5.0);
        assert_eq!(psnr_score(f64::INFINITY), 10.0);
        assert_eq!(psnr_score(-3.0), 0.0);
    }

    #[test]
    fn oracle_outputs() {
        let t = make_triplet(3, EditTask::SubjectRemoval, 32).unwrap();
        assert_eq!(edit_success(&t.edited, &t).unwrap(), 10.0);
        assert_eq!(consistency(&t.source, &t).unwrap().score, 10.0);
        assert!(edit_success(&t.source, &t).unwrap() < 8.0);
        let s = make_triplet(3, EditTask::StyleTransfer, 32).unwrap();
        assert!(consistency(&s.source, &s).unwrap().global);
    }

    #[test]
    fn variants_change_one_factor() {
        let base = TrainConfig::default();
        for v in AblationVariant::ALL {
            let c = v.apply(&base);
            let diffs = [
                c.lambda_kd != base.lambda_kd,
                c.lambda_tail != base.lambda_tail,
                c.teacher_text != base.teacher_text,
            ];
            let n = diffs.iter().filter(|d| **d).count();
            assert_eq!(n, usize::from(v != AblationVariant::Full));
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
    }

    #[test]
    fn eval_seeds_are_held_out() {
        for t in eval_set(1, 0, 32) {
            assert!(EVAL_SEEDS.contains(&t.seed));
        }
    }
}
