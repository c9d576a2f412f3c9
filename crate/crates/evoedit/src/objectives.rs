//! Student training objective: block-wise hidden-state distillation from
//! the frozen teacher plus tail-frame supervision in VAE latent space.
//!
//! `total = λ_kd · L_kd + λ_tail · L_tail`, with
//!
//! * `L_kd = Σ_{b∈B} ‖h_b^stu − h_b^tea‖²` (unnormalized sum of squares),
//! * `L_tail = Σ_t w(t) [‖z_stu(t) − z_gt‖₁ + β ‖∇z_stu(t) − ∇z_gt‖₁]`,
//!   where `∇` stacks forward differences along both spatial axes and
//!   `w(t) = (1 − t/T)^p`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{embed_text, ConditionBundle, Dit, HiddenStates};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, timestep_weight, Schedule, TailPolicy};
use crate::nn::Bound;
use crate::synthworld::{make_evolution_clip, EditTriplet};
use crate::tensor::Tensor;
use crate::vae3d::{LatentClip, LatentProvenance, Vae3d, VideoClip, TEMPORAL_STRIDE};

/// How the student's tail latent is formed from `x̂0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailPath {
    /// Decode the last latent block, take its final frame, tile it four
    /// times and re-encode.
    #[default]
    DecodeTileEncode,
    /// Use the last latent block of `x̂0` directly.
    LatentShortcut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub lambda_tail: f64,
    pub beta: f64,
    pub blocks: BTreeSet<usize>,
    pub tail: TailPolicy,
    pub tail_path: TailPath,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kd: 1.0,
            lambda_tail: 1.0,
            beta: 0.1,
            blocks: BTreeSet::from([1, 3, 5, 7]),
            tail: TailPolicy::default(),
            tail_path: TailPath::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_kd", self.lambda_kd), ("lambda_tail", self.lambda_tail), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name}={v} must be finite and nonnegative")));
            }
        }
        if self.lambda_kd > 0.0 && self.blocks.is_empty() {
            return Err(Error::InvalidArgument("distillation needs at least one tapped block".into()));
        }
        self.tail.validate()
    }
}

fn check_keys<T>(a: &BTreeMap<usize, T>, b: &BTreeMap<usize, T>, blocks: &BTreeSet<usize>) -> Result<()> {
    let ka: BTreeSet<usize> = a.keys().copied().collect();
    let kb: BTreeSet<usize> = b.keys().copied().collect();
    if &ka != blocks || &kb != blocks {
        return Err(Error::InvalidArgument(format!(
            "hidden-state keys {ka:?} / {kb:?} differ from block set {blocks:?}"
        )));
    }
    Ok(())
}

/// `Σ_b ‖h_stu[b] − h_tea[b]‖²`.
pub fn loss_kd<'g>(
    h_stu: &BTreeMap<usize, Var<'g>>,
    h_tea: &BTreeMap<usize, Var<'g>>,
    blocks: &BTreeSet<usize>,
) -> Result<Var<'g>> {
    check_keys(h_stu, h_tea, blocks)?;
    let mut total: Option<Var<'g>> = None;
    for b in blocks {
        let (s, t) = (h_stu[b], h_tea[b]);
        if s.shape() != t.shape() {
            return Err(Error::Shape(format!("block {b}: {:?} vs {:?}", s.shape(), t.shape())));
        }
        let term = s.sub(t).sum_squares();
        total = Some(match total {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("empty block set".into()))
}

/// [`loss_kd`] on plain tensors.
pub fn loss_kd_values(h_stu: &HiddenStates, h_tea: &HiddenStates, blocks: &BTreeSet<usize>) -> Result<f64> {
    let g = Graph::new();
    let conv = |h: &HiddenStates| h.blocks.iter().map(|(k, v)| (*k, g.constant(v))).collect::<BTreeMap<_, _>>();
    Ok(loss_kd(&conv(h_stu), &conv(h_tea), blocks)?.item())
}

/// Gather indices `(plus, minus)` such that `x[plus] − x[minus]` lists the
/// forward differences of a `1 × h × w × c` block along x, then along y.
pub fn spatial_difference_index(h: usize, w: usize, c: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let at = |y: usize, x: usize, ch: usize| (y * w + x) * c + ch;
    let (mut plus, mut minus) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            for ch in 0..c {
                plus.push(at(y, x + 1, ch));
                minus.push(at(y, x, ch));
            }
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            for ch in 0..c {
                plus.push(at(y + 1, x, ch));
                minus.push(at(y, x, ch));
            }
        }
    }
    (Arc::new(plus), Arc::new(minus))
}

fn tail_term<'g>(z: Var<'g>, z_gt: Var<'g>, beta: f64) -> Result<Var<'g>> {
    let shape = z.shape();
    if shape != z_gt.shape() {
        return Err(Error::Shape(format!("tail latent {:?} vs {:?}", shape, z_gt.shape())));
    }
    let (h, w, c) = match shape[..] {
        [1, h, w, c] => (h, w, c),
        _ => return Err(Error::Shape(format!("tail latent must be one block, got {shape:?}"))),
    };
    let d = z.sub(z_gt);
    let mut term = d.sum_abs();
    if beta > 0.0 {
        let (plus, minus) = spatial_difference_index(h, w, c);
        let n = plus.len();
        if n > 0 {
            let grad = d.gather(plus, &[n]).sub(d.gather(minus, &[n]));
            term = term.add(grad.sum_abs().scale(beta));
        }
    }
    Ok(term)
}

/// Weighted tail loss over the sampled timesteps `(t, z_stu(t))`.
/// Timesteps the policy does not select contribute nothing.
pub fn loss_tail<'g>(z_stu: &[(f64, Var<'g>)], z_gt: Var<'g>, weights: &LossWeights, t_max: f64) -> Result<Var<'g>> {
    let g = z_gt.graph();
    let mut total = g.constant(&Tensor::scalar(0.0));
    for &(t, z) in z_stu {
        let w = timestep_weight(t, t_max, weights.tail.exponent)?;
        let term = tail_term(z, z_gt, weights.beta)?;
        if weights.tail.selects(t, t_max) {
            total = total.add(term.scale(w));
        }
    }
    Ok(total)
}

/// [`loss_tail`] on plain tensors.
pub fn loss_tail_values(z_stu: &[(f64, Tensor)], z_gt: &Tensor, weights: &LossWeights, t_max: f64) -> Result<f64> {
    let g = Graph::new();
    let zs: Vec<_> = z_stu.iter().map(|(t, z)| (*t, g.constant(z))).collect();
    Ok(loss_tail(&zs, g.constant(z_gt), weights, t_max)?.item())
}

/// Everything one student training sample needs.
#[derive(Debug, Clone)]
pub struct StudentSample {
    pub id: String,
    /// Clean clip latent, `blocks × h × w × C`.
    pub x0: Tensor,
    /// Noise of the same shape.
    pub x1: Tensor,
    pub t: f64,
    /// Source first-frame latent, `1 × h × w × C`.
    pub first: Tensor,
    /// Edited last-frame latent for the teacher, `1 × h × w × C`.
    pub last: Tensor,
    /// Ground-truth tail latent (from the cache).
    pub z_tail_gt: Tensor,
    /// Teacher text (refined evolution caption).
    pub teacher_text: Tensor,
    /// Student text (raw instruction).
    pub student_text: Tensor,
}

/// Loss terms of one sample. A term whose weight is zero is not computed.
pub struct StepLosses<'g> {
    pub total: Var<'g>,
    pub kd: Option<Var<'g>>,
    pub tail: Option<Var<'g>>,
}

/// Builds the student objective for one sample on `student`'s graph.
///
/// The teacher runs on its own graph and only its tapped activations enter
/// as constants, so no gradient can reach teacher parameters. The VAE is
/// bound as constants: gradients flow through it into `x̂0` but never into
/// its weights.
pub fn student_step_losses<'g>(
    teacher: &Dit,
    student: &Dit,
    bound: &Bound<'g>,
    vae: &Vae3d,
    sample: &StudentSample,
    weights: &LossWeights,
    schedule: &Schedule,
) -> Result<StepLosses<'g>> {
    weights.validate()?;
    let g = bound.graph();
    let t_max = schedule.t_max;
    let x_t = crate::flow::noise_interpolate(&sample.x0, &sample.x1, sample.t, schedule)?;
    let stu_cond = ConditionBundle::student(sample.t, t_max, sample.student_text.clone(), sample.first.clone());

    let want_kd = weights.lambda_kd > 0.0;
    let w_t = timestep_weight(sample.t, t_max, weights.tail.exponent)?;
    let want_tail = weights.lambda_tail > 0.0 && weights.tail.selects(sample.t, t_max) && w_t > 0.0;
    let taps = if want_kd { weights.blocks.clone() } else { BTreeSet::new() };

    let x_var = g.constant(&x_t);
    let (u_hat, h_stu) = student.forward_graph(bound, x_var, &stu_cond, &taps)?;

    let mut total = g.constant(&Tensor::scalar(0.0));
    let kd = if want_kd {
        let tea_cond = ConditionBundle::teacher(
            sample.t,
            t_max,
            sample.teacher_text.clone(),
            sample.first.clone(),
            sample.last.clone(),
        );
        let (_, h_tea) = teacher.forward(&x_t, &tea_cond, &taps)?;
        let h_tea: BTreeMap<usize, Var<'g>> = h_tea.blocks.iter().map(|(k, v)| (*k, g.constant(v))).collect();
        let l = loss_kd(&h_stu, &h_tea, &weights.blocks)?;
        total = total.add(l.scale(weights.lambda_kd));
        Some(l)
    } else {
        None
    };

    let tail = if want_tail {
        let c = schedule.inversion_coefficient(sample.t)?;
        let x0_hat = x_var.sub(u_hat.scale(c));
        let z = student_tail_latent(vae, x0_hat, weights.tail_path)?;
        let l = loss_tail(&[(sample.t, z)], g.constant(&sample.z_tail_gt), weights, t_max)?;
        total = total.add(l.scale(weights.lambda_tail));
        Some(l)
    } else {
        None
    };
    Ok(StepLosses { total, kd, tail })
}

/// `x̂0` (`blocks × h × w × C`) → the student's tail latent (`1 × h × w × C`).
pub fn student_tail_latent<'g>(vae: &Vae3d, x0_hat: Var<'g>, path: TailPath) -> Result<Var<'g>> {
    let shape = x0_hat.shape();
    let (blocks, h, w, c) = match shape[..] {
        [n, h, w, c] if n >= 1 => (n, h, w, c),
        _ => return Err(Error::Shape(format!("x̂0 shape {shape:?}"))),
    };
    let per = h * w * c;
    let last = x0_hat.gather(Arc::new(((blocks - 1) * per..blocks * per).collect()), &[1, h, w, c]);
    match path {
        TailPath::LatentShortcut => Ok(last),
        TailPath::DecodeTileEncode => {
            let g = x0_hat.graph();
            let vb = vae.params.bind(g, false);
            let clip = vae.decode_graph(&vb, last)?;
            let fs = clip.shape();
            let frame = fs[1] * fs[2] * fs[3];
            let from = (TEMPORAL_STRIDE - 1) * frame;
            let idx: Vec<usize> = (0..TEMPORAL_STRIDE).flat_map(|_| from..from + frame).collect();
            let tiled = clip.gather(Arc::new(idx), &[TEMPORAL_STRIDE, fs[1], fs[2], fs[3]]);
            vae.encode_graph_norm(&vb, tiled)
        }
    }
}

/// Samples a clip with the frozen teacher conditioned on the triplet's
/// first and last frames and an evolution caption.
pub fn rollout_teacher(
    teacher: &Dit,
    vae: &Vae3d,
    triplet: &EditTriplet,
    caption: &str,
    frames: usize,
    steps: usize,
    seed: u64,
) -> Result<LatentClip> {
    let first = vae.tile_and_encode_tail(&triplet.source)?.blocks;
    let last = vae.tile_and_encode_tail(&triplet.edited)?.blocks;
    let (blocks, h, w) = vae.latent_dims(frames, triplet.resolution(), triplet.resolution())?;
    let cond = ConditionBundle::teacher(0.0, 1.0, embed_text(caption, teacher.config.text_dim), first, last);
    let mut field = |x: &Tensor, t: f64| teacher.velocity(x, &cond.at(t));
    let z = euler_sample(&mut field, &[blocks, h, w, vae.config.latent_channels], steps, seed, 1.0)?;
    Ok(LatentClip::new(z, LatentProvenance::FlowState))
}

/// Encoded ground-truth evolution clip of a triplet.
pub fn encode_evolution(vae: &Vae3d, triplet: &EditTriplet, frames: usize) -> Result<LatentClip> {
    let clip = make_evolution_clip(triplet, frames)?;
    vae.encode(&VideoClip::from_images(&clip.frames)?)
}
