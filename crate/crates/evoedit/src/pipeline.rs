//! Training phases: VAE, teacher (first+last frame) flow matching, and
//! student distillation, plus the tail-latent cache and inference.
//!
//! Everything is single-threaded and seeded, so a phase rerun with the same
//! config reproduces its outputs bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{embed_text, ConditionBundle, DiTConfig, Dit};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::flow::{
    euler_sample, noise_interpolate, velocity_target, Schedule, TailPolicy, TailSelection, DEFAULT_SAMPLING_STEPS,
};
use crate::icg;
use crate::image::Image;
use crate::nn::Params;
use crate::objectives::{encode_evolution, rollout_teacher, student_step_losses, LossWeights, StudentSample, TailPath};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule, Ema};
use crate::synthworld::{balanced_sampler, make_evolution_clip, EditTask, EditTriplet, TaskDistribution, TRAIN_SEEDS};
use crate::tensor::Tensor;
use crate::vae3d::{train_vae, Vae3d, VaeConfig, VaeTrainConfig, VideoClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    /// Parameters are rounded to `f32` after every update.
    F32,
}

/// Where the clean latent `x0` that gets noised during student training
/// comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Source {
    /// The encoded ground-truth evolution clip.
    #[default]
    GroundTruth,
    /// A teacher rollout (one per triplet, fixed seed).
    TeacherRollout,
}

/// What the teacher reads as text during distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherText {
    #[default]
    Caption,
    Instruction,
}

/// Every knob of a desk run. Serialized as a flat TOML table, one key per
/// field; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub resolution: usize,
    pub frames: usize,
    pub train_triplets: usize,

    pub vae_spatial_stride: usize,
    pub vae_latent_channels: usize,
    pub vae_hidden: usize,
    pub vae_kl_weight: f64,
    pub vae_steps: usize,
    pub vae_lr: f64,
    pub vae_batch_blocks: usize,

    pub dit_depth: usize,
    pub dit_width: usize,
    pub dit_heads: usize,
    pub dit_patch: usize,
    pub text_dim: usize,

    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub teacher_grad_accum: usize,
    /// Probability of hiding the last frame during teacher pretraining.
    pub last_frame_dropout: f64,

    pub student_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub precision: Precision,

    pub lambda_kd: f64,
    pub lambda_tail: f64,
    pub beta: f64,
    pub taps: Vec<usize>,
    pub tail_exponent: f64,
    /// Tail timesteps with `t/T ≤ tail_tau` count; 1.0 keeps all.
    pub tail_tau: f64,
    pub tail_path: TailPath,
    pub x0_source: X0Source,
    pub teacher_text: TeacherText,

    /// Write a checkpoint every this many optimizer steps (0 = never).
    pub checkpoint_every: usize,
    pub sampling_steps: usize,
    pub eval_per_task: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 1,
            resolution: 32,
            frames: 8,
            train_triplets: 1500,
            vae_spatial_stride: 4,
            vae_latent_channels: 4,
            vae_hidden: 32,
            vae_kl_weight: 1e-4,
            vae_steps: 2000,
            vae_lr: 2e-3,
            vae_batch_blocks: 4,
            dit_depth: 8,
            dit_width: 64,
            dit_heads: 4,
            dit_patch: 2,
            text_dim: 64,
            teacher_steps: 1500,
            teacher_lr: 1e-3,
            teacher_grad_accum: 8,
            last_frame_dropout: 0.0,
            student_steps: 400,
            // 1e-4 leaves a 400-step student nearly where it started.
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.05,
            micro_batch: 1,
            grad_accum: 8,
            grad_clip: 1.0,
            ema_decay: 0.9999,
            precision: Precision::F64,
            // L_kd is an unnormalized sum (thousands at this width); this
            // brings it level with the tail term.
            lambda_kd: 1e-3,
            lambda_tail: 1.0,
            beta: 0.1,
            taps: vec![1, 3, 5, 7],
            tail_exponent: 3.0,
            tail_tau: 1.0,
            tail_path: TailPath::DecodeTileEncode,
            x0_source: X0Source::GroundTruth,
            teacher_text: TeacherText::Caption,
            checkpoint_every: 0,
            sampling_steps: DEFAULT_SAMPLING_STEPS,
            eval_per_task: 10,
            eval_seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if self.micro_batch == 0 || self.grad_accum == 0 || self.teacher_grad_accum == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.last_frame_dropout) {
            return bad(format!("last_frame_dropout {} outside [0, 1]", self.last_frame_dropout));
        }
        if self.sampling_steps == 0 {
            return bad("sampling_steps must be positive".into());
        }
        if self.train_triplets == 0 {
            return bad("train_triplets must be positive".into());
        }
        self.vae_config().validate()?;
        self.dit_config().validate()?;
        if self.frames == 0 || !self.frames.is_multiple_of(crate::vae3d::TEMPORAL_STRIDE) {
            return bad(format!("frames {} must be a positive multiple of 4", self.frames));
        }
        if !self.resolution.is_multiple_of(self.vae_spatial_stride) {
            return bad(format!("resolution {} not divisible by the VAE stride", self.resolution));
        }
        self.loss_weights().validate()
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            spatial_stride: self.vae_spatial_stride,
            latent_channels: self.vae_latent_channels,
            hidden: self.vae_hidden,
            kl_weight: self.vae_kl_weight,
            seed: self.seed,
        }
    }

    pub fn vae_train_config(&self) -> VaeTrainConfig {
        VaeTrainConfig {
            steps: self.vae_steps,
            batch_blocks: self.vae_batch_blocks,
            lr: self.vae_lr,
            warmup_fraction: self.warmup_fraction,
            seed: self.seed,
        }
    }

    pub fn dit_config(&self) -> DiTConfig {
        DiTConfig {
            depth: self.dit_depth,
            width: self.dit_width,
            heads: self.dit_heads,
            patch: self.dit_patch,
            latent_channels: self.vae_latent_channels,
            latent_size: self.resolution / self.vae_spatial_stride.max(1),
            max_blocks: (self.frames / crate::vae3d::TEMPORAL_STRIDE).max(1),
            text_dim: self.text_dim,
            seed: self.seed.wrapping_add(1),
            ..Default::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_kd: self.lambda_kd,
            lambda_tail: self.lambda_tail,
            beta: self.beta,
            blocks: self.taps.iter().copied().collect(),
            tail: TailPolicy {
                selection: if self.tail_tau >= 1.0 {
                    TailSelection::AllSampled
                } else {
                    TailSelection::Threshold { tau: self.tail_tau }
                },
                exponent: self.tail_exponent,
            },
            tail_path: self.tail_path,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::rectified(1.0)
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Line-delimited JSON writer.
pub struct JsonlLog {
    out: BufWriter<File>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, record: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Mean of the first and last `k` values, for "did the loss go down" checks.
pub fn head_tail_means(values: &[f64], k: usize) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let k = k.clamp(1, values.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..k]), mean(&values[values.len() - k..])))
}

/// A training triplet with everything the models read precomputed.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub task: EditTask,
    pub triplet: EditTriplet,
    pub caption: String,
    /// Encoded evolution clip.
    pub x0: Tensor,
    /// Tiled-and-encoded source image.
    pub first: Tensor,
    /// Tiled-and-encoded edited image.
    pub last: Tensor,
    pub caption_emb: Tensor,
    pub instruction_emb: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub items: Vec<TrainItem>,
}

/// Draws `n` training triplets (published task shares, training seed range).
pub fn training_triplets(cfg: &TrainConfig, n: usize) -> Vec<EditTriplet> {
    balanced_sampler(&TaskDistribution::published_shares(), cfg.data_seed)
        .resolution(cfg.resolution)
        .seed_range(TRAIN_SEEDS)
        .take(n)
        .collect()
}

/// Evolution clips plus a tiled edited frame per triplet.
pub fn vae_training_clips(triplets: &[EditTriplet], frames: usize) -> Result<Vec<VideoClip>> {
    let mut out = Vec::with_capacity(2 * triplets.len());
    for t in triplets {
        out.push(VideoClip::from_images(&make_evolution_clip(t, frames)?.frames)?);
        out.push(VideoClip::repeat(&t.edited, crate::vae3d::TEMPORAL_STRIDE));
    }
    Ok(out)
}

pub fn pretrain_vae(cfg: &TrainConfig, triplets: &[EditTriplet], mut log: impl FnMut(&StepLog)) -> Result<Vae3d> {
    let mut vae = Vae3d::new(cfg.vae_config())?;
    let clips = vae_training_clips(triplets, cfg.frames)?;
    train_vae(&mut vae, &clips, &cfg.vae_train_config(), |l| {
        log(&StepLog {
            phase: "vae".into(),
            step: l.step,
            loss: l.loss,
            kd: None,
            tail: None,
            lr: l.lr,
            grad_norm: f64::NAN,
        })
    })?;
    // Same reason as `as_stored`: the tail cache is keyed on the stored weights.
    Ok(vae.quantized())
}

pub fn build_training_set(cfg: &TrainConfig, vae: &Vae3d, triplets: Vec<EditTriplet>) -> Result<TrainingSet> {
    let mut items = Vec::with_capacity(triplets.len());
    for t in triplets {
        let caption = icg::compile(&t.instruction)?.text;
        items.push(TrainItem {
            id: t.id(),
            task: t.task,
            caption_emb: embed_text(&caption, cfg.text_dim),
            instruction_emb: embed_text(&t.instruction, cfg.text_dim),
            x0: encode_evolution(vae, &t, cfg.frames)?.blocks,
            first: vae.tile_and_encode_tail(&t.source)?.blocks,
            last: vae.tile_and_encode_tail(&t.edited)?.blocks,
            caption,
            triplet: t,
        });
    }
    Ok(TrainingSet { items })
}

/// Ground-truth tail latents keyed by triplet id.
#[derive(Debug, Clone, PartialEq)]
pub struct TailCache {
    pub vae_hash: String,
    entries: BTreeMap<String, Tensor>,
}

/// Tiles and encodes every edited image once. Duplicate ids are rejected.
pub fn precompute_tail_cache<'a>(
    triplets: impl IntoIterator<Item = &'a EditTriplet>,
    vae: &Vae3d,
) -> Result<TailCache> {
    let mut entries = BTreeMap::new();
    for t in triplets {
        let z = vae.tile_and_encode_tail(&t.edited)?.blocks;
        if entries.insert(t.id(), z).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate triplet id {}", t.id())));
        }
    }
    if entries.is_empty() {
        return Err(Error::InvalidArgument("no triplets to cache".into()));
    }
    Ok(TailCache {
        vae_hash: vae.params.content_hash(),
        entries,
    })
}

impl TailCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::CacheIntegrity(format!("no cached tail latent for {id}")))
    }

    /// Entries are stored at full precision so a reload equals the online
    /// computation exactly.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({"kind": "tail_cache", "vae_hash": self.vae_hash}));
        for (k, v) in &self.entries {
            c.push_f64(k.clone(), v.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta["kind"] != "tail_cache" {
            return Err(Error::Format("not a tail cache".into()));
        }
        let vae_hash = c.meta["vae_hash"]
            .as_str()
            .ok_or_else(|| Error::Format("tail cache without vae_hash".into()))?
            .to_string();
        Ok(Self {
            vae_hash,
            entries: c.records.iter().cloned().collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Fails unless the cache was built by this VAE.
    pub fn check_vae(&self, vae: &Vae3d) -> Result<()> {
        if self.vae_hash != vae.params.content_hash() {
            return Err(Error::CacheIntegrity("tail cache was built with a different VAE".into()));
        }
        Ok(())
    }
}

/// Raw weights (for resuming) plus their moving average (for inference).
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub raw: Dit,
    pub ema: Dit,
    pub history: Vec<StepLog>,
}

impl TrainedModel {
    pub fn untrained(model: Dit) -> Self {
        Self {
            raw: model.clone(),
            ema: model,
            history: Vec::new(),
        }
    }

    /// EMA weights under their plain names, raw weights under `raw/`.
    pub fn to_container(&self, step: usize) -> Container {
        let mut c = self.ema.to_container();
        c.meta["step"] = serde_json::json!(step);
        self.raw.params.write_into(&mut c, "raw/");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let ema = Dit::from_container(c)?;
        let raw_params = Params::read_from(c, "raw/");
        let raw = if raw_params.is_empty() {
            ema.clone()
        } else {
            raw_params.check_layout(&ema.params)?;
            Dit {
                config: ema.config.clone(),
                params: raw_params,
            }
        };
        Ok(Self {
            raw,
            ema,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        self.to_container(step).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Checkpoints hold f32, so finished models are rounded the same way:
/// whatever is computed from a fresh model must match its reloaded copy.
fn as_stored(mut m: TrainedModel) -> TrainedModel {
    round_params(&mut m.raw.params);
    round_params(&mut m.ema.params);
    m
}

fn round_params(p: &mut Params) {
    for (_, v) in p.iter_mut() {
        for x in v.data_mut() {
            *x = *x as f32 as f64;
        }
    }
}

struct Optimizer {
    opt: AdamW,
    ema: Ema,
    schedule: CosineSchedule,
    clip: f64,
    precision: Precision,
    step: usize,
}

impl Optimizer {
    fn new(params: &Params, cfg: &TrainConfig, peak: f64, total: usize) -> Self {
        Self {
            opt: AdamW::new(
                params,
                AdamWConfig {
                    weight_decay: cfg.weight_decay,
                    ..Default::default()
                },
            ),
            ema: Ema::new(params, cfg.ema_decay),
            schedule: CosineSchedule {
                peak,
                total,
                warmup_fraction: cfg.warmup_fraction,
            },
            clip: cfg.grad_clip,
            precision: cfg.precision,
            step: 0,
        }
    }

    /// Returns `(lr, pre-clip gradient norm)`.
    fn apply(&mut self, params: &mut Params, mut grads: Params) -> (f64, f64) {
        self.step += 1;
        let norm = if self.clip > 0.0 {
            clip_grad_norm(&mut grads, self.clip)
        } else {
            grads.sum_squares().sqrt()
        };
        let lr = self.schedule.lr(self.step);
        self.opt.step(params, &grads, lr);
        if self.precision == Precision::F32 {
            round_params(params);
        }
        self.ema.update(params);
        (lr, norm)
    }
}

fn checkpoint(dir: Option<&Path>, every: usize, phase: &str, step: usize, raw: &Dit, ema: &Params) -> Result<()> {
    if let Some(dir) = dir {
        if every > 0 && step.is_multiple_of(every) {
            let model = TrainedModel {
                raw: raw.clone(),
                ema: Dit {
                    config: raw.config.clone(),
                    params: ema.clone(),
                },
                history: Vec::new(),
            };
            model.save(&dir.join(format!("{phase}-{step:06}.ckpt")), step)?;
        }
    }
    Ok(())
}

/// Flow-matching velocity regression with first+last frame conditioning
/// and refined captions. `steps = 0` returns the initialization.
pub fn pretrain_teacher(
    cfg: &TrainConfig,
    data: &TrainingSet,
    steps: usize,
    ckpt_dir: Option<&Path>,
    mut log: impl FnMut(&StepLog),
) -> Result<TrainedModel> {
    let mut model = Dit::new(cfg.dit_config())?;
    if steps == 0 {
        return Ok(TrainedModel::untrained(model));
    }
    if data.items.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let sched = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut opt = Optimizer::new(&model.params, cfg, cfg.teacher_lr, steps);
    let mut history = Vec::with_capacity(steps);
    for step in 1..=steps {
        let mut grads = model.params.zeros_like();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.teacher_grad_accum {
            let item = &data.items[rng.random_range(0..data.items.len())];
            let t: f64 = rng.random();
            let x1 = Tensor::randn(item.x0.shape(), 1.0, &mut rng);
            let x_t = noise_interpolate(&item.x0, &x1, t, &sched)?;
            let target = velocity_target(&item.x0, &x1, t, &sched)?;
            let cond = if rng.random_bool(cfg.last_frame_dropout) {
                ConditionBundle::student(t, sched.t_max, item.caption_emb.clone(), item.first.clone())
            } else {
                ConditionBundle::teacher(t, sched.t_max, item.caption_emb.clone(), item.first.clone(), item.last.clone())
            };
            let g = Graph::new();
            let b = model.params.bind(&g, true);
            let (u, _) = model.forward_graph(&b, g.constant(&x_t), &cond, &Default::default())?;
            let loss = u.sub(g.constant(&target)).sum_squares().scale(1.0 / target.len() as f64);
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::Diverged { step, loss: lv });
            }
            loss_sum += lv;
            grads.add_scaled(&b.grads(&g.backward(loss)), 1.0 / cfg.teacher_grad_accum as f64);
        }
        let (lr, grad_norm) = opt.apply(&mut model.params, grads);
        let entry = StepLog {
            phase: "teacher".into(),
            step,
            loss: loss_sum / cfg.teacher_grad_accum as f64,
            kd: None,
            tail: None,
            lr,
            grad_norm,
        };
        log(&entry);
        history.push(entry);
        checkpoint(ckpt_dir, cfg.checkpoint_every, "teacher", step, &model, &opt.ema.shadow)?;
    }
    let ema = Dit {
        config: model.config.clone(),
        params: opt.ema.shadow,
    };
    Ok(as_stored(TrainedModel {
        raw: model,
        ema,
        history,
    }))
}

/// Frozen inputs shared by every student run.
pub struct StudentSetup<'a> {
    pub teacher: &'a Dit,
    pub vae: &'a Vae3d,
    pub data: &'a TrainingSet,
    pub cache: &'a TailCache,
}

/// Loss statistics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    pub total: f64,
    pub kd: Option<f64>,
    pub tail: Option<f64>,
}

/// Gradient of the mean student loss, accumulated over micro-batches.
///
/// Each inner slice is one micro-batch evaluated on a single graph (mean
/// over its samples); micro-batch gradients are averaged. With equal-sized
/// micro-batches this equals the gradient of the mean over all samples.
pub fn student_gradients(
    setup: &StudentSetup<'_>,
    student: &Dit,
    micro_batches: &[Vec<StudentSample>],
    weights: &LossWeights,
    schedule: &Schedule,
) -> Result<(Params, LossStats)> {
    let mut grads = student.params.zeros_like();
    let mut stats = LossStats::default();
    let n_micro = micro_batches.len() as f64;
    let n_total: usize = micro_batches.iter().map(Vec::len).sum();
    for mb in micro_batches {
        if mb.is_empty() {
            return Err(Error::InvalidArgument("empty micro-batch".into()));
        }
        let g = Graph::new();
        let b = student.params.bind(&g, true);
        let mut total = g.constant(&Tensor::scalar(0.0));
        for s in mb {
            let l = student_step_losses(setup.teacher, student, &b, setup.vae, s, weights, schedule)?;
            let share = 1.0 / n_total as f64;
            stats.total += l.total.item() * share;
            if let Some(kd) = l.kd {
                *stats.kd.get_or_insert(0.0) += kd.item() * share;
            }
            if let Some(tail) = l.tail {
                *stats.tail.get_or_insert(0.0) += tail.item() * share;
            }
            total = total.add(l.total);
        }
        let mean = total.scale(1.0 / mb.len() as f64);
        grads.add_scaled(&b.grads(&g.backward(mean)), 1.0 / n_micro);
    }
    Ok((grads, stats))
}

fn draw_student_sample(
    rng: &mut ChaCha8Rng,
    setup: &StudentSetup<'_>,
    text: TeacherText,
    rollouts: &BTreeMap<String, Tensor>,
) -> Result<StudentSample> {
    let item = &setup.data.items[rng.random_range(0..setup.data.items.len())];
    let t: f64 = rng.random();
    let x0 = rollouts.get(&item.id).unwrap_or(&item.x0).clone();
    let x1 = Tensor::randn(x0.shape(), 1.0, rng);
    Ok(StudentSample {
        id: item.id.clone(),
        x0,
        x1,
        t,
        first: item.first.clone(),
        last: item.last.clone(),
        z_tail_gt: setup.cache.get(&item.id)?.clone(),
        teacher_text: match text {
            TeacherText::Caption => item.caption_emb.clone(),
            TeacherText::Instruction => item.instruction_emb.clone(),
        },
        student_text: item.instruction_emb.clone(),
    })
}

/// Distills the frozen teacher into a student initialized as its copy.
/// The teacher is only ever read.
pub fn train_student(
    cfg: &TrainConfig,
    setup: &StudentSetup<'_>,
    steps: usize,
    ckpt_dir: Option<&Path>,
    mut log: impl FnMut(&StepLog),
) -> Result<TrainedModel> {
    let weights = cfg.loss_weights();
    weights.validate()?;
    setup.cache.check_vae(setup.vae)?;
    for item in &setup.data.items {
        setup.cache.get(&item.id)?;
    }
    let mut student = setup.teacher.clone();
    if steps == 0 {
        return Ok(TrainedModel::untrained(student));
    }
    let sched = cfg.schedule();
    let mut rollouts = BTreeMap::new();
    if cfg.x0_source == X0Source::TeacherRollout {
        for (i, item) in setup.data.items.iter().enumerate() {
            let z = rollout_teacher(
                setup.teacher,
                setup.vae,
                &item.triplet,
                &item.caption,
                cfg.frames,
                cfg.sampling_steps,
                cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9),
            )?;
            rollouts.insert(item.id.clone(), z.blocks);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut opt = Optimizer::new(&student.params, cfg, cfg.lr, steps);
    let mut history = Vec::with_capacity(steps);
    for step in 1..=steps {
        let mut micro = Vec::with_capacity(cfg.grad_accum);
        for _ in 0..cfg.grad_accum {
            let mb = (0..cfg.micro_batch)
                .map(|_| draw_student_sample(&mut rng, setup, cfg.teacher_text, &rollouts))
                .collect::<Result<Vec<_>>>()?;
            micro.push(mb);
        }
        let (grads, stats) = student_gradients(setup, &student, &micro, &weights, &sched)?;
        if !stats.total.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step,
                loss: stats.total,
            });
        }
        let (lr, grad_norm) = opt.apply(&mut student.params, grads);
        let entry = StepLog {
            phase: "student".into(),
            step,
            loss: stats.total,
            kd: stats.kd,
            tail: stats.tail,
            lr,
            grad_norm,
        };
        log(&entry);
        history.push(entry);
        checkpoint(ckpt_dir, cfg.checkpoint_every, "student", step, &student, &opt.ema.shadow)?;
    }
    let ema = Dit {
        config: student.config.clone(),
        params: opt.ema.shadow,
    };
    Ok(as_stored(TrainedModel {
        raw: student,
        ema,
        history,
    }))
}

/// Edits `source` by sampling a short clip in student mode and returning
/// its final frame. Also reports how many times the model was evaluated.
pub fn infer_edit_counted(
    student: &Dit,
    vae: &Vae3d,
    source: &Image,
    instruction: &str,
    frames: usize,
    steps: usize,
    seed: u64,
) -> Result<(Image, usize)> {
    let first = vae.tile_and_encode_tail(source)?.blocks;
    let (blocks, h, w) = vae.latent_dims(frames, source.height, source.width)?;
    let cond = ConditionBundle::student(0.0, 1.0, embed_text(instruction, student.config.text_dim), first);
    let mut calls = 0;
    let mut field = |x: &Tensor, t: f64| {
        calls += 1;
        student.velocity(x, &cond.at(t))
    };
    let z = euler_sample(&mut field, &[blocks, h, w, vae.config.latent_channels], steps, seed, 1.0)?;
    let clip = vae.decode(&crate::vae3d::LatentClip::new(z, crate::vae3d::LatentProvenance::FlowState))?;
    Ok((clip.frame(clip.len() - 1), calls))
}

pub fn infer_edit(
    student: &Dit,
    vae: &Vae3d,
    source: &Image,
    instruction: &str,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    let frames = student.config.max_blocks * crate::vae3d::TEMPORAL_STRIDE;
    Ok(infer_edit_counted(student, vae, source, instruction, frames, steps, seed)?.0)
}

/// Shared artifacts of a desk run: everything up to (not including) the
/// student.
pub struct Prepared {
    pub vae: Vae3d,
    pub data: TrainingSet,
    pub cache: TailCache,
    pub teacher: TrainedModel,
}

impl Prepared {
    pub fn setup(&self) -> StudentSetup<'_> {
        StudentSetup {
            teacher: &self.teacher.ema,
            vae: &self.vae,
            data: &self.data,
            cache: &self.cache,
        }
    }
}

pub const VAE_FILE: &str = "vae.ckpt";
pub const TAIL_CACHE_FILE: &str = "tail_cache.bin";
pub const TEACHER_FILE: &str = "teacher.ckpt";
/// The config the artifacts in a directory were prepared with.
pub const PREPARED_STAMP: &str = "prepared.toml";

impl TrainConfig {
    /// The config with every student-only knob reset: two configs with the
    /// same key produce the same VAE, tail cache and teacher.
    pub fn preparation_key(&self) -> String {
        let d = TrainConfig::default();
        TrainConfig {
            student_steps: d.student_steps,
            lr: d.lr,
            micro_batch: d.micro_batch,
            grad_accum: d.grad_accum,
            precision: d.precision,
            lambda_kd: d.lambda_kd,
            lambda_tail: d.lambda_tail,
            beta: d.beta,
            taps: d.taps,
            tail_exponent: d.tail_exponent,
            tail_tau: d.tail_tau,
            tail_path: d.tail_path,
            x0_source: d.x0_source,
            teacher_text: d.teacher_text,
            checkpoint_every: d.checkpoint_every,
            sampling_steps: d.sampling_steps,
            eval_per_task: d.eval_per_task,
            eval_seed: d.eval_seed,
            ..self.clone()
        }
        .to_toml()
    }
}

impl Prepared {
    /// Loads the artifacts `prepare` wrote to `dir`. The training set is
    /// rebuilt (it is cheap) from the loaded VAE.
    pub fn load(cfg: &TrainConfig, dir: &Path) -> Result<Self> {
        let vae = Vae3d::load(&dir.join(VAE_FILE))?;
        let cache = TailCache::load(&dir.join(TAIL_CACHE_FILE))?;
        cache.check_vae(&vae)?;
        let teacher = TrainedModel::load(&dir.join(TEACHER_FILE))?;
        let data = build_training_set(cfg, &vae, training_triplets(cfg, cfg.train_triplets))?;
        Ok(Self {
            vae,
            data,
            cache,
            teacher,
        })
    }
}

/// [`prepare`] into `dir`, unless `dir` already holds artifacts stamped
/// with the same preparation key, in which case they are loaded.
pub fn prepare_cached(cfg: &TrainConfig, dir: &Path, log: impl FnMut(&StepLog)) -> Result<Prepared> {
    let key = cfg.preparation_key();
    if std::fs::read_to_string(dir.join(PREPARED_STAMP)).is_ok_and(|s| s == key) {
        return Prepared::load(cfg, dir);
    }
    std::fs::create_dir_all(dir)?;
    let p = prepare(cfg, Some(dir), log)?;
    std::fs::write(dir.join(PREPARED_STAMP), key)?;
    Ok(p)
}

/// VAE → training set → tail cache → teacher, with optional artifact
/// directory for checkpoints.
pub fn prepare(cfg: &TrainConfig, dir: Option<&Path>, mut log: impl FnMut(&StepLog)) -> Result<Prepared> {
    cfg.validate()?;
    let triplets = training_triplets(cfg, cfg.train_triplets);
    let vae = pretrain_vae(cfg, &triplets, &mut log)?;
    let cache = precompute_tail_cache(&triplets, &vae)?;
    let data = build_training_set(cfg, &vae, triplets)?;
    let teacher = pretrain_teacher(cfg, &data, cfg.teacher_steps, None, &mut log)?;
    if let Some(dir) = dir {
        vae.save(&dir.join(VAE_FILE))?;
        cache.save(&dir.join(TAIL_CACHE_FILE))?;
        teacher.save(&dir.join(TEACHER_FILE), cfg.teacher_steps)?;
    }
    Ok(Prepared {
        vae,
        data,
        cache,
        teacher,
    })
}

/// `dir/name`, or `name` when `dir` is `None`.
pub fn artifact_path(dir: Option<&Path>, name: &str) -> PathBuf {
    dir.map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            train_triplets: 6,
            vae_hidden: 8,
            vae_steps: 3,
            dit_depth: 2,
            dit_width: 16,
            dit_heads: 2,
            text_dim: 8,
            taps: vec![1],
            teacher_steps: 2,
            teacher_grad_accum: 2,
            student_steps: 2,
            grad_accum: 2,
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        let partial = TrainConfig::from_toml_str("lr = 0.003\ntail_path = \"latent_shortcut\"\n").unwrap();
        assert_eq!(partial.lr, 3e-3);
        assert_eq!(partial.tail_path, TailPath::LatentShortcut);
        assert!(TrainConfig::from_toml_str("nonsense = 1").is_err());
        assert!(TrainConfig::from_toml_str("warmup_fraction = 1.0").is_err());
        assert_eq!(cfg.effective_batch(), 8);
    }

    #[test]
    fn teacher_zero_steps_is_init() {
        let cfg = tiny_config();
        let m = pretrain_teacher(&cfg, &TrainingSet::default(), 0, None, |_| {}).unwrap();
        assert_eq!(m.raw, Dit::new(cfg.dit_config()).unwrap());
    }

    #[test]
    fn trained_model_container_round_trip() {
        let cfg = tiny_config();
        let mut m = TrainedModel::untrained(Dit::new(cfg.dit_config()).unwrap());
        m.raw.params.get_mut("embed.b").unwrap().data_mut()[0] = 0.25;
        let back = TrainedModel::from_container(&Container::from_bytes(&m.to_container(3).to_bytes()).unwrap()).unwrap();
        assert_eq!(back.raw.params.get("embed.b").unwrap().data()[0], 0.25);
        assert_eq!(back.ema.params.get("embed.b").unwrap().data()[0], 0.0);
    }

    #[test]
    fn head_tail() {
        assert_eq!(head_tail_means(&[4.0, 2.0, 1.0, 1.0], 2), Some((3.0, 1.0)));
        assert_eq!(head_tail_means(&[], 2), None);
    }
}
