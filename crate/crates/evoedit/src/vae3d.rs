//! Small causal video autoencoder. Every group of four consecutive frames is
//! compressed into one latent block, spatially downsampled by the stride.
//!
//! Encoder: a 4-frame patch embedding (a temporal convolution with kernel 4
//! and stride 4, so blocks never look at later frames) followed by two
//! residual 3×3 convolutions and separate mean / log-variance heads.
//! Decoder: the mirror image, ending in a linear un-patchify and a clamp to
//! `[0, 1]`. Encoding is always the mean; sampling only happens in
//! [`train_vae`]. Latents are normalized per channel with statistics
//! gathered at the end of training so that they are roughly unit scale,
//! matching the standard-normal noise used by the flow model.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{conv3x3, conv3x3_index, init_linear, Bound, Params};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::Tensor;

/// Frames per latent block.
pub const TEMPORAL_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub spatial_stride: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            spatial_stride: 4,
            latent_channels: 4,
            hidden: 32,
            kl_weight: 1e-4,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.spatial_stride.is_power_of_two() || self.latent_channels == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("invalid VAE config {self:?}")));
        }
        if self.kl_weight < 0.0 {
            return Err(Error::Config("kl_weight must be nonnegative".into()));
        }
        Ok(())
    }

    fn patch_features(&self) -> usize {
        TEMPORAL_STRIDE * self.spatial_stride * self.spatial_stride * 3
    }
}

/// Pixel clip, `F × H × W × 3` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
}

impl VideoClip {
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Shape("empty clip".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if !im.same_size(first) {
                return Err(Error::Shape("frames of different sizes".into()));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Self {
            frames: Tensor::new(&[images.len(), first.height, first.width, 3], data),
        })
    }

    /// `n` copies of `image`.
    pub fn repeat(image: &Image, n: usize) -> Self {
        Self::from_images(&vec![image.clone(); n]).expect("nonempty")
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, i: usize) -> Image {
        let s = self.frames.shape();
        let n = s[1] * s[2] * 3;
        Image::from_data(s[2], s[1], self.frames.data()[i * n..(i + 1) * n].to_vec()).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentProvenance {
    Encoded,
    FlowState,
}

/// `blocks × h × w × C` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    pub blocks: Tensor,
    pub provenance: LatentProvenance,
}

impl LatentClip {
    pub fn new(blocks: Tensor, provenance: LatentProvenance) -> Self {
        Self { blocks, provenance }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.shape()[0]
    }

    pub fn block(&self, i: usize) -> LatentClip {
        LatentClip::new(self.blocks.slice_outer(i, i + 1), self.provenance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vae3d {
    pub config: VaeConfig,
    pub params: Params,
    /// Per-channel latent normalization: `z = (μ − shift) / scale`.
    pub latent_shift: Vec<f64>,
    pub latent_scale: Vec<f64>,
}

fn patch_index(blocks: usize, h: usize, w: usize, s: usize) -> Arc<Vec<usize>> {
    let (hh, ww) = (h * s, w * s);
    let mut idx = Vec::with_capacity(blocks * h * w * TEMPORAL_STRIDE * s * s * 3);
    for b in 0..blocks {
        for i in 0..h {
            for j in 0..w {
                for f in 0..TEMPORAL_STRIDE {
                    for dy in 0..s {
                        for dx in 0..s {
                            for c in 0..3 {
                                let frame = b * TEMPORAL_STRIDE + f;
                                idx.push(((frame * hh + i * s + dy) * ww + j * s + dx) * 3 + c);
                            }
                        }
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

fn unpatch_index(blocks: usize, h: usize, w: usize, s: usize) -> Arc<Vec<usize>> {
    let (hh, ww) = (h * s, w * s);
    let feat = TEMPORAL_STRIDE * s * s * 3;
    let mut idx = Vec::with_capacity(blocks * TEMPORAL_STRIDE * hh * ww * 3);
    for frame in 0..blocks * TEMPORAL_STRIDE {
        let (b, f) = (frame / TEMPORAL_STRIDE, frame % TEMPORAL_STRIDE);
        for y in 0..hh {
            for x in 0..ww {
                for c in 0..3 {
                    let row = (b * h + y / s) * w + x / s;
                    idx.push(row * feat + ((f * s + y % s) * s + x % s) * 3 + c);
                }
            }
        }
    }
    Arc::new(idx)
}

impl Vae3d {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (hid, c) = (config.hidden, config.latent_channels);
        let mut p = Params::new();
        init_linear(&mut p, &mut rng, "enc.in", config.patch_features(), hid, 1.0);
        init_linear(&mut p, &mut rng, "enc.conv1", 9 * hid, hid, 0.5);
        init_linear(&mut p, &mut rng, "enc.conv2", 9 * hid, hid, 0.5);
        init_linear(&mut p, &mut rng, "enc.mu", hid, c, 1.0);
        init_linear(&mut p, &mut rng, "enc.logvar", hid, c, 0.1);
        init_linear(&mut p, &mut rng, "dec.in", c, hid, 1.0);
        init_linear(&mut p, &mut rng, "dec.conv1", 9 * hid, hid, 0.5);
        init_linear(&mut p, &mut rng, "dec.conv2", 9 * hid, hid, 0.5);
        init_linear(&mut p, &mut rng, "dec.out", hid, config.patch_features(), 0.1);
        p.insert("dec.out.b", Tensor::full(&[config.patch_features()], 0.5));
        Ok(Self {
            latent_shift: vec![0.0; c],
            latent_scale: vec![1.0; c],
            config,
            params: p,
        })
    }

    /// `(blocks, h, w)` of the latent for a clip of this shape.
    pub fn latent_dims(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let s = self.config.spatial_stride;
        if frames == 0 || !frames.is_multiple_of(TEMPORAL_STRIDE) {
            return Err(Error::Shape(format!("{frames} frames is not a positive multiple of {TEMPORAL_STRIDE}")));
        }
        if !height.is_multiple_of(s) || !width.is_multiple_of(s) || height == 0 || width == 0 {
            return Err(Error::Shape(format!("{height}x{width} is not divisible by stride {s}")));
        }
        Ok((frames / TEMPORAL_STRIDE, height / s, width / s))
    }

    fn clip_dims(&self, clip: &Tensor) -> Result<(usize, usize, usize)> {
        match clip.shape() {
            [f, h, w, 3] => self.latent_dims(*f, *h, *w),
            s => Err(Error::Shape(format!("expected F x H x W x 3 clip, got {s:?}"))),
        }
    }

    /// Raw (unnormalized) mean and log-variance, each `(blocks·h·w) × C`.
    pub(crate) fn encode_graph<'g>(&self, b: &Bound<'g>, clip: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let (blocks, h, w) = self.clip_dims(&clip.value())?;
        let s = self.config.spatial_stride;
        let hid = self.config.hidden;
        let rows = blocks * h * w;
        let x = clip.gather(patch_index(blocks, h, w, s), &[rows, self.config.patch_features()]);
        let conv = conv3x3_index(blocks, h, w, hid);
        let mut hdn = b.linear(x, "enc.in").silu();
        hdn = hdn.add(conv3x3(b, hdn, "enc.conv1", &conv).silu());
        hdn = hdn.add(conv3x3(b, hdn, "enc.conv2", &conv).silu());
        Ok((b.linear(hdn, "enc.mu"), b.linear(hdn, "enc.logvar")))
    }

    /// Decodes raw latents `(blocks·h·w) × C` into an `F × H × W × 3` clip.
    pub(crate) fn decode_graph_raw<'g>(&self, b: &Bound<'g>, z: Var<'g>, blocks: usize, h: usize, w: usize) -> Var<'g> {
        let s = self.config.spatial_stride;
        let conv = conv3x3_index(blocks, h, w, self.config.hidden);
        let mut hdn = b.linear(z, "dec.in").silu();
        hdn = hdn.add(conv3x3(b, hdn, "dec.conv1", &conv).silu());
        hdn = hdn.add(conv3x3(b, hdn, "dec.conv2", &conv).silu());
        let out = b.linear(hdn, "dec.out");
        let n = blocks * TEMPORAL_STRIDE * h * s * w * s * 3;
        out.gather(unpatch_index(blocks, h, w, s), &[n])
            .reshape(&[blocks * TEMPORAL_STRIDE, h * s, w * s, 3])
            .clamp01()
    }

    /// Normalized latent `blocks × h × w × C` → clip, differentiable in `z`.
    pub(crate) fn decode_graph<'g>(&self, b: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let g = z.graph();
        let (blocks, h, w, c) = match z.shape()[..] {
            [n, h, w, c] if c == self.config.latent_channels => (n, h, w, c),
            ref s => return Err(Error::Shape(format!("latent shape {s:?}"))),
        };
        let zr = z
            .reshape(&[blocks * h * w, c])
            .mul_row(g.constant(&Tensor::new(&[c], self.latent_scale.clone())))
            .add_row(g.constant(&Tensor::new(&[c], self.latent_shift.clone())));
        Ok(self.decode_graph_raw(b, zr, blocks, h, w))
    }

    /// Normalized mean latent of a clip, differentiable in the clip.
    pub(crate) fn encode_graph_norm<'g>(&self, b: &Bound<'g>, clip: Var<'g>) -> Result<Var<'g>> {
        let g = clip.graph();
        let (blocks, h, w) = self.clip_dims(&clip.value())?;
        let c = self.config.latent_channels;
        let (mu, _) = self.encode_graph(b, clip)?;
        let inv: Vec<f64> = self.latent_scale.iter().map(|s| 1.0 / s).collect();
        let off: Vec<f64> = self.latent_shift.iter().zip(&inv).map(|(m, i)| -m * i).collect();
        Ok(mu
            .mul_row(g.constant(&Tensor::new(&[c], inv)))
            .add_row(g.constant(&Tensor::new(&[c], off)))
            .reshape(&[blocks, h, w, c]))
    }

    /// Deterministic (mean) encoding.
    pub fn encode(&self, clip: &VideoClip) -> Result<LatentClip> {
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let z = self.encode_graph_norm(&b, g.constant(&clip.frames))?;
        Ok(LatentClip::new(z.value(), LatentProvenance::Encoded))
    }

    pub fn decode(&self, latent: &LatentClip) -> Result<VideoClip> {
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let x = self.decode_graph(&b, g.constant(&latent.blocks))?;
        Ok(VideoClip { frames: x.value() })
    }

    /// Encodes four copies of `image` into a single latent block.
    pub fn tile_and_encode_tail(&self, image: &Image) -> Result<LatentClip> {
        self.encode(&VideoClip::repeat(image, TEMPORAL_STRIDE))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({
            "kind": "vae3d",
            "config": self.config,
            "latent_shift": self.latent_shift,
            "latent_scale": self.latent_scale,
        }));
        self.params.write_into(&mut c, "");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta["kind"] != "vae3d" {
            return Err(Error::Format("not a VAE checkpoint".into()));
        }
        let config: VaeConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut vae = Self::new(config)?;
        let params = Params::read_from(c, "");
        params.check_layout(&vae.params)?;
        vae.params = params;
        vae.latent_shift = serde_json::from_value(c.meta["latent_shift"].clone())?;
        vae.latent_scale = serde_json::from_value(c.meta["latent_scale"].clone())?;
        Ok(vae)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Parameters as they will be after a save/load round trip.
    pub fn quantized(&self) -> Self {
        Self::from_container(&Container::from_bytes(&self.to_container().to_bytes()).unwrap()).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub steps: usize,
    /// Latent blocks (4-frame groups) per step.
    pub batch_blocks: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_blocks: 4,
            lr: 2e-3,
            warmup_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeStepLog {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub lr: f64,
}

/// Splits clips into 4-frame blocks.
fn blocks_of(clips: &[VideoClip]) -> Vec<Tensor> {
    clips
        .iter()
        .flat_map(|c| (0..c.len() / TEMPORAL_STRIDE).map(move |b| c.frames.slice_outer(b * TEMPORAL_STRIDE, (b + 1) * TEMPORAL_STRIDE)))
        .collect()
}

/// Trains with an L1 reconstruction loss plus `kl_weight` × KL divergence,
/// then refreshes the latent normalization statistics. `steps = 0` leaves
/// the model untouched.
pub fn train_vae(
    vae: &mut Vae3d,
    clips: &[VideoClip],
    cfg: &VaeTrainConfig,
    mut log: impl FnMut(&VaeStepLog),
) -> Result<Vec<VaeStepLog>> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("VAE training set is empty".into()));
    }
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    for c in clips {
        vae.clip_dims(&c.frames)?;
    }
    let blocks = blocks_of(clips);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    let mut cursor = order.len();
    let sched = CosineSchedule {
        peak: cfg.lr,
        total: cfg.steps,
        warmup_fraction: cfg.warmup_fraction,
    };
    let mut opt = AdamW::new(
        &vae.params,
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
    );
    // Train in raw latent space.
    let c = vae.config.latent_channels;
    vae.latent_shift = vec![0.0; c];
    vae.latent_scale = vec![1.0; c];
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_blocks);
        for _ in 0..cfg.batch_blocks {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&blocks[order[cursor]]);
            cursor += 1;
        }
        let x = Tensor::cat_outer(&batch);
        let (nb, h, w) = vae.clip_dims(&x)?;
        let g = Graph::new();
        let b = vae.params.bind(&g, true);
        let xv = g.constant(&x);
        let (mu, logvar) = vae.encode_graph(&b, xv)?;
        let eps = g.constant(&Tensor::randn(&mu.shape(), 1.0, &mut rng));
        let z = mu.add(logvar.scale(0.5).exp().mul(eps));
        let recon = vae.decode_graph_raw(&b, z, nb, h, w);
        let n_pix = x.len() as f64;
        let l_rec = recon.sub(xv).sum_abs().scale(1.0 / n_pix);
        let ones = g.constant(&Tensor::full(&mu.shape(), 1.0));
        let kl = mu
            .mul(mu)
            .add(logvar.exp())
            .sub(ones)
            .sub(logvar)
            .sum()
            .scale(0.5 / mu.value().len() as f64);
        let loss = l_rec.add(kl.scale(vae.config.kl_weight));
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::Diverged { step, loss: lv });
        }
        let grads = g.backward(loss);
        let mut gp = b.grads(&grads);
        clip_grad_norm(&mut gp, 1.0);
        let lr = sched.lr(step);
        opt.step(&mut vae.params, &gp, lr);
        let entry = VaeStepLog {
            step,
            loss: lv,
            recon: l_rec.item(),
            kl: kl.item(),
            lr,
        };
        log(&entry);
        history.push(entry);
    }
    refresh_normalization(vae, &blocks)?;
    Ok(history)
}

/// Sets the per-channel latent shift/scale from the mean encodings of `blocks`.
fn refresh_normalization(vae: &mut Vae3d, blocks: &[Tensor]) -> Result<()> {
    let c = vae.config.latent_channels;
    vae.latent_shift = vec![0.0; c];
    vae.latent_scale = vec![1.0; c];
    let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0.0);
    for chunk in blocks.chunks(16) {
        let x = Tensor::cat_outer(&chunk.iter().collect::<Vec<_>>());
        let z = vae.encode(&VideoClip { frames: x })?;
        for row in z.blocks.data().chunks(c) {
            for k in 0..c {
                sum[k] += row[k];
                sq[k] += row[k] * row[k];
            }
            n += 1.0;
        }
    }
    for k in 0..c {
        let mean = sum[k] / n;
        let var = (sq[k] / n - mean * mean).max(1e-12);
        vae.latent_shift[k] = mean;
        vae.latent_scale[k] = var.sqrt();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_law() {
        let vae = Vae3d::new(VaeConfig::default()).unwrap();
        for f in [4, 8, 12] {
            let clip = VideoClip {
                frames: Tensor::full(&[f, 32, 32, 3], 0.3),
            };
            let z = vae.encode(&clip).unwrap();
            assert_eq!(z.blocks.shape(), &[f / 4, 8, 8, 4]);
            assert_eq!(vae.decode(&z).unwrap().frames.shape(), &[f, 32, 32, 3]);
        }
        let bad = VideoClip {
            frames: Tensor::zeros(&[6, 32, 32, 3]),
        };
        assert!(vae.encode(&bad).is_err());
    }

    #[test]
    fn zero_latent_decodes_in_range() {
        let vae = Vae3d::new(VaeConfig::default()).unwrap();
        let out = vae
            .decode(&LatentClip::new(Tensor::zeros(&[1, 8, 8, 4]), LatentProvenance::Encoded))
            .unwrap();
        assert!(out.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn patch_and_unpatch_are_inverse() {
        let (blocks, h, w, s) = (2, 3, 2, 2);
        let p = patch_index(blocks, h, w, s);
        let u = unpatch_index(blocks, h, w, s);
        for (i, &j) in u.iter().enumerate() {
            assert_eq!(p[j], i);
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let mut vae = Vae3d::new(VaeConfig::default()).unwrap();
        let before = vae.clone();
        let clip = VideoClip {
            frames: Tensor::full(&[4, 32, 32, 3], 0.5),
        };
        let cfg = VaeTrainConfig {
            steps: 0,
            ..Default::default()
        };
        train_vae(&mut vae, &[clip], &cfg, |_| {}).unwrap();
        assert_eq!(vae, before);
    }
}
