//! Tiny video diffusion transformer.
//!
//! The latent clip `x_t` is concatenated channel-wise with the first-frame
//! latent and the last-frame latent (zeros in student mode), cut into
//! `p × p` patches per block and embedded as tokens with learned spatial and
//! temporal positions. The timestep (sinusoidal features through a small
//! MLP) and the text embedding are summed into one conditioning vector that
//! is added to every token and also drives adaptive layer-norm modulation
//! inside each transformer block. Attention is full over all tokens of all
//! blocks.
//!
//! Teacher and student share this exact architecture, so hidden states of
//! any block line up one-to-one.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{init_linear, Bound, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiTConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Patch size over the latent grid.
    pub patch: usize,
    pub latent_channels: usize,
    /// Latent grid side (`H / spatial stride`).
    pub latent_size: usize,
    /// Largest number of latent blocks a clip may have.
    pub max_blocks: usize,
    pub text_dim: usize,
    pub mlp_ratio: usize,
    pub timestep_features: usize,
    pub seed: u64,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 128,
            heads: 4,
            patch: 2,
            latent_channels: 4,
            latent_size: 8,
            max_blocks: 4,
            text_dim: 64,
            mlp_ratio: 4,
            timestep_features: 32,
            seed: 0,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{m}: {self:?}")));
        if self.depth == 0 || self.width == 0 || self.heads == 0 {
            return bad("depth, width and heads must be positive");
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad("width must be divisible by heads");
        }
        if self.patch == 0 || !self.latent_size.is_multiple_of(self.patch) {
            return bad("patch must divide the latent grid");
        }
        if !self.timestep_features.is_multiple_of(2) || self.max_blocks == 0 {
            return bad("timestep features must be even and max_blocks positive");
        }
        Ok(())
    }

    fn grid(&self) -> usize {
        self.latent_size / self.patch
    }

    fn token_in(&self) -> usize {
        self.patch * self.patch * 3 * self.latent_channels
    }

    fn token_out(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }

    /// Default tap set: every other block starting at 1 (`{1, 3, 5, 7}` for depth 8).
    pub fn default_taps(&self) -> BTreeSet<usize> {
        (1..self.depth).step_by(2).collect()
    }
}

/// Dimension of [`embed_text`] vectors unless configured otherwise.
pub const TEXT_DIM: usize = 64;
const TEXT_BUCKETS: u64 = 4096;
const TEXT_PROJECTION_SEED: u64 = 0x7e87_e3b3_d0c1_a5f1;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Hashed bag of unigrams and bigrams pushed through a frozen random
/// projection. Deterministic; the empty string (or one without any word)
/// maps to the zero vector.
pub fn embed_text(text: &str, dim: usize) -> Tensor {
    let words: Vec<String> = text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    let mut grams: Vec<String> = words.clone();
    grams.extend(words.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    let mut out = vec![0.0; dim];
    if grams.is_empty() {
        return Tensor::new(&[dim], out);
    }
    for g in &grams {
        let bucket = fnv1a(g) % TEXT_BUCKETS;
        let mut rng = ChaCha8Rng::seed_from_u64(TEXT_PROJECTION_SEED ^ bucket.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for v in out.iter_mut() {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            *v += z;
        }
    }
    let norm = (grams.len() as f64).sqrt();
    Tensor::new(&[dim], out.into_iter().map(|v| v / norm).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// First and last frame conditioning.
    Teacher,
    /// First frame only.
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub t: f64,
    pub t_max: f64,
    pub text: Tensor,
    /// `1 × h × w × C`.
    pub first: Tensor,
    /// `1 × h × w × C`, teacher mode only.
    pub last: Option<Tensor>,
    pub mode: Mode,
}

impl ConditionBundle {
    pub fn teacher(t: f64, t_max: f64, text: Tensor, first: Tensor, last: Tensor) -> Self {
        Self {
            t,
            t_max,
            text,
            first,
            last: Some(last),
            mode: Mode::Teacher,
        }
    }

    pub fn student(t: f64, t_max: f64, text: Tensor, first: Tensor) -> Self {
        Self {
            t,
            t_max,
            text,
            first,
            last: None,
            mode: Mode::Student,
        }
    }

    pub fn at(&self, t: f64) -> Self {
        Self { t, ..self.clone() }
    }

    pub fn validate(&self, cfg: &DiTConfig) -> Result<()> {
        match (self.mode, &self.last) {
            (Mode::Teacher, None) => return Err(Error::InvalidArgument("teacher mode needs a last-frame latent".into())),
            (Mode::Student, Some(_)) => {
                return Err(Error::InvalidArgument("student mode must not carry a last-frame latent".into()))
            }
            _ => {}
        }
        if !(0.0..=self.t_max).contains(&self.t) {
            return Err(Error::InvalidArgument(format!("t={} outside [0, {}]", self.t, self.t_max)));
        }
        let want = [1, cfg.latent_size, cfg.latent_size, cfg.latent_channels];
        for (name, t) in [("first", Some(&self.first)), ("last", self.last.as_ref())] {
            if let Some(t) = t {
                if t.shape() != want {
                    return Err(Error::Shape(format!("{name}-frame latent {:?}, expected {want:?}", t.shape())));
                }
            }
        }
        if self.text.shape() != [cfg.text_dim] {
            return Err(Error::Shape(format!("text embedding {:?}, expected [{}]", self.text.shape(), cfg.text_dim)));
        }
        Ok(())
    }
}

/// Tapped block outputs, `tokens × width` each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HiddenStates {
    pub blocks: BTreeMap<usize, Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dit {
    pub config: DiTConfig,
    pub params: Params,
}

struct Layout {
    blocks: usize,
    tokens: usize,
    patchify: Arc<Vec<usize>>,
    unpatchify: Arc<Vec<usize>>,
    broadcast: Arc<Vec<usize>>,
    spatial_pos: Arc<Vec<usize>>,
    temporal_pos: Arc<Vec<usize>>,
}

fn timestep_features(t_norm: f64, n: usize) -> Tensor {
    let half = n / 2;
    let mut v = Vec::with_capacity(n);
    let x = 1000.0 * t_norm;
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        v.push((x * freq).sin());
    }
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        v.push((x * freq).cos());
    }
    Tensor::new(&[n], v)
}

/// Column slice `[start, start + len)` of a `1 × n` row vector.
fn cols<'g>(v: Var<'g>, start: usize, len: usize) -> Var<'g> {
    v.gather(Arc::new((start..start + len).collect()), &[len])
}

impl Dit {
    pub fn new(config: DiTConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.width;
        let mut p = Params::new();
        init_linear(&mut p, &mut rng, "embed", config.token_in(), w, 1.0);
        p.insert("pos.spatial", Tensor::randn(&[config.grid() * config.grid(), w], 0.02, &mut rng));
        p.insert("pos.temporal", Tensor::randn(&[config.max_blocks, w], 0.02, &mut rng));
        init_linear(&mut p, &mut rng, "time.fc1", config.timestep_features, w, 1.0);
        init_linear(&mut p, &mut rng, "time.fc2", w, w, 1.0);
        init_linear(&mut p, &mut rng, "text", config.text_dim, w, 1.0);
        for b in 0..config.depth {
            for n in ["q", "k", "v", "o"] {
                init_linear(&mut p, &mut rng, &format!("blk{b}.{n}"), w, w, 1.0);
            }
            init_linear(&mut p, &mut rng, &format!("blk{b}.fc1"), w, w * config.mlp_ratio, 1.0);
            init_linear(&mut p, &mut rng, &format!("blk{b}.fc2"), w * config.mlp_ratio, w, 1.0);
            // Modulation starts at zero so every block begins as the identity.
            init_linear(&mut p, &mut rng, &format!("blk{b}.ada"), w, 6 * w, 0.0);
        }
        init_linear(&mut p, &mut rng, "final.ada", w, 2 * w, 0.0);
        init_linear(&mut p, &mut rng, "final.out", w, config.token_out(), 0.0);
        Ok(Self { config, params: p })
    }

    fn layout(&self, blocks: usize) -> Layout {
        let cfg = &self.config;
        let (n, p, c, g) = (cfg.latent_size, cfg.patch, cfg.latent_channels, cfg.grid());
        let tokens = blocks * g * g;
        // Patchify the (blocks·n·n) × 3C input.
        let mut patchify = Vec::with_capacity(tokens * cfg.token_in());
        for b in 0..blocks {
            for gy in 0..g {
                for gx in 0..g {
                    for dy in 0..p {
                        for dx in 0..p {
                            let row = (b * n + gy * p + dy) * n + gx * p + dx;
                            for ch in 0..3 * c {
                                patchify.push(row * 3 * c + ch);
                            }
                        }
                    }
                }
            }
        }
        // Inverse for the C-channel output.
        let mut unpatchify = vec![0; blocks * n * n * c];
        for b in 0..blocks {
            for gy in 0..g {
                for gx in 0..g {
                    let tok = (b * g + gy) * g + gx;
                    for dy in 0..p {
                        for dx in 0..p {
                            let row = (b * n + gy * p + dy) * n + gx * p + dx;
                            for ch in 0..c {
                                unpatchify[row * c + ch] = tok * cfg.token_out() + (dy * p + dx) * c + ch;
                            }
                        }
                    }
                }
            }
        }
        let broadcast = (0..blocks).flat_map(|_| 0..n * n * c).collect();
        let w = cfg.width;
        let spatial_pos = (0..tokens).flat_map(|t| {
            let s = t % (g * g);
            (0..w).map(move |k| s * w + k)
        });
        let temporal_pos = (0..tokens).flat_map(|t| {
            let b = t / (g * g);
            (0..w).map(move |k| b * w + k)
        });
        Layout {
            blocks,
            tokens,
            patchify: Arc::new(patchify),
            unpatchify: Arc::new(unpatchify),
            broadcast: Arc::new(broadcast),
            spatial_pos: Arc::new(spatial_pos.collect()),
            temporal_pos: Arc::new(temporal_pos.collect()),
        }
    }

    fn check_input(&self, x_t: &[usize], cond: &ConditionBundle, taps: &BTreeSet<usize>) -> Result<usize> {
        let cfg = &self.config;
        cond.validate(cfg)?;
        let blocks = match *x_t {
            [b, h, w, c] if h == cfg.latent_size && w == cfg.latent_size && c == cfg.latent_channels && b >= 1 => b,
            _ => return Err(Error::Shape(format!("x_t {x_t:?} does not match the model config"))),
        };
        if blocks > cfg.max_blocks {
            return Err(Error::Shape(format!("{blocks} blocks exceeds max_blocks {}", cfg.max_blocks)));
        }
        if let Some(&bad) = taps.iter().find(|&&b| b >= cfg.depth) {
            return Err(Error::TapOutOfRange {
                index: bad,
                depth: cfg.depth,
            });
        }
        Ok(blocks)
    }

    /// Differentiable forward pass. Returns the velocity (`x_t`-shaped) and
    /// the hidden states of the tapped blocks.
    pub fn forward_graph<'g>(
        &self,
        b: &Bound<'g>,
        x_t: Var<'g>,
        cond: &ConditionBundle,
        taps: &BTreeSet<usize>,
    ) -> Result<(Var<'g>, BTreeMap<usize, Var<'g>>)> {
        let g: &'g Graph = x_t.graph();
        let blocks = self.check_input(&x_t.shape(), cond, taps)?;
        let cfg = &self.config;
        let (n, c, w) = (cfg.latent_size, cfg.latent_channels, cfg.width);
        let lay = self.layout(blocks);
        debug_assert_eq!(lay.blocks, blocks);

        let rows = blocks * n * n;
        let last = cond.last.clone().unwrap_or_else(|| Tensor::zeros(&[1, n, n, c]));
        let first = g.constant(&cond.first).gather(lay.broadcast.clone(), &[rows, c]);
        let last = g.constant(&last).gather(lay.broadcast.clone(), &[rows, c]);
        let input = Var::concat_cols(&[x_t.reshape(&[rows, c]), first, last]);
        let patches = input.gather(lay.patchify.clone(), &[lay.tokens, cfg.token_in()]);

        let pos = b
            .get("pos.spatial")
            .gather(lay.spatial_pos.clone(), &[lay.tokens, w])
            .add(b.get("pos.temporal").gather(lay.temporal_pos.clone(), &[lay.tokens, w]));
        let temb = g.constant(&timestep_features(cond.t / cond.t_max, cfg.timestep_features).reshape(&[1, cfg.timestep_features]));
        let temb = b.linear(b.linear(temb, "time.fc1").silu(), "time.fc2");
        let text = b.linear(g.constant(&cond.text.reshape(&[1, cfg.text_dim])), "text");
        let cvec = temb.add(text); // 1 × w
        let csilu = cvec.silu();
        let ones = g.constant(&Tensor::full(&[w], 1.0));

        let mut h = b.linear(patches, "embed").add(pos).add_row(cvec.reshape(&[w]));
        let mut hidden = BTreeMap::new();
        for blk in 0..cfg.depth {
            let ada = b.linear(csilu, &format!("blk{blk}.ada"));
            let piece = |k: usize| cols(ada, k * w, w);
            let (sh1, sc1, g1, sh2, sc2, g2) = (piece(0), piece(1), piece(2), piece(3), piece(4), piece(5));
            let x = h.layer_norm().mul_row(sc1.add(ones)).add_row(sh1);
            let q = b.linear(x, &format!("blk{blk}.q"));
            let k = b.linear(x, &format!("blk{blk}.k"));
            let v = b.linear(x, &format!("blk{blk}.v"));
            let att = b.linear(q.attention(k, v, cfg.heads), &format!("blk{blk}.o"));
            h = h.add(att.mul_row(g1));
            let x = h.layer_norm().mul_row(sc2.add(ones)).add_row(sh2);
            let m = b.linear(b.linear(x, &format!("blk{blk}.fc1")).gelu(), &format!("blk{blk}.fc2"));
            h = h.add(m.mul_row(g2));
            if taps.contains(&blk) {
                hidden.insert(blk, h);
            }
        }
        let fin = b.linear(csilu, "final.ada");
        let x = h.layer_norm().mul_row(cols(fin, w, w).add(ones)).add_row(cols(fin, 0, w));
        let out = b.linear(x, "final.out");
        let vel = out.gather(lay.unpatchify.clone(), &[rows * c]).reshape(&[blocks, n, n, c]);
        Ok((vel, hidden))
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x_t: &Tensor, cond: &ConditionBundle, taps: &BTreeSet<usize>) -> Result<(Tensor, HiddenStates)> {
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let (v, hs) = self.forward_graph(&b, g.constant(x_t), cond, taps)?;
        Ok((
            v.value(),
            HiddenStates {
                blocks: hs.into_iter().map(|(k, v)| (k, v.value())).collect(),
            },
        ))
    }

    /// Velocity only.
    pub fn velocity(&self, x_t: &Tensor, cond: &ConditionBundle) -> Result<Tensor> {
        Ok(self.forward(x_t, cond, &BTreeSet::new())?.0)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({"kind": "dit", "config": self.config}));
        self.params.write_into(&mut c, "");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta["kind"] != "dit" {
            return Err(Error::Format("not a DiT checkpoint".into()));
        }
        let config: DiTConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut m = Self::new(config)?;
        // Names with a '/' belong to other sections (e.g. raw weights for resume).
        let mut params = Params::new();
        for (k, v) in Params::read_from(c, "").iter() {
            if !k.contains('/') {
                params.insert(k.clone(), v.clone());
            }
        }
        params.check_layout(&m.params)?;
        m.params = params;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Random latent-shaped tensor, handy for tests and probes.
pub fn random_latent<R: Rng>(cfg: &DiTConfig, blocks: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[blocks, cfg.latent_size, cfg.latent_size, cfg.latent_channels], 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DiTConfig {
        DiTConfig {
            depth: 2,
            width: 16,
            heads: 2,
            text_dim: 8,
            ..Default::default()
        }
    }

    fn perturbed(cfg: DiTConfig) -> Dit {
        // Nonzero modulation so that every path is active.
        let mut m = Dit::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (k, v) in m.params.iter_mut() {
            if k.contains("ada") || k.starts_with("final") {
                *v = Tensor::randn(v.shape(), 0.2, &mut rng);
            }
        }
        m
    }

    #[test]
    fn text_embedding_basics() {
        assert_eq!(embed_text("", 16), Tensor::zeros(&[16]));
        assert_eq!(embed_text("make the car blue", 16), embed_text("make the car blue", 16));
        assert_ne!(embed_text("make the red circle blue", 16), embed_text("make the blue circle red", 16));
    }

    #[test]
    fn taps_and_shapes() {
        let m = perturbed(tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_latent(&m.config, 2, &mut rng);
        let first = random_latent(&m.config, 1, &mut rng);
        let cond = ConditionBundle::student(0.5, 1.0, embed_text("hi", 8), first);
        let (v, h) = m.forward(&x, &cond, &BTreeSet::new()).unwrap();
        assert_eq!(v.shape(), x.shape());
        assert!(h.blocks.is_empty());
        let (_, h) = m.forward(&x, &cond, &BTreeSet::from([1])).unwrap();
        assert_eq!(h.blocks.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(h.blocks[&1].shape(), &[32, 16]);
        assert!(matches!(
            m.forward(&x, &cond, &BTreeSet::from([2])),
            Err(Error::TapOutOfRange { index: 2, depth: 2 })
        ));
    }

    #[test]
    fn modes_are_checked_and_differ() {
        let m = perturbed(tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_latent(&m.config, 2, &mut rng);
        let first = random_latent(&m.config, 1, &mut rng);
        let last = random_latent(&m.config, 1, &mut rng);
        let text = embed_text("x", 8);
        let s = ConditionBundle::student(0.3, 1.0, text.clone(), first.clone());
        let t = ConditionBundle::teacher(0.3, 1.0, text, first, last);
        assert_ne!(m.velocity(&x, &s).unwrap(), m.velocity(&x, &t).unwrap());
        let mut broken = t.clone();
        broken.mode = Mode::Student;
        assert!(m.velocity(&x, &broken).is_err());
    }
}
