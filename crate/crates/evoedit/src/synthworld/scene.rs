//! Scene description and seeded scene sampling.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generation attempts before giving up on a seed.
pub const MAX_ATTEMPTS: usize = 1000;

pub const MAX_OBJECTS: usize = 4;

/// Named object colors. Every channel stays inside `[0.12, 0.82]` so that
/// texture modulation and the mild source tone never clip.
pub const OBJECT_COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.80, 0.16, 0.14]),
    ("green", [0.18, 0.70, 0.22]),
    ("blue", [0.16, 0.28, 0.80]),
    ("yellow", [0.80, 0.76, 0.16]),
    ("purple", [0.56, 0.20, 0.74]),
    ("orange", [0.82, 0.50, 0.14]),
    ("cyan", [0.16, 0.72, 0.78]),
    ("pink", [0.82, 0.46, 0.64]),
];

pub const BACKGROUND_COLORS: [(&str, [f64; 3]); 6] = [
    ("beige", [0.76, 0.70, 0.58]),
    ("slate", [0.30, 0.34, 0.40]),
    ("olive", [0.45, 0.48, 0.25]),
    ("navy", [0.14, 0.16, 0.36]),
    ("teal", [0.16, 0.42, 0.42]),
    ("gray", [0.50, 0.50, 0.50]),
];

pub const GLYPH_WORDS: [&str; 8] = ["OPEN", "STOP", "SALE", "EXIT", "LOST", "NOTE", "TAPE", "SNAP"];

/// Forearm angles (radians, counter-clockwise from +x) for the two poses.
pub const POSE_DOWN: f64 = -1.0;
pub const POSE_UP: f64 = 1.0;

pub const EYES_DARK: f64 = 0.12;
pub const EYES_BRIGHT: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    StickFigure,
    GlyphGrid,
}

impl ShapeKind {
    /// Noun used in instructions.
    pub fn noun(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::StickFigure => "figure",
            ShapeKind::GlyphGrid => "sign",
        }
    }

    pub fn is_simple(self) -> bool {
        matches!(self, ShapeKind::Circle | ShapeKind::Square | ShapeKind::Triangle)
    }

    pub const SIMPLE: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    Striped,
    Noisy,
}

impl Texture {
    pub fn default_amplitude(self) -> f64 {
        match self {
            Texture::Flat => 0.0,
            Texture::Striped => 0.10,
            Texture::Noisy => 0.06,
        }
    }

    /// Material word used in instructions.
    pub fn material_word(self) -> &'static str {
        match self {
            Texture::Flat => "matte",
            Texture::Striped => "stripes",
            Texture::Noisy => "grain",
        }
    }

    pub const ALL: [Texture; 3] = [Texture::Flat, Texture::Striped, Texture::Noisy];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    /// Pixel coordinates.
    pub center: [f64; 2],
    /// Pixel extent: diameter, side, figure height or text width.
    pub size: f64,
    pub color: [f64; 3],
    pub color_name: String,
    pub texture: Texture,
    pub texture_amp: f64,
    pub noise_seed: u64,
    /// Forearm angle of a stick figure.
    pub pose: f64,
    /// Word shown by a glyph grid.
    pub text: String,
    /// Eye brightness; `Some` turns a circle into a face.
    pub eyes: Option<f64>,
}

impl SceneObject {
    pub fn is_face(&self) -> bool {
        self.kind == ShapeKind::Circle && self.eyes.is_some()
    }

    /// Short noun phrase, e.g. "red circle".
    pub fn describe(&self) -> String {
        format!("{} {}", self.color_name, self.kind.noun())
    }

    /// Axis-aligned box `[x0, y0, x1, y1]` that contains every pixel the
    /// object can touch in any pose.
    pub fn bbox(&self, unit: f64) -> [f64; 4] {
        let [cx, cy] = self.center;
        let s = self.size;
        match self.kind {
            ShapeKind::Circle | ShapeKind::Square | ShapeKind::Triangle => {
                let h = s / 2.0 + 0.5;
                [cx - h, cy - h, cx + h, cy + h]
            }
            ShapeKind::StickFigure => {
                let hw = figure_half_width(unit) + 0.5;
                [cx - 0.3 * s - hw, cy - 0.5 * s - hw, cx + 0.42 * s + hw, cy + 0.5 * s + hw]
            }
            ShapeKind::GlyphGrid => {
                let (x0, y0) = glyph_origin(self, unit);
                let w = glyph_width(self.text.len(), unit);
                [x0, y0, x0 + w, y0 + 7.0 * unit]
            }
        }
    }
}

pub(crate) fn figure_half_width(unit: f64) -> f64 {
    0.7 * unit
}

pub(crate) fn glyph_width(chars: usize, unit: f64) -> f64 {
    (chars as f64 * 6.0 - 1.0) * unit
}

/// Integer-aligned top-left corner of a glyph grid.
pub(crate) fn glyph_origin(obj: &SceneObject, unit: f64) -> (f64, f64) {
    let w = glyph_width(obj.text.len(), unit);
    let x0 = ((obj.center[0] - w / 2.0) / unit).round() * unit;
    let y0 = ((obj.center[1] - 3.5 * unit) / unit).round() * unit;
    (x0, y0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Solid,
    Gradient,
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub kind: BackgroundKind,
    pub palette: [[f64; 3]; 2],
    pub names: [String; 2],
}

impl Background {
    /// Phrase used in instructions, e.g. "a navy checkerboard".
    pub fn describe(&self) -> String {
        match self.kind {
            BackgroundKind::Solid => format!("a plain {} backdrop", self.names[0]),
            BackgroundKind::Gradient => format!("a {} gradient", self.names[0]),
            BackgroundKind::Checker => format!("a {} checkerboard", self.names[0]),
        }
    }
}

/// Per-channel affine grade `clamp(gain·c + shift)` applied after compositing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub gain: [f64; 3],
    pub shift: [f64; 3],
}

impl Tone {
    pub const IDENTITY: Tone = Tone {
        gain: [1.0; 3],
        shift: [0.0; 3],
    };

    pub fn lerp(&self, other: &Tone, a: f64) -> Tone {
        let mut out = *self;
        for c in 0..3 {
            out.gain[c] = (1.0 - a) * self.gain[c] + a * other.gain[c];
            out.shift[c] = (1.0 - a) * self.shift[c] + a * other.shift[c];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleKind {
    /// 3×3 box blur.
    Watercolor,
    /// Block averaging over 2×2 units.
    Mosaic,
    /// Four-level posterization.
    Poster,
}

impl StyleKind {
    pub fn word(self) -> &'static str {
        match self {
            StyleKind::Watercolor => "watercolor",
            StyleKind::Mosaic => "mosaic",
            StyleKind::Poster => "poster",
        }
    }

    pub const ALL: [StyleKind; 3] = [StyleKind::Watercolor, StyleKind::Mosaic, StyleKind::Poster];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub resolution: usize,
    pub objects: Vec<SceneObject>,
    pub background: Background,
    pub tone: Tone,
    pub style: Option<StyleKind>,
    /// Color grade applied to the finished render (tone edits only).
    #[serde(default)]
    pub grade: Option<Tone>,
}

impl Scene {
    /// Pixels per unit of the 32-pixel reference grid.
    pub fn unit(&self) -> f64 {
        self.resolution as f64 / 32.0
    }

    /// Checks the object-count, containment and non-overlap invariants.
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::Generation(format!(
                "scene has {} objects, expected 1..={MAX_OBJECTS}",
                self.objects.len()
            )));
        }
        let unit = self.unit();
        let boxes: Vec<[f64; 4]> = self.objects.iter().map(|o| o.bbox(unit)).collect();
        for (i, b) in boxes.iter().enumerate() {
            if !inside_canvas(b, self.resolution as f64) {
                return Err(Error::Generation(format!("object {i} leaves the canvas")));
            }
            for (j, c) in boxes.iter().enumerate().skip(i + 1) {
                if boxes_overlap(b, c, unit) {
                    return Err(Error::Generation(format!("objects {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }

    /// Whether `candidate` fits into the scene without breaking invariants.
    pub fn fits(&self, candidate: &SceneObject) -> bool {
        let unit = self.unit();
        let b = candidate.bbox(unit);
        inside_canvas(&b, self.resolution as f64)
            && self.objects.iter().all(|o| !boxes_overlap(&o.bbox(unit), &b, unit))
    }
}

fn inside_canvas(b: &[f64; 4], size: f64) -> bool {
    b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= size && b[3] <= size
}

/// Overlap test with a one-unit gap so dilated masks stay apart.
fn boxes_overlap(a: &[f64; 4], b: &[f64; 4], unit: f64) -> bool {
    let gap = unit;
    !(a[2] + gap <= b[0] || b[2] + gap <= a[0] || a[3] + gap <= b[1] || b[3] + gap <= a[1])
}

/// Object categories a scene may be required to contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Requirement {
    None,
    Simple,
    Figure,
    Glyphs,
    Face,
}

pub(crate) fn jittered<R: Rng>(rng: &mut R, base: [f64; 3]) -> [f64; 3] {
    let mut c = base;
    for v in &mut c {
        *v = (*v + rng.random_range(-0.03..=0.03)).clamp(0.12, 0.82);
    }
    c
}

pub(crate) fn random_object<R: Rng>(rng: &mut R, kind: ShapeKind, unit: f64, res: f64) -> SceneObject {
    let (name, base) = *OBJECT_COLORS.choose(rng).unwrap();
    let texture = match kind {
        ShapeKind::StickFigure | ShapeKind::GlyphGrid => Texture::Flat,
        _ => *Texture::ALL.choose(rng).unwrap(),
    };
    let size = match kind {
        ShapeKind::Circle | ShapeKind::Square | ShapeKind::Triangle => {
            (rng.random_range(6..=9) as f64) * unit
        }
        ShapeKind::StickFigure => 14.0 * unit,
        ShapeKind::GlyphGrid => glyph_width(4, unit),
    };
    let center = [
        (rng.random_range(0.0..res) * 2.0).round() / 2.0,
        (rng.random_range(0.0..res) * 2.0).round() / 2.0,
    ];
    SceneObject {
        kind,
        center,
        size,
        color: jittered(rng, base),
        color_name: name.to_string(),
        texture,
        texture_amp: texture.default_amplitude(),
        noise_seed: rng.random(),
        pose: if rng.random_bool(0.5) { POSE_DOWN } else { POSE_UP },
        text: if kind == ShapeKind::GlyphGrid {
            GLYPH_WORDS.choose(rng).unwrap().to_string()
        } else {
            String::new()
        },
        eyes: None,
    }
}

pub(crate) fn random_face<R: Rng>(rng: &mut R, unit: f64, res: f64) -> SceneObject {
    let mut o = random_object(rng, ShapeKind::Circle, unit, res);
    o.size = (rng.random_range(9..=11) as f64) * unit;
    o.texture = Texture::Noisy;
    o.texture_amp = Texture::Noisy.default_amplitude();
    o.eyes = Some(EYES_DARK);
    o
}

pub(crate) fn random_background<R: Rng>(rng: &mut R) -> Background {
    let kind = *[BackgroundKind::Solid, BackgroundKind::Gradient, BackgroundKind::Checker]
        .choose(rng)
        .unwrap();
    let picks: Vec<&(&str, [f64; 3])> = BACKGROUND_COLORS.choose_multiple(rng, 2).collect();
    Background {
        kind,
        palette: [picks[0].1, picks[1].1],
        names: [picks[0].0.to_string(), picks[1].0.to_string()],
    }
}

fn random_tone<R: Rng>(rng: &mut R) -> Tone {
    let mut t = Tone::IDENTITY;
    for c in 0..3 {
        t.gain[c] = rng.random_range(0.92..=1.08);
        t.shift[c] = rng.random_range(-0.03..=0.03);
    }
    t
}

/// Places `obj` at random positions until it fits; `None` after the budget.
pub(crate) fn place<R: Rng>(rng: &mut R, scene: &Scene, mut obj: SceneObject, tries: usize) -> Option<SceneObject> {
    let res = scene.resolution as f64;
    for _ in 0..tries {
        obj.center = [
            (rng.random_range(0.0..res) * 2.0).round() / 2.0,
            (rng.random_range(0.0..res) * 2.0).round() / 2.0,
        ];
        if scene.fits(&obj) {
            return Some(obj);
        }
    }
    None
}

fn try_scene<R: Rng>(rng: &mut R, resolution: usize, req: Requirement) -> Option<Scene> {
    let unit = resolution as f64 / 32.0;
    let res = resolution as f64;
    let mut scene = Scene {
        resolution,
        objects: Vec::new(),
        background: random_background(rng),
        tone: random_tone(rng),
        style: None,
        grade: None,
    };
    let first = match req {
        Requirement::None | Requirement::Simple => {
            let kind = *ShapeKind::SIMPLE.choose(rng).unwrap();
            random_object(rng, kind, unit, res)
        }
        Requirement::Figure => random_object(rng, ShapeKind::StickFigure, unit, res),
        Requirement::Glyphs => random_object(rng, ShapeKind::GlyphGrid, unit, res),
        Requirement::Face => random_face(rng, unit, res),
    };
    let first = place(rng, &scene, first, 50)?;
    scene.objects.push(first);

    let target = rng.random_range(1..=MAX_OBJECTS);
    let mut guard = 0;
    while scene.objects.len() < target && guard < 20 {
        guard += 1;
        let roll: f64 = rng.random();
        let has = |k: ShapeKind| scene.objects.iter().any(|o| o.kind == k);
        let obj = if roll < 0.1 && !has(ShapeKind::StickFigure) {
            random_object(rng, ShapeKind::StickFigure, unit, res)
        } else if roll < 0.2 && !has(ShapeKind::GlyphGrid) {
            random_object(rng, ShapeKind::GlyphGrid, unit, res)
        } else {
            let kind = *ShapeKind::SIMPLE.choose(rng).unwrap();
            random_object(rng, kind, unit, res)
        };
        if let Some(o) = place(rng, &scene, obj, 20) {
            scene.objects.push(o);
        }
    }
    scene.validate().ok()?;
    Some(scene)
}

pub(crate) fn sample_scene_with<R: Rng>(rng: &mut R, resolution: usize, req: Requirement) -> Result<Scene> {
    for _ in 0..MAX_ATTEMPTS {
        if let Some(s) = try_scene(rng, resolution, req) {
            return Ok(s);
        }
    }
    Err(Error::Generation(format!(
        "no valid scene after {MAX_ATTEMPTS} attempts"
    )))
}

/// Deterministic scene for `seed` on the 32-pixel canvas.
pub fn sample_scene(seed: u64) -> Result<Scene> {
    sample_scene_at(seed, 32)
}

pub fn sample_scene_at(seed: u64, resolution: usize) -> Result<Scene> {
    check_resolution(resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_scene_with(&mut rng, resolution, Requirement::None)
}

pub(crate) fn check_resolution(resolution: usize) -> Result<()> {
    if resolution != 32 && resolution != 64 {
        return Err(Error::InvalidArgument(format!(
            "resolution must be 32 or 64, got {resolution}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        assert_eq!(sample_scene(0).unwrap(), sample_scene(0).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        assert_ne!(sample_scene(0).unwrap(), sample_scene(1).unwrap());
    }

    #[test]
    fn scenes_satisfy_invariants() {
        for seed in 0..300 {
            let s = sample_scene(seed).unwrap();
            s.validate().unwrap();
            for o in &s.objects {
                let b = o.bbox(s.unit());
                assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 32.0 && b[3] <= 32.0);
            }
        }
        for seed in 0..20 {
            sample_scene_at(seed, 64).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_resolution() {
        assert!(sample_scene_at(0, 48).is_err());
    }
}
