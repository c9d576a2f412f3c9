//! Edit triplets: a source scene, one edit from the per-task grammar, the
//! edited scene, both renders and the exact edit mask.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{forearm_sweep, object_coverage, render};
use super::scene::{
    check_resolution, jittered, random_background, random_object, sample_scene_with, Background, Requirement,
    Scene, SceneObject, ShapeKind, StyleKind, Texture, Tone, EYES_BRIGHT, GLYPH_WORDS, MAX_ATTEMPTS,
    MAX_OBJECTS, OBJECT_COLORS, POSE_UP,
};
use super::EditTask;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Named color grades for tone edits: `(name, gain, shift)`.
pub(crate) const GRADES: [(&str, [f64; 3], [f64; 3]); 4] = [
    ("warm cinematic", [1.10, 0.98, 0.80], [0.05, 0.01, -0.02]),
    ("cool moonlight", [0.82, 0.92, 1.12], [-0.02, 0.01, 0.06]),
    ("dark dusk", [0.62, 0.58, 0.70], [0.0, 0.0, 0.02]),
    ("bright noon", [1.08, 1.08, 1.02], [0.10, 0.10, 0.08]),
];

const QUADRANTS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];

/// What changed between the two scenes. Object indices refer to the scene
/// that contains the object (the edited scene for additions, the source
/// scene otherwise; the two agree for in-place edits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditSpec {
    Add { index: usize },
    Remove { index: usize },
    Replace { index: usize },
    Background,
    Color { index: usize },
    Material { index: usize },
    Text { index: usize },
    Motion { index: usize },
    Portrait { index: usize },
    Style { style: StyleKind },
    Tone { grade: Tone },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTriplet {
    pub seed: u64,
    pub task: EditTask,
    pub instruction: String,
    #[serde(skip, default = "empty_image")]
    pub source: Image,
    #[serde(skip, default = "empty_image")]
    pub edited: Image,
    #[serde(skip, default = "empty_mask")]
    pub mask: Mask,
    pub source_scene: Scene,
    pub edited_scene: Scene,
    pub spec: EditSpec,
}

fn empty_image() -> Image {
    Image::new(0, 0)
}

fn empty_mask() -> Mask {
    Mask::empty(0, 0)
}

impl EditTriplet {
    /// Stable identifier, e.g. `subject_removal-000007`.
    pub fn id(&self) -> String {
        format!("{}-{:06}", self.task.slug(), self.seed)
    }

    pub fn resolution(&self) -> usize {
        self.source.width
    }
}

fn support_to_mask(support: impl Iterator<Item = bool>, res: usize) -> Mask {
    Mask {
        width: res,
        height: res,
        data: support.collect(),
    }
    .dilate()
}

fn coverage_mask(objs: &[&SceneObject], unit: f64, res: usize) -> Mask {
    let mut support = vec![false; res * res];
    for o in objs {
        for (s, c) in support.iter_mut().zip(object_coverage(o, unit, res)) {
            *s |= c > 0.0;
        }
    }
    support_to_mask(support.into_iter(), res)
}

/// Index of a random object matching `pred` whose description is unique in the scene.
fn pick_target<R: Rng>(rng: &mut R, scene: &Scene, pred: impl Fn(&SceneObject) -> bool) -> Option<usize> {
    let candidates: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| {
            let o = &scene.objects[i];
            pred(o) && scene.objects.iter().filter(|p| p.describe() == o.describe()).count() == 1
        })
        .collect();
    candidates.choose(rng).copied()
}

fn quadrant_center<R: Rng>(rng: &mut R, q: usize, res: f64) -> [f64; 2] {
    let half = res / 2.0;
    let (ox, oy) = ((q % 2) as f64 * half, (q / 2) as f64 * half);
    [
        ((ox + rng.random_range(0.0..half)) * 2.0).round() / 2.0,
        ((oy + rng.random_range(0.0..half)) * 2.0).round() / 2.0,
    ]
}

struct Draft {
    instruction: String,
    edited: Scene,
    spec: EditSpec,
}

fn requirement(task: EditTask) -> Requirement {
    match task {
        EditTask::SubjectReplacement | EditTask::MaterialModification => Requirement::Simple,
        EditTask::TextModification => Requirement::Glyphs,
        EditTask::MotionChange => Requirement::Figure,
        EditTask::PortraitBeautification => Requirement::Face,
        _ => Requirement::None,
    }
}

fn draft<R: Rng>(rng: &mut R, task: EditTask, src: &Scene) -> Option<Draft> {
    let unit = src.unit();
    let res = src.resolution as f64;
    let mut edited = src.clone();
    let (instruction, spec) = match task {
        EditTask::SubjectAddition => {
            if src.objects.len() >= MAX_OBJECTS {
                return None;
            }
            let kind = *ShapeKind::SIMPLE.choose(rng).unwrap();
            let mut obj = random_object(rng, kind, unit, res);
            let q = rng.random_range(0..4);
            let placed = (0..50).find_map(|_| {
                obj.center = quadrant_center(rng, q, res);
                src.fits(&obj).then(|| obj.clone())
            })?;
            if src.objects.iter().any(|o| o.describe() == placed.describe()) {
                return None;
            }
            let text = format!("add a {} at the {}", placed.describe(), QUADRANTS[q]);
            edited.objects.push(placed);
            (text, EditSpec::Add { index: edited.objects.len() - 1 })
        }
        EditTask::SubjectRemoval => {
            let i = pick_target(rng, src, |o| !o.is_face())?;
            if src.objects.len() < 2 && rng.random_bool(0.5) {
                // Occasionally allow emptying the scene; mostly keep something.
                return None;
            }
            let text = format!("remove the {}", src.objects[i].describe());
            edited.objects.remove(i);
            (text, EditSpec::Remove { index: i })
        }
        EditTask::SubjectReplacement => {
            let i = pick_target(rng, src, |o| o.kind.is_simple() && !o.is_face())?;
            let old = src.objects[i].kind;
            let new = *ShapeKind::SIMPLE.iter().filter(|&&k| k != old).collect::<Vec<_>>().choose(rng).unwrap();
            let text = format!("replace the {} with a {}", src.objects[i].describe(), new.noun());
            edited.objects[i].kind = *new;
            (text, EditSpec::Replace { index: i })
        }
        EditTask::BackgroundChange => {
            let bg: Background = (0..20).map(|_| random_background(rng)).find(|b| b.describe() != src.background.describe())?;
            let text = format!("change the background to {}", bg.describe());
            edited.background = bg;
            (text, EditSpec::Background)
        }
        EditTask::ColorAlteration => {
            let i = pick_target(rng, src, |o| !o.is_face())?;
            let o = &src.objects[i];
            let (name, base) = *OBJECT_COLORS.iter().filter(|(n, _)| *n != o.color_name).collect::<Vec<_>>().choose(rng).unwrap();
            let text = format!("make the {} {}", o.describe(), name);
            let e = &mut edited.objects[i];
            e.color = jittered(rng, *base);
            e.color_name = name.to_string();
            if edited.objects.iter().filter(|p| p.describe() == edited.objects[i].describe()).count() > 1 {
                return None;
            }
            (text, EditSpec::Color { index: i })
        }
        EditTask::MaterialModification => {
            let i = pick_target(rng, src, |o| o.kind.is_simple() && !o.is_face())?;
            let o = &src.objects[i];
            let tex = *Texture::ALL.iter().filter(|&&t| t != o.texture).collect::<Vec<_>>().choose(rng).unwrap();
            let text = format!("turn the {} into {}", o.describe(), tex.material_word());
            let e = &mut edited.objects[i];
            e.texture = *tex;
            e.texture_amp = tex.default_amplitude();
            (text, EditSpec::Material { index: i })
        }
        EditTask::TextModification => {
            let i = src.objects.iter().position(|o| o.kind == ShapeKind::GlyphGrid)?;
            let old = src.objects[i].text.clone();
            let word = *GLYPH_WORDS.iter().filter(|w| **w != old).collect::<Vec<_>>().choose(rng).unwrap();
            edited.objects[i].text = word.to_string();
            (format!("change text to '{word}'"), EditSpec::Text { index: i })
        }
        EditTask::MotionChange => {
            let i = src.objects.iter().position(|o| o.kind == ShapeKind::StickFigure)?;
            let from = src.objects[i].pose;
            let to = -from;
            edited.objects[i].pose = to;
            let verb = if to == POSE_UP { "raise" } else { "lower" };
            (format!("{verb} the figure's right hand"), EditSpec::Motion { index: i })
        }
        EditTask::PortraitBeautification => {
            let i = src.objects.iter().position(|o| o.is_face())?;
            let e = &mut edited.objects[i];
            e.texture_amp = 0.0;
            e.eyes = Some(EYES_BRIGHT);
            ("smooth skin and brighten eyes".to_string(), EditSpec::Portrait { index: i })
        }
        EditTask::StyleTransfer => {
            let style = *StyleKind::ALL.choose(rng).unwrap();
            edited.style = Some(style);
            (format!("convert to {} style", style.word()), EditSpec::Style { style })
        }
        EditTask::ToneTransformation => {
            let (name, gain, shift) = *GRADES.choose(rng).unwrap();
            let grade = Tone { gain, shift };
            edited.grade = Some(grade);
            (format!("apply {name} grade"), EditSpec::Tone { grade })
        }
    };
    Some(Draft {
        instruction,
        edited,
        spec,
    })
}

fn edit_mask(task: EditTask, src: &Scene, edited: &Scene, spec: &EditSpec) -> Mask {
    let res = src.resolution;
    let unit = src.unit();
    match *spec {
        EditSpec::Add { index } => coverage_mask(&[&edited.objects[index]], unit, res),
        EditSpec::Remove { index } => coverage_mask(&[&src.objects[index]], unit, res),
        EditSpec::Replace { index } => coverage_mask(&[&src.objects[index], &edited.objects[index]], unit, res),
        EditSpec::Color { index } | EditSpec::Material { index } | EditSpec::Portrait { index } => {
            coverage_mask(&[&src.objects[index]], unit, res)
        }
        EditSpec::Background => {
            let mut full = vec![0.0f64; res * res];
            for o in &src.objects {
                for (f, c) in full.iter_mut().zip(object_coverage(o, unit, res)) {
                    *f = f.max(c);
                }
            }
            // Partially covered pixels already belong to the support, and
            // dilating here would eat the interiors of small objects.
            Mask {
                width: res,
                height: res,
                data: full.into_iter().map(|c| c < 1.0).collect(),
            }
        }
        EditSpec::Text { index } => {
            let a = object_coverage(&src.objects[index], unit, res);
            let b = object_coverage(&edited.objects[index], unit, res);
            support_to_mask(a.iter().zip(&b).map(|(x, y)| x != y), res)
        }
        EditSpec::Motion { index } => {
            let o = &src.objects[index];
            let sweep = forearm_sweep(o, o.pose, edited.objects[index].pose, unit, res);
            support_to_mask(sweep.into_iter(), res)
        }
        EditSpec::Style { .. } | EditSpec::Tone { .. } => {
            debug_assert!(task.is_global());
            Mask::full(res, res)
        }
    }
}

/// Builds the triplet for `(seed, task, resolution)`. Pure in its arguments.
pub fn make_triplet(seed: u64, task: EditTask, resolution: usize) -> Result<EditTriplet> {
    check_resolution(resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task.index() as u64 + 1);
    for _ in 0..MAX_ATTEMPTS {
        let src = sample_scene_with(&mut rng, resolution, requirement(task))?;
        let Some(d) = draft(&mut rng, task, &src) else {
            continue;
        };
        if d.edited.objects.len() > MAX_OBJECTS || (!d.edited.objects.is_empty() && d.edited.validate().is_err()) {
            continue;
        }
        let source = render(&src);
        let edited = render(&d.edited);
        if source == edited {
            continue;
        }
        let mask = edit_mask(task, &src, &d.edited, &d.spec);
        return Ok(EditTriplet {
            seed,
            task,
            instruction: d.instruction,
            source,
            edited,
            mask,
            source_scene: src,
            edited_scene: d.edited,
            spec: d.spec,
        });
    }
    Err(Error::Generation(format!(
        "no valid {} edit for seed {seed} after {MAX_ATTEMPTS} attempts",
        task.name()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_edits_stay_inside_the_mask() {
        for task in EditTask::ALL {
            for seed in 0..25 {
                let t = make_triplet(seed, task, 32).unwrap();
                let diff = Mask::diff(&t.source, &t.edited);
                if task.is_global() {
                    assert!(t.mask.is_full());
                    continue;
                }
                assert!(!t.mask.is_full(), "{task} seed {seed}");
                for i in 0..diff.data.len() {
                    assert!(!diff.data[i] || t.mask.data[i], "{task} seed {seed}: change outside mask");
                }
            }
        }
    }

    #[test]
    fn generation_is_pure() {
        for task in EditTask::ALL {
            assert_eq!(make_triplet(11, task, 32).unwrap(), make_triplet(11, task, 32).unwrap());
        }
    }

    #[test]
    fn works_at_64() {
        for task in EditTask::ALL {
            let t = make_triplet(3, task, 64).unwrap();
            assert_eq!(t.source.width, 64);
        }
    }
}
