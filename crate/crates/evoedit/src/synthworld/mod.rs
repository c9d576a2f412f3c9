//! Procedural editing world: scenes, edit triplets with exact masks,
//! ground-truth evolution clips and a task-balanced sampler.

mod clip;
mod export;
mod render;
mod sampler;
mod scene;
mod triplet;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use clip::{make_evolution_clip, EvolutionClip};
pub use export::{export_dataset, load_manifest, ManifestRecord};
pub use render::{apply_style, apply_tone, object_coverage, render, render_raw};
pub use sampler::{balanced_sampler, BalancedSampler, EVAL_SEEDS, TRAIN_SEEDS};
pub use scene::{
    sample_scene, sample_scene_at, Background, BackgroundKind, Scene, SceneObject, ShapeKind, StyleKind,
    Texture, Tone, GLYPH_WORDS, MAX_ATTEMPTS, MAX_OBJECTS,
};
pub use triplet::{make_triplet, EditSpec, EditTriplet};

/// The eleven editing categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditTask {
    SubjectAddition,
    SubjectRemoval,
    SubjectReplacement,
    BackgroundChange,
    ColorAlteration,
    MaterialModification,
    TextModification,
    MotionChange,
    PortraitBeautification,
    StyleTransfer,
    ToneTransformation,
}

impl EditTask {
    pub const ALL: [EditTask; 11] = [
        EditTask::SubjectAddition,
        EditTask::SubjectRemoval,
        EditTask::SubjectReplacement,
        EditTask::BackgroundChange,
        EditTask::ColorAlteration,
        EditTask::MaterialModification,
        EditTask::TextModification,
        EditTask::MotionChange,
        EditTask::PortraitBeautification,
        EditTask::StyleTransfer,
        EditTask::ToneTransformation,
    ];

    /// Display name of the category.
    pub fn name(self) -> &'static str {
        match self {
            EditTask::SubjectAddition => "Subject Addition",
            EditTask::SubjectRemoval => "Subject Removal",
            EditTask::SubjectReplacement => "Subject Replacement",
            EditTask::BackgroundChange => "Background Change",
            EditTask::ColorAlteration => "Color Alteration",
            EditTask::MaterialModification => "Material Modification",
            EditTask::TextModification => "Text Modification",
            EditTask::MotionChange => "Motion Change",
            EditTask::PortraitBeautification => "Portrait Editing & Beautification",
            EditTask::StyleTransfer => "Style Transfer",
            EditTask::ToneTransformation => "Tone Transformation",
        }
    }

    /// Short machine-friendly identifier, e.g. `subject_removal`.
    pub fn slug(self) -> &'static str {
        match self {
            EditTask::SubjectAddition => "subject_addition",
            EditTask::SubjectRemoval => "subject_removal",
            EditTask::SubjectReplacement => "subject_replacement",
            EditTask::BackgroundChange => "background_change",
            EditTask::ColorAlteration => "color_alteration",
            EditTask::MaterialModification => "material_modification",
            EditTask::TextModification => "text_modification",
            EditTask::MotionChange => "motion_change",
            EditTask::PortraitBeautification => "portrait_beautification",
            EditTask::StyleTransfer => "style_transfer",
            EditTask::ToneTransformation => "tone_transformation",
        }
    }

    pub fn index(self) -> usize {
        EditTask::ALL.iter().position(|&t| t == self).unwrap()
    }

    /// Global tasks edit every pixel and use an all-ones mask.
    pub fn is_global(self) -> bool {
        matches!(self, EditTask::StyleTransfer | EditTask::ToneTransformation)
    }
}

impl fmt::Display for EditTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditTask {
    type Err = Error;

    /// Accepts either the display name or the slug, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        EditTask::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s) || t.slug().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownCategory(s.to_string()))
    }
}

/// Published per-task shares in percent, in [`EditTask::ALL`] order. They
/// sum to 101.1, so [`TaskDistribution::published_shares`] renormalizes.
pub const PUBLISHED_SHARES: [f64; 11] = [7.6, 9.8, 9.3, 11.1, 7.9, 12.2, 7.2, 9.7, 10.5, 7.5, 8.3];

/// Normalized sampling weights over the eleven tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    shares: [f64; 11],
}

impl TaskDistribution {
    /// Normalizes `raw` by its sum. Negative, non-finite or all-zero input is rejected.
    pub fn from_shares(raw: [f64; 11]) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("task shares must be finite and nonnegative".into()));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("task shares sum to zero".into()));
        }
        Ok(Self {
            shares: raw.map(|v| v / total),
        })
    }

    pub fn published_shares() -> Self {
        Self::from_shares(PUBLISHED_SHARES).expect("published shares are valid")
    }

    pub fn uniform() -> Self {
        Self::from_shares([1.0; 11]).unwrap()
    }

    /// Only the listed tasks, uniformly.
    pub fn only(tasks: &[EditTask]) -> Result<Self> {
        let mut raw = [0.0; 11];
        for t in tasks {
            raw[t.index()] = 1.0;
        }
        Self::from_shares(raw)
    }

    pub fn share(&self, task: EditTask) -> f64 {
        self.shares[task.index()]
    }

    pub fn shares(&self) -> &[f64; 11] {
        &self.shares
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for t in EditTask::ALL {
            assert_eq!(t.name().parse::<EditTask>().unwrap(), t);
            assert_eq!(t.slug().parse::<EditTask>().unwrap(), t);
        }
        assert!("Teleportation".parse::<EditTask>().is_err());
    }

    #[test]
    fn shares_are_normalized() {
        let d = TaskDistribution::published_shares();
        assert!((d.shares().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d.share(EditTask::MaterialModification) - 12.2 / 101.1).abs() < 1e-12);
        assert!(TaskDistribution::from_shares([0.0; 11]).is_err());
        let mut neg = [1.0; 11];
        neg[3] = -0.1;
        assert!(TaskDistribution::from_shares(neg).is_err());
    }
}
