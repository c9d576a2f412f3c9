//! On-disk dataset layout:
//!
//! ```text
//! out/
//!   manifest.json          [ManifestRecord, ...]
//!   <id>/src.png
//!   <id>/edit.png
//!   <id>/mask.png          white = edit locus
//!   <id>/f000.png ...      optional evolution clip
//! ```
//!
//! Paths inside the manifest are relative to the manifest's directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::clip::make_evolution_clip;
use super::triplet::EditTriplet;
use super::EditTask;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub task: EditTask,
    pub instruction: String,
    pub seed: u64,
    pub resolution: usize,
    pub source: String,
    pub edited: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<String>,
}

/// Writes every triplet (and, if `clip_frames` is set, its evolution clip)
/// under `out` and returns the manifest that was written.
pub fn export_dataset<'a>(
    out: &Path,
    triplets: impl IntoIterator<Item = &'a EditTriplet>,
    clip_frames: Option<usize>,
) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(out)?;
    let mut records = Vec::new();
    for t in triplets {
        let id = t.id();
        let dir = out.join(&id);
        fs::create_dir_all(&dir)?;
        t.source.save_png(&dir.join("src.png"))?;
        t.edited.save_png(&dir.join("edit.png"))?;
        t.mask.save_png(&dir.join("mask.png"))?;
        let mut frames = Vec::new();
        if let Some(f) = clip_frames {
            let clip = make_evolution_clip(t, f)?;
            for (k, img) in clip.frames.iter().enumerate() {
                let name = format!("f{k:03}.png");
                img.save_png(&dir.join(&name))?;
                frames.push(format!("{id}/{name}"));
            }
        }
        records.push(ManifestRecord {
            id: id.clone(),
            task: t.task,
            instruction: t.instruction.clone(),
            seed: t.seed,
            resolution: t.resolution(),
            source: format!("{id}/src.png"),
            edited: format!("{id}/edit.png"),
            mask: format!("{id}/mask.png"),
            frames,
        });
    }
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&records)?)?;
    Ok(records)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?)
}
