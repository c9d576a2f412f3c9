//! Ground-truth evolution clips: the edit played out as a short video.

use super::render::{apply_tone, finish, render, render_raw};
use super::scene::{glyph_origin, Tone};
use super::triplet::{EditSpec, EditTriplet};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionClip {
    pub frames: Vec<Image>,
    /// Interpolation parameter per frame; `alphas[f] = f / (F − 1)`.
    pub alphas: Vec<f64>,
}

impl EvolutionClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Crossfade that only touches mask pixels, so everything else is copied
/// bit-for-bit from `a`.
fn masked_lerp(a: &Image, b: &Image, alpha: f64, mask: &Mask) -> Image {
    let mut out = a.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m {
            for c in 0..3 {
                let k = i * 3 + c;
                out.data[k] = (1.0 - alpha) * a.data[k] + alpha * b.data[k];
            }
        }
    }
    out
}

fn frame(t: &EditTriplet, alpha: f64) -> Image {
    let src = &t.source_scene;
    let dst = &t.edited_scene;
    match &t.spec {
        EditSpec::Add { index } => {
            let mut op = vec![1.0; dst.objects.len()];
            op[*index] = alpha;
            finish(&render_raw(dst, &op), dst, &dst.tone)
        }
        EditSpec::Remove { index } => {
            let mut op = vec![1.0; src.objects.len()];
            op[*index] = 1.0 - alpha;
            finish(&render_raw(src, &op), src, &src.tone)
        }
        EditSpec::Replace { .. } | EditSpec::Background | EditSpec::Material { .. } => {
            masked_lerp(&t.source, &t.edited, alpha, &t.mask)
        }
        EditSpec::Color { index } => {
            let mut s = src.clone();
            let (a, b) = (src.objects[*index].color, dst.objects[*index].color);
            for c in 0..3 {
                s.objects[*index].color[c] = (1.0 - alpha) * a[c] + alpha * b[c];
            }
            render(&s)
        }
        EditSpec::Motion { index } => {
            let mut s = src.clone();
            let (a, b) = (src.objects[*index].pose, dst.objects[*index].pose);
            s.objects[*index].pose = (1.0 - alpha) * a + alpha * b;
            render(&s)
        }
        EditSpec::Portrait { index } => {
            let mut s = src.clone();
            let (o, e) = (&src.objects[*index], &dst.objects[*index]);
            let lerp = |x: f64, y: f64| (1.0 - alpha) * x + alpha * y;
            s.objects[*index].texture_amp = lerp(o.texture_amp, e.texture_amp);
            s.objects[*index].eyes = Some(lerp(o.eyes.unwrap_or(0.0), e.eyes.unwrap_or(0.0)));
            render(&s)
        }
        EditSpec::Text { index } => {
            // Letters change one after another, each with its own crossfade.
            let o = &src.objects[*index];
            let unit = src.unit();
            let n = o.text.len() as f64;
            let (x0, _) = glyph_origin(o, unit);
            let mut out = t.source.clone();
            let res = src.resolution;
            for y in 0..res {
                for x in 0..res {
                    if !t.mask.get(x, y) {
                        continue;
                    }
                    let k = (((x as f64 - x0) / (6.0 * unit)).floor()).clamp(0.0, n - 1.0);
                    let a = (alpha * n - k).clamp(0.0, 1.0);
                    let p = t.source.pixel(x, y);
                    let q = t.edited.pixel(x, y);
                    out.set_pixel(x, y, [0, 1, 2].map(|c| (1.0 - a) * p[c] + a * q[c]));
                }
            }
            out
        }
        EditSpec::Style { .. } => t.source.lerp(&t.edited, alpha),
        EditSpec::Tone { grade } => apply_tone(&t.source, &Tone::IDENTITY.lerp(grade, alpha)),
    }
}

/// Renders `frames` evenly spaced states of the edit. `frames` must be a
/// positive multiple of 4.
pub fn make_evolution_clip(triplet: &EditTriplet, frames: usize) -> Result<EvolutionClip> {
    if frames < 4 || !frames.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "clip length must be a positive multiple of 4, got {frames}"
        )));
    }
    let last = (frames - 1) as f64;
    let alphas: Vec<f64> = (0..frames).map(|f| f as f64 / last).collect();
    let frames = alphas
        .iter()
        .enumerate()
        .map(|(f, &a)| {
            if f == 0 {
                triplet.source.clone()
            } else if f == frames - 1 {
                triplet.edited.clone()
            } else {
                frame(triplet, a)
            }
        })
        .collect();
    Ok(EvolutionClip { frames, alphas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{make_triplet, EditTask};

    #[test]
    fn clips_are_anchored_and_local() {
        for task in EditTask::ALL {
            for seed in 0..6 {
                let t = make_triplet(seed, task, 32).unwrap();
                let clip = make_evolution_clip(&t, 8).unwrap();
                assert_eq!(clip.frames[0], t.source);
                assert_eq!(clip.frames[7], t.edited);
                assert!(clip.alphas.windows(2).all(|w| w[0] < w[1]));
                // Interior frames computed analytically must also hit the endpoints.
                assert_eq!(frame(&t, 0.0), t.source, "{task} seed {seed}: alpha 0");
                assert_eq!(frame(&t, 1.0), t.edited, "{task} seed {seed}: alpha 1");
                if task.is_global() {
                    continue;
                }
                for f in &clip.frames {
                    for i in 0..t.mask.data.len() {
                        if !t.mask.data[i] {
                            assert_eq!(f.data[i * 3..i * 3 + 3], t.source.data[i * 3..i * 3 + 3], "{task}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_lengths() {
        let t = make_triplet(0, EditTask::SubjectRemoval, 32).unwrap();
        for f in [0, 3, 6, 10] {
            assert!(make_evolution_clip(&t, f).is_err());
        }
        assert_eq!(make_evolution_clip(&t, 12).unwrap().len(), 12);
    }
}
