//! Rasterization. Object boundaries use 2×2 supersampling; everything else
//! is evaluated once per pixel so that untouched pixels are bit-identical
//! between renders.

use super::scene::{
    figure_half_width, glyph_origin, BackgroundKind, Scene, SceneObject, ShapeKind, StyleKind, Texture,
    Tone,
};
use crate::image::Image;

const SUBSAMPLES: [(f64, f64); 4] = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];

/// 5×7 bitmaps, one string per row.
fn glyph_rows(c: char) -> [&'static str; 7] {
    match c {
        'A' => [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'E' => ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
        'I' => [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
        'L' => ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
        'N' => ["#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"],
        'O' => [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
        'P' => ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
        'S' => [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
        'T' => ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
        'X' => ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
        _ => ["....."; 7],
    }
}

#[cfg(test)]
fn glyph_supported(c: char) -> bool {
    "AEILNOPSTX".contains(c)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Texture pattern in `[-1, 1]` at integer pixel `(x, y)`.
fn pattern(obj: &SceneObject, x: usize, y: usize, unit: f64) -> f64 {
    match obj.texture {
        Texture::Flat => 0.0,
        Texture::Striped => {
            let ux = (x as f64 / unit).floor() as i64;
            let uy = (y as f64 / unit).floor() as i64;
            if ((ux + uy) / 2) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        Texture::Noisy => {
            let h = splitmix(obj.noise_seed ^ ((x as u64) << 32) ^ (y as u64).wrapping_mul(0x9E37));
            (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }
    }
}

fn eye_cells(obj: &SceneObject, unit: f64) -> [(f64, f64); 2] {
    let [cx, cy] = obj.center;
    let ey = ((cy - 0.12 * obj.size) / unit).floor() * unit;
    let l = ((cx - 0.22 * obj.size) / unit).floor() * unit;
    let r = ((cx + 0.22 * obj.size) / unit).floor() * unit;
    [(l, ey), (r, ey)]
}

/// Fill color of `obj` at pixel `(x, y)`, ignoring coverage.
pub(crate) fn object_color(obj: &SceneObject, x: usize, y: usize, unit: f64) -> [f64; 3] {
    if let Some(e) = obj.eyes {
        for (ex, ey) in eye_cells(obj, unit) {
            let (fx, fy) = (x as f64, y as f64);
            if fx >= ex && fx < ex + unit && fy >= ey && fy < ey + unit {
                return [e; 3];
            }
        }
    }
    let p = obj.texture_amp * pattern(obj, x, y, unit);
    [obj.color[0] + p, obj.color[1] + p, obj.color[2] + p]
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (p.0 - (a.0 + t * vx), p.1 - (a.1 + t * vy));
    (dx * dx + dy * dy).sqrt()
}

/// Elbow position and forearm length of a stick figure.
pub(crate) fn forearm(obj: &SceneObject) -> ((f64, f64), f64) {
    let [cx, cy] = obj.center;
    let s = obj.size;
    ((cx + 0.18 * s, cy - 0.14 * s), 0.22 * s)
}

fn forearm_tip(obj: &SceneObject, angle: f64) -> (f64, f64) {
    let (e, len) = forearm(obj);
    (e.0 + len * angle.cos(), e.1 - len * angle.sin())
}

fn figure_static_inside(obj: &SceneObject, p: (f64, f64), hw: f64) -> bool {
    let [cx, cy] = obj.center;
    let s = obj.size;
    let head = (cx, cy - 0.36 * s);
    let (dx, dy) = (p.0 - head.0, p.1 - head.1);
    if (dx * dx + dy * dy).sqrt() <= 0.13 * s {
        return true;
    }
    let neck = (cx, cy - 0.23 * s);
    let hip = (cx, cy + 0.12 * s);
    let shoulder = (cx, cy - 0.14 * s);
    let (elbow, _) = forearm(obj);
    let segments = [
        (neck, hip),
        (hip, (cx - 0.16 * s, cy + 0.5 * s - hw)),
        (hip, (cx + 0.16 * s, cy + 0.5 * s - hw)),
        (shoulder, (cx - 0.3 * s + hw, cy + 0.04 * s)),
        (shoulder, elbow),
    ];
    segments.iter().any(|&(a, b)| seg_dist(p, a, b) <= hw)
}

fn inside(obj: &SceneObject, p: (f64, f64), unit: f64) -> bool {
    let [cx, cy] = obj.center;
    let h = obj.size / 2.0;
    match obj.kind {
        ShapeKind::Circle => {
            let (dx, dy) = (p.0 - cx, p.1 - cy);
            dx * dx + dy * dy <= h * h
        }
        ShapeKind::Square => (p.0 - cx).abs() <= h && (p.1 - cy).abs() <= h,
        ShapeKind::Triangle => {
            // Apex up; base on y = cy + h.
            let dy = p.1 - (cy - h);
            if !(0.0..=2.0 * h).contains(&dy) {
                return false;
            }
            (p.0 - cx).abs() <= dy / 2.0
        }
        ShapeKind::StickFigure => {
            let hw = figure_half_width(unit);
            let (elbow, _) = forearm(obj);
            figure_static_inside(obj, p, hw) || seg_dist(p, elbow, forearm_tip(obj, obj.pose)) <= hw
        }
        ShapeKind::GlyphGrid => glyph_on(obj, p, unit),
    }
}

fn glyph_on(obj: &SceneObject, p: (f64, f64), unit: f64) -> bool {
    let (x0, y0) = glyph_origin(obj, unit);
    let cx = ((p.0 - x0) / unit).floor();
    let cy = ((p.1 - y0) / unit).floor();
    if cx < 0.0 || !(0.0..7.0).contains(&cy) {
        return false;
    }
    let (cx, cy) = (cx as usize, cy as usize);
    let (ch, col) = (cx / 6, cx % 6);
    if col == 5 {
        return false;
    }
    match obj.text.chars().nth(ch) {
        Some(c) => glyph_rows(c)[cy].as_bytes()[col] == b'#',
        None => false,
    }
}

/// Pixel-range `[x0, x1) × [y0, y1)` worth scanning for `obj`.
fn scan_range(obj: &SceneObject, unit: f64, res: usize) -> (usize, usize, usize, usize) {
    let b = obj.bbox(unit);
    let clampi = |v: f64| (v.max(0.0) as usize).min(res);
    (clampi(b[0].floor()), clampi(b[1].floor()), clampi(b[2].ceil() + 1.0), clampi(b[3].ceil() + 1.0))
}

/// Fraction of subsamples covered by `obj`, per pixel.
pub fn object_coverage(obj: &SceneObject, unit: f64, res: usize) -> Vec<f64> {
    let mut cov = vec![0.0; res * res];
    let (x0, y0, x1, y1) = scan_range(obj, unit, res);
    for y in y0..y1 {
        for x in x0..x1 {
            let hits = SUBSAMPLES
                .iter()
                .filter(|(ox, oy)| inside(obj, (x as f64 + ox, y as f64 + oy), unit))
                .count();
            cov[y * res + x] = hits as f64 / 4.0;
        }
    }
    cov
}

/// Pixels the forearm can touch while sweeping between two angles.
pub fn forearm_sweep(obj: &SceneObject, from: f64, to: f64, unit: f64, res: usize) -> Vec<bool> {
    let (lo, hi) = if from <= to { (from, to) } else { (to, from) };
    let (elbow, len) = forearm(obj);
    let hw = figure_half_width(unit);
    let mut out = vec![false; res * res];
    let (x0, y0, x1, y1) = scan_range(obj, unit, res);
    for y in y0..y1 {
        for x in x0..x1 {
            out[y * res + x] = SUBSAMPLES.iter().any(|(ox, oy)| {
                let p = (x as f64 + ox, y as f64 + oy);
                let (dx, dy) = (p.0 - elbow.0, -(p.1 - elbow.1));
                let r = (dx * dx + dy * dy).sqrt();
                let ang = dy.atan2(dx);
                let d = if ang >= lo && ang <= hi {
                    (r - len).max(0.0)
                } else {
                    seg_dist(p, elbow, forearm_tip(obj, lo)).min(seg_dist(p, elbow, forearm_tip(obj, hi)))
                };
                d <= hw
            });
        }
    }
    out
}

pub(crate) fn background_color(scene: &Scene, x: usize, y: usize) -> [f64; 3] {
    let bg = &scene.background;
    let [a, b] = bg.palette;
    match bg.kind {
        BackgroundKind::Solid => a,
        BackgroundKind::Gradient => {
            let t = x as f64 / (scene.resolution - 1) as f64;
            [
                (1.0 - t) * a[0] + t * b[0],
                (1.0 - t) * a[1] + t * b[1],
                (1.0 - t) * a[2] + t * b[2],
            ]
        }
        BackgroundKind::Checker => {
            let cell = 8.0 * scene.unit();
            let cx = (x as f64 / cell).floor() as i64;
            let cy = (y as f64 / cell).floor() as i64;
            if (cx + cy) % 2 == 0 {
                a
            } else {
                b
            }
        }
    }
}

/// Composites objects over the background before tone and style, with a
/// per-object opacity.
pub fn render_raw(scene: &Scene, opacity: &[f64]) -> Image {
    assert_eq!(opacity.len(), scene.objects.len());
    let res = scene.resolution;
    let unit = scene.unit();
    let mut img = Image::new(res, res);
    for y in 0..res {
        for x in 0..res {
            img.set_pixel(x, y, background_color(scene, x, y));
        }
    }
    for (obj, &alpha) in scene.objects.iter().zip(opacity) {
        if alpha == 0.0 {
            continue;
        }
        let cov = object_coverage(obj, unit, res);
        for y in 0..res {
            for x in 0..res {
                let c = cov[y * res + x];
                if c == 0.0 {
                    continue;
                }
                let a = alpha * c;
                let fill = object_color(obj, x, y, unit);
                let under = img.pixel(x, y);
                let mut out = [0.0; 3];
                for k in 0..3 {
                    out[k] = under[k] * (1.0 - a) + fill[k] * a;
                }
                img.set_pixel(x, y, out);
            }
        }
    }
    img
}

pub fn apply_tone(img: &Image, tone: &Tone) -> Image {
    let mut out = img.clone();
    for px in out.data.chunks_mut(3) {
        for c in 0..3 {
            px[c] = (tone.gain[c] * px[c] + tone.shift[c]).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn apply_style(img: &Image, style: StyleKind, unit: f64) -> Image {
    let (w, h) = (img.width, img.height);
    let mut out = img.clone();
    match style {
        StyleKind::Watercolor => {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = [0.0; 3];
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let nx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                            let ny = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                            let p = img.pixel(nx, ny);
                            for c in 0..3 {
                                acc[c] += p[c];
                            }
                        }
                    }
                    out.set_pixel(x, y, acc.map(|v| v / 9.0));
                }
            }
        }
        StyleKind::Mosaic => {
            let b = (2.0 * unit) as usize;
            for by in (0..h).step_by(b) {
                for bx in (0..w).step_by(b) {
                    let mut acc = [0.0; 3];
                    let mut n = 0.0;
                    for y in by..(by + b).min(h) {
                        for x in bx..(bx + b).min(w) {
                            let p = img.pixel(x, y);
                            for c in 0..3 {
                                acc[c] += p[c];
                            }
                            n += 1.0;
                        }
                    }
                    let avg = acc.map(|v| v / n);
                    for y in by..(by + b).min(h) {
                        for x in bx..(bx + b).min(w) {
                            out.set_pixel(x, y, avg);
                        }
                    }
                }
            }
        }
        StyleKind::Poster => {
            for v in out.data.iter_mut() {
                *v = (*v * 3.0).round() / 3.0;
            }
        }
    }
    out
}

pub fn finish(raw: &Image, scene: &Scene, tone: &Tone) -> Image {
    let toned = apply_tone(raw, tone);
    match scene.style {
        Some(s) => apply_style(&toned, s, scene.unit()),
        None => toned,
    }
}

pub fn render(scene: &Scene) -> Image {
    let raw = render_raw(scene, &vec![1.0; scene.objects.len()]);
    let out = finish(&raw, scene, &scene.tone);
    match &scene.grade {
        Some(g) => apply_tone(&out, g),
        None => out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::scene::sample_scene;

    #[test]
    fn font_covers_every_word() {
        for w in crate::synthworld::scene::GLYPH_WORDS {
            assert!(w.chars().all(glyph_supported), "{w}");
        }
    }

    #[test]
    fn render_stays_in_range_and_objects_show() {
        for seed in 0..40 {
            let s = sample_scene(seed).unwrap();
            let img = render(&s);
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
            for o in &s.objects {
                let cov = object_coverage(o, s.unit(), s.resolution);
                assert!(cov.contains(&1.0), "object {:?} invisible", o.kind);
            }
        }
    }

    #[test]
    fn sweep_contains_every_intermediate_pose() {
        let mut s = sample_scene(3).unwrap();
        let mut fig = None;
        for seed in 0..500 {
            s = sample_scene(seed).unwrap();
            fig = s.objects.iter().position(|o| o.kind == ShapeKind::StickFigure);
            if fig.is_some() {
                break;
            }
        }
        let mut obj = s.objects[fig.expect("some scene has a figure")].clone();
        let sweep = forearm_sweep(&obj, -1.0, 1.0, 1.0, 32);
        let base = {
            obj.pose = -1.0;
            object_coverage(&obj, 1.0, 32)
        };
        for k in 0..=50 {
            obj.pose = -1.0 + 2.0 * k as f64 / 50.0;
            let cov = object_coverage(&obj, 1.0, 32);
            for i in 0..cov.len() {
                if cov[i] != base[i] {
                    assert!(sweep[i], "pose {} touches pixel {i} outside sweep", obj.pose);
                }
            }
        }
    }
}
