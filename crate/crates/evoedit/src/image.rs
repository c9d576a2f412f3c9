//! RGB images in `[0, 1]`, binary masks, PSNR and PNG I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `height × width × 3` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `(1 − a)·self + a·other`, with exact endpoints.
    pub fn lerp(&self, other: &Image, a: f64) -> Image {
        assert!(self.same_size(other));
        if a == 0.0 {
            return self.clone();
        }
        if a == 1.0 {
            return other.clone();
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (1.0 - a) * x + a * y)
            .collect();
        Image { data, ..*self }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 3], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, 3] => Self::from_data(*w, *h, t.data().to_vec()),
            s => Err(Error::Shape(format!("expected HxWx3 tensor, got {s:?}"))),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        write_png(path, self.width, self.height, png::ColorType::Rgb, &bytes)
    }

    /// Loads an 8-bit RGB or RGBA PNG.
    pub fn load_png(path: &Path) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::InvalidArgument("only 8-bit PNGs are supported".into()));
        }
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            other => {
                return Err(Error::InvalidArgument(format!("unsupported PNG color type {other:?}")))
            }
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for px in buf[..w * h * channels].chunks(channels) {
            for c in 0..3 {
                let v = px[if channels == 1 { 0 } else { c }];
                data.push(v as f64 / 255.0);
            }
        }
        Self::from_data(w, h, data)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(bytes)?;
    Ok(())
}

/// Binary `height × width` mask; `true` marks the edit locus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
            ..*self
        }
    }

    pub fn invert(&self) -> Mask {
        Mask {
            data: self.data.iter().map(|b| !b).collect(),
            ..*self
        }
    }

    /// 3×3 square dilation (one pixel in every direction, diagonals included).
    pub fn dilate(&self) -> Mask {
        let mut out = Mask::empty(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                            out.set(nx as usize, ny as usize, true);
                        }
                    }
                }
            }
        }
        out
    }

    /// Pixels where two images differ in any channel.
    pub fn diff(a: &Image, b: &Image) -> Mask {
        assert!(a.same_size(b));
        let data = a
            .data
            .chunks(3)
            .zip(b.data.chunks(3))
            .map(|(p, q)| p != q)
            .collect();
        Mask {
            width: a.width,
            height: a.height,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_png(path, self.width, self.height, png::ColorType::Grayscale, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = Image::load_png(path)?;
        let data = img.data.chunks(3).map(|p| p[0] > 0.5).collect();
        Ok(Mask {
            width: img.width,
            height: img.height,
            data,
        })
    }
}

/// Peak signal-to-noise ratio (peak 1.0) over pixels selected by `region`
/// (all pixels when `None`). Identical inputs give `+∞`; an empty region
/// gives `None`.
pub fn psnr(a: &Image, b: &Image, region: Option<&Mask>) -> Option<f64> {
    assert!(a.same_size(b), "psnr on images of different size");
    let mut sse = 0.0;
    let mut n = 0usize;
    for (i, (p, q)) in a.data.chunks(3).zip(b.data.chunks(3)).enumerate() {
        if let Some(m) = region {
            if !m.data[i] {
                continue;
            }
        }
        sse += p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        n += 3;
    }
    if n == 0 {
        return None;
    }
    let mse = sse / n as f64;
    Some(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_known_error() {
        let a = Image::from_data(1, 1, vec![0.5, 0.5, 0.5]).unwrap();
        let b = Image::from_data(1, 1, vec![0.6, 0.6, 0.6]).unwrap();
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, None), Some(f64::INFINITY));
        assert_eq!(psnr(&a, &b, Some(&Mask::empty(1, 1))), None);
    }

    #[test]
    fn dilation_grows_by_one() {
        let mut m = Mask::empty(5, 5);
        m.set(2, 2, true);
        let d = m.dilate();
        assert_eq!(d.count(), 9);
        assert!(d.get(1, 1) && d.get(3, 3) && !d.get(0, 0));
    }

    #[test]
    fn png_roundtrip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::from_data(2, 1, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let mut m = Mask::empty(2, 1);
        m.set(1, 0, true);
        let mp = dir.path().join("m.png");
        m.save_png(&mp).unwrap();
        assert_eq!(Mask::load_png(&mp).unwrap(), m);
    }
}
