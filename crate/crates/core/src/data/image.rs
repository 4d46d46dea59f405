use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};

/// Normalized RGB image, `height × width × 3` interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    source_path: String,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, source_path: impl Into<String>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension { height, width });
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::shape("RgbImage pixels", height * width * 3, pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
            return Err(Error::range("pixel value", format!("{v} not in [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            source_path: source_path.into(),
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(y, x).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(height, width, pixels, "")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Apply a per-value map, clamping back into `[0, 1]`.
    pub(crate) fn map_values(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.pixels {
            *v = f(*v).clamp(0.0, 1.0);
        }
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
        Self::new(h as usize, w as usize, pixels, path.to_string_lossy())
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let raw = self.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer sized from dims")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.to_rgb8()
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })?;
        crate::util::atomic_write(path, &bytes)
    }

    /// Bilinear resampling to `height × width`.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension { height, width });
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.pixels.clone()).expect("buffer sized from dims");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        let mut img = Self {
            height,
            width,
            pixels: out.into_raw(),
            source_path: self.source_path.clone(),
        };
        img.map_values(|v| v);
        Ok(img)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::range(
                "crop window",
                format!("{height}x{width} at ({top},{left}) exceeds {}x{}", self.height, self.width),
            ));
        }
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let row = (y * self.width + left) * 3;
            pixels.extend_from_slice(&self.pixels[row..row + width * 3]);
        }
        Self::new(height, width, pixels, self.source_path.clone())
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                pixels.extend_from_slice(&self.pixel(y, x));
            }
        }
        Self {
            pixels,
            ..self.clone()
        }
    }

    /// Planar `3 × H × W` copy.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_area_and_out_of_range() {
        assert!(matches!(RgbImage::new(0, 4, vec![], ""), Err(Error::Dimension { .. })));
        assert!(RgbImage::new(1, 1, vec![0.5, 1.5, 0.0], "").is_err());
        assert!(RgbImage::new(1, 1, vec![0.5, f32::NAN, 0.0], "").is_err());
    }

    #[test]
    fn crop_and_flip() {
        let img = RgbImage::from_fn(3, 4, |y, x| [y as f32 / 4.0, x as f32 / 4.0, 0.0]).unwrap();
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(1, 2));
        let f = img.flip_horizontal();
        assert_eq!(f.pixel(2, 0), img.pixel(2, 3));
        assert_eq!(f.flip_horizontal(), img);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = RgbImage::from_fn(5, 7, |_, _| [0.25, 0.5, 0.75]).unwrap();
        let r = img.resize(11, 13).unwrap();
        assert!(r.pixels().chunks(3).all(|p| (p[0] - 0.25).abs() < 1e-6 && (p[2] - 0.75).abs() < 1e-6));
    }

    #[test]
    fn png_roundtrip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(4, 3, |y, x| [(y * 3 + x) as f32 / 255.0, 1.0, 0.0]).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = RgbImage::load_png(&p).unwrap();
        assert_eq!(back.pixels(), img.pixels());
    }
}
