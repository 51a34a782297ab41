//! Planar RGB images with values in [0, 1].

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    /// Channel-major: `data[c * h * w + y * w + x]`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; 3 * h * w] }
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Image { h, w, data: vec![v; 3 * h * w] }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                3 * h * w
            )));
        }
        Ok(Image { h, w, data })
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.h * self.w + y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = c * self.h * self.w + y * self.w + x;
        self.data[i] = v;
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != 3 * self.h * self.w {
            return Err(Error::Shape("image buffer length".into()));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("image contains non-finite pixels".into()));
        }
        Ok(())
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Round-trips through 8-bit quantisation.
    pub fn quantize8(&self) -> Image {
        Image {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::zeros(h, w);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c] as f64 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.w as u32, self.h as u32, |x, y| {
            let px = |c| (self.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let img = image::open(path)?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// Bilinear resampling with pixel-centre alignment and edge clamping.
    pub fn resize(&self, h: usize, w: usize) -> Image {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Image::zeros(h, w);
        let sy = self.h as f64 / h as f64;
        let sx = self.w as f64 / w as f64;
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let tx = fx - x0 as f64;
                for c in 0..3 {
                    let v = (1.0 - ty) * ((1.0 - tx) * self.at(c, y0, x0) + tx * self.at(c, y0, x1))
                        + ty * ((1.0 - tx) * self.at(c, y1, x0) + tx * self.at(c, y1, x1));
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_roundtrip_is_exact_on_quantized() {
        let mut img = Image::zeros(3, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        let back = Image::from_rgb8(&img.to_rgb8());
        assert_eq!(back, img);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::filled(5, 7, 0.25);
        assert_eq!(img.resize(5, 7), img);
        let r = img.resize(9, 3);
        assert!(r.data.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
}
