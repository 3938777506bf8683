//! Grayscale image plane shared by the renderer, the similarity gate, the
//! corner detector, and the pose-regression input path.
//!
//! Intensities are `f64` in `[0, 1]`, row major. Color enters the crate only
//! through [`preprocess`], which converts an RGB image with BT.601 luma
//! weights and then area-averages down to the model input size.

use image::RgbImage;

use crate::error::{Error, Result};

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Mean squared difference against another plane of equal dimensions.
    pub fn mean_sq_diff(&self, other: &ImagePlane) -> f64 {
        assert_eq!(self.width, other.width);
        assert_eq!(self.height, other.height);
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    /// Exact area-average resampling: every output pixel is the mean of the
    /// source region it covers, with fractional source pixels weighted by
    /// overlap. Preserves the value range and the global mean.
    pub fn resize_area(&self, width: usize, height: usize) -> ImagePlane {
        assert!(width > 0 && height > 0, "target dimensions must be nonzero");
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = ImagePlane::new(width, height);
        for oy in 0..height {
            let y0 = oy as f64 * sy;
            let y1 = (oy + 1) as f64 * sy;
            for ox in 0..width {
                let x0 = ox as f64 * sx;
                let x1 = (ox + 1) as f64 * sx;
                let mut acc = 0.0;
                let mut area = 0.0;
                let iy0 = y0.floor() as usize;
                let iy1 = (y1.ceil() as usize).min(self.height);
                let ix0 = x0.floor() as usize;
                let ix1 = (x1.ceil() as usize).min(self.width);
                for sy_i in iy0..iy1 {
                    let wy = overlap(sy_i as f64, sy_i as f64 + 1.0, y0, y1);
                    if wy <= 0.0 {
                        continue;
                    }
                    for sx_i in ix0..ix1 {
                        let wx = overlap(sx_i as f64, sx_i as f64 + 1.0, x0, x1);
                        if wx <= 0.0 {
                            continue;
                        }
                        acc += self.get(sx_i, sy_i) * wx * wy;
                        area += wx * wy;
                    }
                }
                out.set(ox, oy, acc / area);
            }
        }
        out
    }

    /// Quantized 8-bit view for PNG export in examples and tooling.
    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            image::Luma([(v * 255.0).round() as u8])
        })
    }
}

#[inline]
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Grayscale conversion (BT.601 luma, `[0, 1]`) followed by area-average
/// downsampling to the pose-regression input size.
pub fn preprocess(raw: &RgbImage, target_width: usize, target_height: usize) -> ImagePlane {
    let (w, h) = (raw.width() as usize, raw.height() as usize);
    let mut gray = ImagePlane::new(w, h);
    for (x, y, p) in raw.enumerate_pixels() {
        let [r, g, b] = p.0;
        let luma = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
        gray.set(x as usize, y as usize, luma / 255.0);
    }
    gray.resize_area(target_width, target_height)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_all_white_is_one() {
        let raw = RgbImage::from_pixel(8, 6, image::Rgb([255, 255, 255]));
        let out = preprocess(&raw, 4, 3);
        assert_eq!(out.width(), 4);
        assert_eq!(out.height(), 3);
        for &v in out.as_slice() {
            assert!((v - 1.0).abs() < 1e-12, "pixel {v}");
        }
    }

    #[test]
    fn preprocess_checkerboard_two_by_two_to_half() {
        let mut raw = RgbImage::new(2, 2);
        raw.put_pixel(0, 0, image::Rgb([255, 255, 255]));
        raw.put_pixel(1, 1, image::Rgb([255, 255, 255]));
        raw.put_pixel(1, 0, image::Rgb([0, 0, 0]));
        raw.put_pixel(0, 1, image::Rgb([0, 0, 0]));
        let out = preprocess(&raw, 1, 1);
        assert_eq!(out.get(0, 0), 0.5);
    }

    #[test]
    fn preprocess_output_in_unit_range() {
        let raw = RgbImage::from_fn(13, 7, |x, y| {
            image::Rgb([(x * 19 % 256) as u8, (y * 37 % 256) as u8, 128])
        });
        let out = preprocess(&raw, 5, 3);
        for &v in out.as_slice() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn resize_area_preserves_mean_on_divisible_grid() {
        let mut img = ImagePlane::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, ((x * 8 + y) % 7) as f64 / 6.0);
            }
        }
        let small = img.resize_area(4, 4);
        let mean_src: f64 = img.as_slice().iter().sum::<f64>() / 64.0;
        let mean_dst: f64 = small.as_slice().iter().sum::<f64>() / 16.0;
        assert!((mean_src - mean_dst).abs() < 1e-12);
    }

    #[test]
    fn resize_area_fractional_grid() {
        // 3x1 image to 2x1: left pixel = (a + b/2) / 1.5, right = (b/2 + c) / 1.5.
        let img = ImagePlane::from_vec(3, 1, vec![0.0, 0.6, 1.0]).unwrap();
        let out = img.resize_area(2, 1);
        assert!((out.get(0, 0) - 0.3 / 1.5).abs() < 1e-12);
        assert!((out.get(1, 0) - 1.3 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(ImagePlane::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
