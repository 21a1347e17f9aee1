use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-major RGB image with channel values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// Interleaved `r,g,b` per pixel.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; (width * height * 3) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage { width, height, data }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .into_rgb8();
        let (width, height) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Ok(RgbImage { width, height, data })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width, self.height, raw).expect("buffer matches dimensions")
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    /// `[1,3,H,W]` planar tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut t = Tensor::zeros([1, 3, h, w]);
        for c in 0..3 {
            let plane = t.channel_mut(0, c);
            for (i, v) in plane.iter_mut().enumerate() {
                *v = T::of_f64(self.data[i * 3 + c] as f64);
            }
        }
        t
    }

    /// From batch item `n` of a 3-channel tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Self {
        assert_eq!(t.channels(), 3);
        let (h, w) = (t.height(), t.width());
        let mut data = vec![0.0; h * w * 3];
        for c in 0..3 {
            for (i, v) in t.channel(n, c).iter().enumerate() {
                data[i * 3 + c] = v.as_f64() as f32;
            }
        }
        RgbImage {
            width: w as u32,
            height: h as u32,
            data,
        }
    }

    /// Window `[x0, x0+w) × [y0, y0+h)`; pixels beyond the border are mirrored
    /// (reflect padding without edge repetition).
    pub fn crop_reflect(&self, x0: i64, y0: i64, w: u32, h: u32) -> RgbImage {
        let reflect = |v: i64, n: i64| -> i64 {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = v.rem_euclid(period);
            if m < n {
                m
            } else {
                period - m
            }
        };
        RgbImage::from_fn(w, h, |x, y| {
            let sx = reflect(x0 + x as i64, self.width as i64) as u32;
            let sy = reflect(y0 + y as i64, self.height as i64) as u32;
            self.pixel(sx, sy)
        })
    }

    pub fn downscale(&self, factor: u32) -> RgbImage {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f32;
        RgbImage::from_fn(w, h, |x, y| {
            let mut acc = [0.0f32; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = self.pixel(x * factor + dx, y * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            acc.map(|v| v * norm)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_crop_mirrors_without_repeating_edge() {
        let img = RgbImage::from_fn(3, 1, |x, _| [x as f32, 0.0, 0.0]);
        let c = img.crop_reflect(-2, 0, 7, 1);
        let xs: Vec<f32> = (0..7).map(|x| c.pixel(x, 0)[0]).collect();
        assert_eq!(xs, vec![2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let d = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 4, |x, y| [x as f32 / 4.0, y as f32 / 3.0, 0.5]);
        let p = d.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = RgbImage::load(&p).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn tensor_round_trip() {
        let img = RgbImage::from_fn(4, 3, |x, y| [x as f32, y as f32, (x * y) as f32]);
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), [1, 3, 3, 4]);
        assert_eq!(RgbImage::from_tensor(&t, 0), img);
    }
}
