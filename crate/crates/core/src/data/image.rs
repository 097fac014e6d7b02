use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar `C × H × W` image with values nominally in `[0, 1]`.
///
/// Continuous coordinates follow the area convention: pixel `(i, j)` covers
/// `[i, i+1) × [j, j+1)` and its center sits at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * width * height {
            return Err(Error::Input(format!(
                "image {channels}x{width}x{height} needs {} values, got {}",
                channels * width * height,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn filled(channels: usize, width: usize, height: usize, value: f32) -> Self {
        Self {
            channels,
            width,
            height,
            data: vec![value; channels * width * height],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at continuous `(u, v)`. Points outside the image
    /// rectangle return `fill`; inside, neighbours are clamped to the border.
    pub fn sample(&self, c: usize, u: f64, v: f64, fill: f32) -> f32 {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(0.0..=w).contains(&u) || !(0.0..=h).contains(&v) {
            return fill;
        }
        let sx = (u - 0.5).clamp(0.0, w - 1.0);
        let sy = (v - 0.5).clamp(0.0, h - 1.0);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
        if fx == 0.0 && fy == 0.0 {
            return self.get(c, x0, y0);
        }
        let top = self.get(c, x0, y0) * (1.0 - fx) + self.get(c, x1, y0) * fx;
        let bot = self.get(c, x0, y1) * (1.0 - fx) + self.get(c, x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear resize; the source rectangle maps onto the destination rectangle.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::filled(self.channels, width, height, 0.0);
        for c in 0..self.channels {
            for y in 0..height {
                let v = (y as f64 + 0.5) * sy;
                for x in 0..width {
                    let u = (x as f64 + 0.5) * sx;
                    out.set(c, x, y, self.sample(c, u, v, 0.0));
                }
            }
        }
        out
    }

    /// `[C, H, W]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone()).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Image::new(c, w, h, t.data().to_vec()),
            _ => Err(Error::Input(format!("expected [C, H, W] tensor, got {:?}", t.shape()))),
        }
    }

    /// Decodes a PNG. 8-bit samples map by `v / 255`, 16-bit by `v / 65535`.
    /// Gray images give one channel, colour images three; alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let n = w * h;
        let out = match img {
            DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            DynamicImage::ImageLumaA8(_) => {
                img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
            }
            DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
            DynamicImage::ImageLumaA16(_) => {
                img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
            }
            DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
                interleaved_to_planar(&img.to_rgb16().into_raw(), n, |v| v as f32 / 65535.0)
            }
            other => interleaved_to_planar(&other.to_rgb8().into_raw(), n, |v| v as f32 / 255.0),
        };
        let channels = out.len() / n.max(1);
        Image::new(channels, w, h, out)
    }

    /// Encodes as 8-bit PNG, rounding `clamp(v, 0, 1) * 255`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, self.data.iter().map(|&v| q(v)).collect::<Vec<u8>>())
                .expect("sized buffer")
                .save(path),
            3 => {
                let n = self.width * self.height;
                let mut raw = Vec::with_capacity(3 * n);
                for i in 0..n {
                    for c in 0..3 {
                        raw.push(q(self.data[c * n + i]));
                    }
                }
                ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("sized buffer").save(path)
            }
            c => return Err(Error::Input(format!("cannot encode {c}-channel image"))),
        };
        res.map_err(|e| Error::load(path, e.to_string()))
    }

    /// Per-channel mean over pixels, accumulated in `f64`.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.plane(c).iter().map(|&v| v as f64).sum::<f64>() / (self.width * self.height) as f64)
            .collect()
    }
}

fn interleaved_to_planar<S: Copy>(raw: &[S], n: usize, f: impl Fn(S) -> f32) -> Vec<f32> {
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            out[c * n + i] = f(raw[i * 3 + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_exact() {
        let img = Image::new(2, 3, 2, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        assert_eq!(img.resize(3, 2), img);
    }

    #[test]
    fn png_round_trip_quantizes_to_u8() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let img = Image::new(c, 4, 3, (0..c * 12).map(|i| (i * 17 % 256) as f32 / 255.0).collect()).unwrap();
            let p = dir.path().join(format!("x{c}.png"));
            img.save_png(&p).unwrap();
            assert_eq!(Image::load_png(&p).unwrap(), img);
        }
    }

    #[test]
    fn sampling_outside_returns_fill() {
        let img = Image::filled(1, 2, 2, 0.5);
        assert_eq!(img.sample(0, -0.1, 1.0, 7.0), 7.0);
        assert_eq!(img.sample(0, 2.0, 2.0, 7.0), 0.5);
    }
}
