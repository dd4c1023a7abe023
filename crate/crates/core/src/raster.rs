//! Planar (channel-major) `f32` rasters and the resampling used across the
//! pipeline: area averaging, bilinear resize, cropping and padding.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// `channels` planes of `height * width` values each.
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Image { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Image { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Stacks channel planes of several equally sized images.
    pub fn concat(parts: &[&Image]) -> Result<Image> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if !p.same_size(first) {
                return Err(Error::Shape("concatenating images of different size".into()));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Image { width: first.width, height: first.height, channels, data })
    }

    pub fn select_channels(&self, range: std::ops::Range<usize>) -> Image {
        let n = self.plane_len();
        Image {
            width: self.width,
            height: self.height,
            channels: range.len(),
            data: self.data[range.start * n..range.end * n].to_vec(),
        }
    }

    /// Box-filter downsample by an integer factor (sides must divide).
    pub fn area_downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} not divisible by {factor}",
                self.width, self.height
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::zeros(w, h, self.channels);
        let norm = 1.0 / (factor * factor) as f32;
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..self.height {
                let row = &src[y * self.width..(y + 1) * self.width];
                let drow = &mut dst[(y / factor) * w..(y / factor + 1) * w];
                for (x, &v) in row.iter().enumerate() {
                    drow[x / factor] += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
        Ok(out)
    }

    /// Bilinear sample with half-pixel centers; coordinates clamp to the border.
    pub fn sample_bilinear(&self, c: usize, fy: f64, fx: f64) -> f32 {
        let x = (fx - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (fy - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (tx, ty) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let a = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
        let b = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
        a * (1.0 - ty) + b * ty
    }

    /// Resamples the window `(x0, y0, side_w, side_h)` (source pixels, may be
    /// fractional) onto a `out_w x out_h` grid. Minification by two or more
    /// supersamples so the result approximates an area average.
    pub fn resample_window(
        &self,
        window: (f64, f64, f64, f64),
        out_w: usize,
        out_h: usize,
    ) -> Image {
        let (x0, y0, ww, wh) = window;
        let sx = ww / out_w as f64;
        let sy = wh / out_h as f64;
        let taps_x = sx.ceil().max(1.0) as usize;
        let taps_y = sy.ceil().max(1.0) as usize;
        let mut out = Image::zeros(out_w, out_h, self.channels);
        let norm = 1.0 / (taps_x * taps_y) as f32;
        for c in 0..self.channels {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for ty in 0..taps_y {
                        let fy = y0 + (oy as f64 + (ty as f64 + 0.5) / taps_y as f64) * sy;
                        for tx in 0..taps_x {
                            let fx = x0 + (ox as f64 + (tx as f64 + 0.5) / taps_x as f64) * sx;
                            acc += self.sample_bilinear(c, fy, fx);
                        }
                    }
                    out.set(c, oy, ox, acc * norm);
                }
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        self.resample_window((0.0, 0.0, self.width as f64, self.height as f64), out_w, out_h)
    }

    /// Places this image at `(x, y)` inside a zero canvas.
    pub fn pad_into(&self, canvas_w: usize, canvas_h: usize, x: usize, y: usize) -> Result<Image> {
        if x + self.width > canvas_w || y + self.height > canvas_h {
            return Err(Error::Shape("padded content exceeds canvas".into()));
        }
        let mut out = Image::zeros(canvas_w, canvas_h, self.channels);
        for c in 0..self.channels {
            for row in 0..self.height {
                let src = &self.plane(c)[row * self.width..(row + 1) * self.width];
                let start = out.idx(c, y + row, x);
                out.data[start..start + self.width].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Shape("crop window exceeds image".into()));
        }
        let mut out = Image::zeros(w, h, self.channels);
        for c in 0..self.channels {
            for row in 0..h {
                let start = self.idx(c, y + row, x);
                let dst = out.idx(c, row, 0);
                out.data[dst..dst + w].copy_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(out)
    }
}

/// Smallest power of two that is `>= n`.
pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

pub fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}
