use crate::error::{Error, Result};
use crate::raster::Image;

/// Dense `f32` tensor in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    /// Batch of images (all the same size) as one tensor.
    pub fn from_images(images: &[&Image]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.width != first.width || img.height != first.height || img.channels != first.channels {
                return Err(Error::Shape("batch images differ in shape".into()));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor { shape: [images.len(), first.channels, first.height, first.width], data })
    }

    pub fn to_image(&self, i: usize) -> Image {
        Image {
            width: self.w(),
            height: self.h(),
            channels: self.c(),
            data: self.sample(i).to_vec(),
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (n, h, w) = (first.n(), first.h(), first.w());
        if parts.iter().any(|p| p.n() != n || p.h() != h || p.w() != w) {
            return Err(Error::Shape("concatenated tensors differ in batch or spatial size".into()));
        }
        let c: usize = parts.iter().map(|p| p.c()).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(i));
            }
        }
        Ok(Tensor { shape: [n, c, h, w], data })
    }

    /// Channels `range` of every sample.
    pub fn slice_channels(&self, range: std::ops::Range<usize>) -> Tensor {
        let plane = self.plane();
        let mut data = Vec::with_capacity(self.n() * range.len() * plane);
        for i in 0..self.n() {
            let s = self.sample(i);
            data.extend_from_slice(&s[range.start * plane..range.end * plane]);
        }
        Tensor { shape: [self.n(), range.len(), self.h(), self.w()], data }
    }

    /// Box-filter downsample by an integer factor.
    pub fn area_downsample(&self, factor: usize) -> Tensor {
        if factor == 1 {
            return self.clone();
        }
        let (h, w) = (self.h() / factor, self.w() / factor);
        let mut out = Tensor::zeros([self.n(), self.c(), h, w]);
        let norm = 1.0 / (factor * factor) as f32;
        let (src_w, planes) = (self.w(), self.n() * self.c());
        for p in 0..planes {
            let src = &self.data[p * self.plane()..(p + 1) * self.plane()];
            let dst = &mut out.data[p * h * w..(p + 1) * h * w];
            for y in 0..h * factor {
                let drow = &mut dst[(y / factor) * w..(y / factor + 1) * w];
                for (x, &v) in src[y * src_w..(y + 1) * src_w].iter().enumerate() {
                    drow[x / factor] += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
        out
    }

    /// Adjoint of [`Tensor::area_downsample`].
    pub fn area_downsample_backward(grad: &Tensor, factor: usize) -> Tensor {
        if factor == 1 {
            return grad.clone();
        }
        let (h, w) = (grad.h() * factor, grad.w() * factor);
        let mut out = Tensor::zeros([grad.n(), grad.c(), h, w]);
        let norm = 1.0 / (factor * factor) as f32;
        let planes = grad.n() * grad.c();
        for p in 0..planes {
            let src = &grad.data[p * grad.plane()..(p + 1) * grad.plane()];
            let dst = &mut out.data[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[(y / factor) * grad.w() + x / factor] * norm;
                }
            }
        }
        out
    }

    /// Bilinear ×2 upsampling with half-pixel centers and edge clamping.
    pub fn upsample2(&self) -> Tensor {
        let (h, w) = (self.h(), self.w());
        let mut out = Tensor::zeros([self.n(), self.c(), 2 * h, 2 * w]);
        let planes = self.n() * self.c();
        for p in 0..planes {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for oy in 0..2 * h {
                let (y0, y1, ty) = upsample_taps(oy, h);
                for ox in 0..2 * w {
                    let (x0, x1, tx) = upsample_taps(ox, w);
                    let a = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                    let b = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                    dst[oy * 2 * w + ox] = a * (1.0 - ty) + b * ty;
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::upsample2`].
    pub fn upsample2_backward(grad: &Tensor) -> Tensor {
        let (h, w) = (grad.h() / 2, grad.w() / 2);
        let mut out = Tensor::zeros([grad.n(), grad.c(), h, w]);
        let planes = grad.n() * grad.c();
        for p in 0..planes {
            let src = &grad.data[p * 4 * h * w..(p + 1) * 4 * h * w];
            let dst = &mut out.data[p * h * w..(p + 1) * h * w];
            for oy in 0..2 * h {
                let (y0, y1, ty) = upsample_taps(oy, h);
                for ox in 0..2 * w {
                    let (x0, x1, tx) = upsample_taps(ox, w);
                    let g = src[oy * 2 * w + ox];
                    dst[y0 * w + x0] += g * (1.0 - tx) * (1.0 - ty);
                    dst[y0 * w + x1] += g * tx * (1.0 - ty);
                    dst[y1 * w + x0] += g * (1.0 - tx) * ty;
                    dst[y1 * w + x1] += g * tx * ty;
                }
            }
        }
        out
    }
}

#[inline]
fn upsample_taps(o: usize, n: usize) -> (usize, usize, f32) {
    // Source coordinate of output center o: (o + 0.5) / 2 - 0.5.
    let f = ((o as f32 + 0.5) * 0.5 - 0.5).clamp(0.0, (n - 1) as f32);
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f - i0 as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
    }

    fn ramp(shape: [usize; 4], k: f32) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..n).map(|i| (i as f32 * k).sin()).collect()).unwrap()
    }

    #[test]
    fn resampling_adjoints() {
        // <A x, y> == <x, A^T y>
        let x = ramp([2, 3, 4, 6], 0.37);
        let y = ramp([2, 3, 8, 12], 0.11);
        let lhs = dot(&x.upsample2(), &y);
        let rhs = dot(&x, &Tensor::upsample2_backward(&y));
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} {rhs}");
        let big = ramp([1, 2, 8, 8], 0.23);
        let small = ramp([1, 2, 2, 2], 0.71);
        let lhs = dot(&big.area_downsample(4), &small);
        let rhs = dot(&big, &Tensor::area_downsample_backward(&small, 4));
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let t = Tensor::from_vec([1, 1, 3, 3], vec![0.25; 9]).unwrap();
        assert!(t.upsample2().data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn concat_and_slice() {
        let a = ramp([2, 1, 2, 2], 0.3);
        let b = ramp([2, 2, 2, 2], 0.9);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape, [2, 3, 2, 2]);
        assert_eq!(c.slice_channels(1..3), b);
        assert_eq!(c.slice_channels(0..1), a);
    }
}
