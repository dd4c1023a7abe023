//! Co-registered normal / albedo / roughness rasters.

use crate::error::{Error, Result};
use crate::raster::Image;

/// Normal (3 channels, unit length in camera space; x right, y up, z toward
/// the camera), albedo (3) and roughness (1) at a single resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSet {
    pub normal: Image,
    pub albedo: Image,
    pub roughness: Image,
}

impl MapSet {
    pub fn zeros(width: usize, height: usize) -> Self {
        MapSet {
            normal: Image::zeros(width, height, 3),
            albedo: Image::zeros(width, height, 3),
            roughness: Image::zeros(width, height, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.normal.width
    }

    pub fn height(&self) -> usize {
        self.normal.height
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.normal.channels == 3
            && self.albedo.channels == 3
            && self.roughness.channels == 1
            && self.normal.same_size(&self.albedo)
            && self.normal.same_size(&self.roughness);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("map set fields disagree in size or channel count".into()))
        }
    }

    /// The two predicted normal components.
    pub fn normal_xy(&self) -> Image {
        self.normal.select_channels(0..2)
    }

    /// Renormalizes normals inside the mask and zeroes every field outside.
    pub fn apply_mask(&mut self, mask: &Image) {
        let n = mask.plane_len();
        for i in 0..n {
            let fg = mask.data[i] > 0.5;
            if fg {
                let v = [0, 1, 2].map(|c| self.normal.data[c * n + i]);
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                for c in 0..3 {
                    self.normal.data[c * n + i] = if len > 0.0 { v[c] / len } else if c == 2 { 1.0 } else { 0.0 };
                }
            } else {
                for c in 0..3 {
                    self.normal.data[c * n + i] = 0.0;
                    self.albedo.data[c * n + i] = 0.0;
                }
                self.roughness.data[i] = 0.0;
            }
        }
    }

    pub fn map_images(&self, f: impl Fn(&Image) -> Image) -> MapSet {
        MapSet { normal: f(&self.normal), albedo: f(&self.albedo), roughness: f(&self.roughness) }
    }
}

/// Builds unit normals from `(x, y)`: points outside the unit disk are
/// rescaled onto its boundary, then `z = sqrt(1 - x² - y²)`.
pub fn normal_from_xy(xy: &Image) -> Result<Image> {
    if xy.channels != 2 {
        return Err(Error::Shape(format!("expected 2 channels, got {}", xy.channels)));
    }
    let n = xy.plane_len();
    let mut out = Image::zeros(xy.width, xy.height, 3);
    for i in 0..n {
        let (x, y, z) = unit_from_xy(xy.data[i], xy.data[n + i]);
        out.data[i] = x;
        out.data[n + i] = y;
        out.data[2 * n + i] = z;
    }
    Ok(out)
}

#[inline]
pub fn unit_from_xy(x: f32, y: f32) -> (f32, f32, f32) {
    let (x, y) = (x as f64, y as f64);
    let r2 = x * x + y * y;
    let (x, y) = if r2 > 1.0 {
        let r = r2.sqrt();
        (x / r, y / r)
    } else {
        (x, y)
    };
    let z = (1.0 - x * x - y * y).max(0.0).sqrt();
    let len = (x * x + y * y + z * z).sqrt();
    ((x / len) as f32, (y / len) as f32, (z / len) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normal_from_xy_examples() {
        let xy = Image::from_data(3, 1, 2, vec![0.0, 0.6, 0.9, 0.0, 0.8, 0.9]).unwrap();
        let n = normal_from_xy(&xy).unwrap();
        assert_eq!(n.pixel(0, 0), vec![0.0, 0.0, 1.0]);
        let p = n.pixel(0, 1);
        assert!((p[0] - 0.6).abs() < 1e-6 && (p[1] - 0.8).abs() < 1e-6 && p[2].abs() < 1e-3);
        let q = n.pixel(0, 2);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert!((q[0] - s).abs() < 1e-6 && (q[1] - s).abs() < 1e-6 && q[2] == 0.0);
    }

    proptest! {
        #[test]
        fn normal_from_xy_is_unit(x in -3.0f32..3.0, y in -3.0f32..3.0) {
            let (a, b, c) = unit_from_xy(x, y);
            let len = ((a * a + b * b + c * c) as f64).sqrt();
            prop_assert!((len - 1.0).abs() <= 1e-6);
            prop_assert!(c >= 0.0);
        }
    }
}
