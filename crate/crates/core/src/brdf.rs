//! Cook-Torrance reflectance with a Beckmann distribution, Schlick Fresnel
//! and Smith masking-shadowing (rational approximation).
//!
//! Scalar math is double precision; callers store results in `f32` buffers.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Fresnel reflectance at normal incidence shared by every material.
pub const DEFAULT_F0: f64 = 0.05;

const UNIT_TOLERANCE: f64 = 1e-6;

/// Linear RGB triple stored in a [`Vec3`].
pub type Rgb = Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrdfParams {
    pub albedo: Rgb,
    pub roughness: f64,
    pub f0: f64,
}

impl BrdfParams {
    pub fn new(albedo: Rgb, roughness: f64) -> Result<Self> {
        Self::with_f0(albedo, roughness, DEFAULT_F0)
    }

    pub fn with_f0(albedo: Rgb, roughness: f64, f0: f64) -> Result<Self> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(albedo.x) && in_unit(albedo.y) && in_unit(albedo.z)) {
            return Err(Error::Domain(format!("albedo {albedo:?} outside [0,1]")));
        }
        if !(roughness > 0.0 && roughness <= 1.0) {
            return Err(Error::Domain(format!("roughness {roughness} outside (0,1]")));
        }
        if !in_unit(f0) {
            return Err(Error::Domain(format!("f0 {f0} outside [0,1]")));
        }
        Ok(BrdfParams { albedo, roughness, f0 })
    }
}

/// View, light and normal directions with the derived half vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadingGeometry {
    pub view: Vec3,
    pub light: Vec3,
    pub normal: Vec3,
    pub half: Vec3,
}

impl ShadingGeometry {
    /// Builds the geometry from unit vectors; rejects non-unit inputs and
    /// exactly opposite view/light directions (undefined half vector).
    pub fn new(view: Vec3, light: Vec3, normal: Vec3) -> Result<Self> {
        for (name, v) in [("view", view), ("light", light), ("normal", normal)] {
            if (v.length() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Domain(format!("{name} vector {v:?} is not unit length")));
            }
        }
        let sum = view + light;
        if sum.length() < 1e-12 {
            return Err(Error::Domain("view and light are opposite".into()));
        }
        Ok(ShadingGeometry { view, light, normal, half: sum.normalize() })
    }

    pub fn n_dot_l(&self) -> f64 {
        self.normal.dot(self.light)
    }

    pub fn n_dot_v(&self) -> f64 {
        self.normal.dot(self.view)
    }
}

/// Beckmann normal distribution `exp(-tan²θh / R²) / (π R² cos⁴θh)`.
pub fn beckmann_d(roughness: f64, cos_theta_h: f64) -> Result<f64> {
    if cos_theta_h <= 0.0 {
        return Err(Error::Domain(format!(
            "half vector below surface (cos θh = {cos_theta_h})"
        )));
    }
    if roughness <= 0.0 {
        return Err(Error::Domain(format!("roughness {roughness} must be positive")));
    }
    let c = cos_theta_h.min(1.0);
    let c2 = c * c;
    let tan2 = (1.0 - c2) / c2;
    let r2 = roughness * roughness;
    Ok((-tan2 / r2).exp() / (PI * r2 * c2 * c2))
}

/// Schlick approximation; `cos_hv` is clamped to [0, 1].
pub fn fresnel_schlick(f0: f64, cos_hv: f64) -> f64 {
    let m = 1.0 - cos_hv.clamp(0.0, 1.0);
    let m2 = m * m;
    f0 + (1.0 - f0) * m2 * m2 * m
}

/// Smith G1 for direction X with the Walter rational fit in `a = 1/(R tan θx)`.
pub fn smith_g1(cos_xn: f64, cos_xh: f64, roughness: f64) -> f64 {
    if cos_xh * cos_xn <= 0.0 {
        return 0.0;
    }
    let cos_xn = cos_xn.min(1.0);
    let sin_xn = (1.0 - cos_xn * cos_xn).max(0.0).sqrt();
    if sin_xn == 0.0 {
        return 1.0;
    }
    let a = cos_xn / (roughness * sin_xn);
    if a > 1.6 {
        return 1.0;
    }
    let a2 = a * a;
    ((3.535 * a + 2.181 * a2) / (1.0 + 2.276 * a + 2.577 * a2)).clamp(0.0, 1.0)
}

/// Specular lobe `F D G / (4 (N·L)(N·V))`; zero for back-facing geometry.
pub fn specular_term(params: &BrdfParams, geom: &ShadingGeometry) -> f64 {
    let n_l = geom.n_dot_l();
    let n_v = geom.n_dot_v();
    let n_h = geom.normal.dot(geom.half);
    if n_l <= 0.0 || n_v <= 0.0 || n_h <= 0.0 {
        return 0.0;
    }
    let d = beckmann_d(params.roughness, n_h).unwrap_or(0.0);
    let f = fresnel_schlick(params.f0, geom.half.dot(geom.view));
    let g = smith_g1(n_l, geom.half.dot(geom.light), params.roughness)
        * smith_g1(n_v, geom.half.dot(geom.view), params.roughness);
    f * d * g / (4.0 * n_l * n_v)
}

/// Full BRDF value per channel: `A/π + specular`.
pub fn eval_brdf(params: &BrdfParams, geom: &ShadingGeometry) -> Rgb {
    params.albedo / PI + Vec3::splat(specular_term(params, geom))
}

/// Outgoing radiance from one directional light: `vis · E · f · max(N·L, 0)`.
pub fn shade_direct(
    params: &BrdfParams,
    geom: &ShadingGeometry,
    intensity: f64,
    visible: bool,
) -> Rgb {
    let n_l = geom.n_dot_l();
    if !visible || n_l <= 0.0 || intensity <= 0.0 {
        return Vec3::ZERO;
    }
    eval_brdf(params, geom) * (intensity * n_l)
}
