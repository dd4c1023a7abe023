#![allow(dead_code)]

use std::f64::consts::PI;

use homelight::math::Vec3;
use homelight::raster::Image;
use homelight::scene::{Camera, Floor, Material, Primitive, PrimitiveKind, SceneSpec};

pub const RHO: f64 = 0.5;

/// Unit sphere resting on the floor, centered in the frame, R = 1 everywhere.
pub fn sphere_scene() -> SceneSpec {
    let sphere = Primitive {
        kind: PrimitiveKind::Ellipsoid,
        center: Vec3::new(0.0, 1.0, 0.0),
        rotation_axis: Vec3::Y,
        rotation_angle: 0.0,
        half_extents: Vec3::splat(1.0),
        bands: vec![],
        material: Material::uniform(Vec3::splat(RHO), 1.0),
    };
    SceneSpec {
        primitives: vec![sphere],
        floor: Floor { half_x: 40.0, half_z: 40.0, material: Material::uniform(Vec3::splat(RHO), 1.0) },
        camera: Camera { elevation_deg: 30.0, target: Vec3::new(0.0, 1.0, 0.0), view_size: 3.0 },
    }
}

/// Co-directional shading of the sphere at a point with normal z-component
/// `nz`, written out from the closed forms: `(ρ/π + F D G² / (4 nz²)) nz`.
pub fn sphere_oracle(nz: f64) -> f64 {
    let r = 1.0;
    let tan2 = (1.0 - nz * nz) / (nz * nz);
    let d = (-tan2 / (r * r)).exp() / (PI * r * r * nz.powi(4));
    let a = nz / (r * (1.0 - nz * nz).sqrt());
    let g1 = if a > 1.6 { 1.0 } else { (3.535 * a + 2.181 * a * a) / (1.0 + 2.276 * a + 2.577 * a * a) };
    (RHO / PI + 0.05 * d * g1 * g1 / (4.0 * nz * nz)) * nz
}

/// Camera-plane coordinates of a pixel center for [`sphere_scene`].
pub fn sphere_pixel(res: usize, row: usize, col: usize) -> (f64, f64) {
    let px = sphere_scene().camera.view_size / res as f64;
    ((col as f64 + 0.5 - res as f64 / 2.0) * px, (res as f64 / 2.0 - row as f64 - 0.5) * px)
}

pub fn near_silhouette(mask: &Image, row: usize, col: usize, band: usize) -> bool {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let m = mask.get(0, row, col);
    for dr in -(band as isize)..=band as isize {
        for dc in -(band as isize)..=band as isize {
            let (r, c) = (row as isize + dr, col as isize + dc);
            if r < 0 || c < 0 || r >= h || c >= w || mask.get(0, r as usize, c as usize) != m {
                return true;
            }
        }
    }
    false
}

/// RMS error of the co-directional image against [`sphere_oracle`] away from
/// a 2-pixel silhouette band, with the number of samples and mask mismatches.
pub fn sphere_rms(img: &Image, mask: &Image) -> (f64, usize, usize) {
    let res = mask.width;
    let (mut se, mut n, mut bad_mask) = (0.0, 0usize, 0usize);
    for row in 0..res {
        for col in 0..res {
            let (x, y) = sphere_pixel(res, row, col);
            let r2 = x * x + y * y;
            let inside = r2 < 1.0;
            if (mask.get(0, row, col) > 0.5) != inside {
                bad_mask += 1;
            }
            if !inside || near_silhouette(mask, row, col, 2) {
                continue;
            }
            let expected = sphere_oracle((1.0 - r2).sqrt());
            for c in 0..3 {
                let e = img.get(c, row, col) as f64 - expected;
                se += e * e;
                n += 1;
            }
        }
    }
    ((se / n.max(1) as f64).sqrt(), n, bad_mask)
}

// Module layer strings at width 64, written out literally.
pub const INIT_64: &str = "conv_k7_f64-BN-Relu-Res_64-Res_64-conv_k7_fc";
pub const REC_64: &str = "conv_k7_f64-BN-Relu-Res_64-Res_64-conv_k3_f128_s2-BN-Relu-Res_128-Res_128-\
                          conv_k3_f256_s2-Res_256-Res_256-convt_k3_f128_s2-Res_128-Res_128-\
                          convt_k3_f64_s2-BN-Relu-conv_k7_fc";
pub const RESNET_64: &str = "conv_k7_f64-BN-Relu-conv_k3_f128_s2-BN-Relu-conv_k3_f256_s2-BN-Relu-\
                             Res_256-Res_256-Res_256-Res_256-convt_k3_f128_s2-BN-Relu-convt_k3_f64_s2-BN-Relu-conv_k7_fc";

/// Closed-form count: conv = k²·cin·cout + cout, BN = 2c, Res_n = 2 conv_k3 + 2 BN.
pub fn arithmetic_count(spec: &str, cin: usize, cout: usize) -> usize {
    let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
    let mut c = cin;
    let mut total = 0;
    for tok in spec.split('-') {
        if tok == "BN" {
            total += 2 * c;
        } else if tok == "Relu" {
        } else if let Some(n) = tok.strip_prefix("Res_") {
            let n: usize = n.parse().unwrap();
            total += 2 * conv(3, n, n) + 2 * 2 * n;
        } else {
            let body = tok.trim_start_matches("convt_").trim_start_matches("conv_");
            let mut parts = body.split('_');
            let k: usize = parts.next().unwrap()[1..].parse().unwrap();
            let f = &parts.next().unwrap()[1..];
            let f = if f == "c" { cout } else { f.parse().unwrap() };
            total += conv(k, c, f);
            c = f;
        }
    }
    total
}

/// Albedo (3), normal (2) and roughness (1) modules of one architecture.
pub fn triplet_count(spec: &str, cin: usize) -> usize {
    [3, 2, 1].iter().map(|&c| arithmetic_count(spec, cin, c)).sum()
}
