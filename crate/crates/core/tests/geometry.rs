use homelight::geometry::*;
use homelight::raster::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn normal_image(w: usize, h: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Image {
    let mut img = Image::zeros(w, h, 3);
    for r in 0..h {
        for c in 0..w {
            for (k, v) in f(r, c).iter().enumerate() {
                img.set(k, r, c, *v as f32);
            }
        }
    }
    img
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / l)
}

/// Least-squares plane `a*c + b*r + d` over the mask; returns `(a, b, rms residual)`.
fn fit_plane(d: &DepthMap) -> (f64, f64, f64) {
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    let mut pts = Vec::new();
    for r in 0..d.height {
        for c in 0..d.width {
            if let Some(z) = d.get(r, c) {
                let row = [c as f64, r as f64, 1.0];
                for i in 0..3 {
                    atb[i] += row[i] * z;
                    for j in 0..3 {
                        ata[i][j] += row[i] * row[j];
                    }
                }
                pts.push((row, z));
            }
        }
    }
    // Cramer's rule on the 3x3 normal equations.
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d0 = det(ata);
    let sol: Vec<f64> = (0..3)
        .map(|k| {
            let mut m = ata;
            for i in 0..3 {
                m[i][k] = atb[i];
            }
            det(m) / d0
        })
        .collect();
    let rms = (pts.iter().map(|(row, z)| (row[0] * sol[0] + row[1] * sol[1] + sol[2] - z).powi(2)).sum::<f64>()
        / pts.len() as f64)
        .sqrt();
    (sol[0], sol[1], rms)
}

#[test]
fn constant_gradient_gives_linear_depth() {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let n = normal_image(16, 16, |_, _| [-s, 0.0, s]);
    let d = integrate_normals(&n, &Image::filled(16, 16, 1, 1.0)).unwrap();
    let (a, b, rms) = fit_plane(&d);
    assert!((a - 1.0).abs() < 1e-6 && b.abs() < 1e-6);
    assert!(rms < 1e-6, "rms {rms}");
    assert!(d.depth.iter().sum::<f64>().abs() < 1e-9);
}

/// Sphere of radius `rad` pixels, masked to the disk where `n_z >= cos(60°)`.
fn sphere_cap(side: usize, rad: f64) -> (Image, Image, Vec<f64>) {
    let ctr = (side as f64 - 1.0) / 2.0;
    let lim = rad * (60f64.to_radians()).sin();
    let mut mask = Image::zeros(side, side, 1);
    let mut truth = vec![0.0; side * side];
    let n = normal_image(side, side, |r, c| {
        let (x, y) = (c as f64 - ctr, ctr - r as f64);
        if x.hypot(y) <= lim {
            let z = (rad * rad - x * x - y * y).sqrt();
            [x / rad, y / rad, z / rad]
        } else {
            [0.0, 0.0, 1.0]
        }
    });
    for r in 0..side {
        for c in 0..side {
            let (x, y) = (c as f64 - ctr, ctr - r as f64);
            if x.hypot(y) <= lim {
                mask.set(0, r, c, 1.0);
                truth[r * side + c] = (rad * rad - x * x - y * y).sqrt();
            }
        }
    }
    (n, mask, truth)
}

#[test]
fn sphere_cap_depth_within_one_percent() {
    let (n, mask, truth) = sphere_cap(128, 60.0);
    let d = integrate_normals(&n, &mask).unwrap();
    let idx: Vec<usize> = (0..truth.len()).filter(|&i| d.mask[i]).collect();
    let mean_t = idx.iter().map(|&i| truth[i]).sum::<f64>() / idx.len() as f64;
    let err = (idx.iter().map(|&i| (d.depth[i] - (truth[i] - mean_t)).powi(2)).sum::<f64>() / idx.len() as f64).sqrt();
    let scale = (idx.iter().map(|&i| (truth[i] - mean_t).powi(2)).sum::<f64>() / idx.len() as f64).sqrt();
    assert!(err / scale < 0.01, "relative rms {}", err / scale);
}

#[test]
fn noisy_plane_slope_within_two_percent() {
    let (p, q) = (0.5, -0.3);
    let base = unit([-p, -q, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 2f64.to_radians()).unwrap();
    let mut img = Image::zeros(64, 64, 3);
    for r in 0..64 {
        for c in 0..64 {
            let v = unit([base[0] + noise.sample(&mut rng), base[1] + noise.sample(&mut rng), base[2]]);
            for k in 0..3 {
                img.set(k, r, c, v[k] as f32);
            }
        }
    }
    let d = integrate_normals(&img, &Image::filled(64, 64, 1, 1.0)).unwrap();
    let (a, b, _) = fit_plane(&d);
    // Rows grow downward while q is along y up.
    assert!((a - p).abs() / p.abs() < 0.02, "p {a}");
    assert!((-b - q).abs() / q.abs() < 0.02, "q {}", -b);
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<bool> {
    (0..w * h).map(|_| rng.random::<f64>() < 0.8).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_gradients_are_recovered(seed in 0u64..1000, w in 2usize..12, h in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut rng, w, h);
        prop_assume!(mask.iter().any(|&m| m));
        let g: Vec<f64> = (0..w * h).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut dx = vec![0.0; w * h];
        let mut dy = vec![0.0; w * h];
        for i in 0..w * h {
            if i % w + 1 < w { dx[i] = g[i + 1] - g[i]; }
            if i / w + 1 < h { dy[i] = g[i + w] - g[i]; }
        }
        let sys = EdgeSystem { width: w, height: h, mask: mask.clone(), dx, dy };
        let d = sys.solve(IntegrateOptions { tolerance: 1e-13, ..Default::default() }).unwrap();
        let res = sys.residuals(&d.depth);
        let norm = res.iter().map(|r| r * r).sum::<f64>().sqrt();
        prop_assert!(norm < 1e-10, "residual {}", norm);
    }

    #[test]
    fn solution_is_least_squares_and_gauge_free(seed in 0u64..1000, w in 2usize..10, h in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut rng, w, h);
        prop_assume!(mask.iter().any(|&m| m));
        let dx: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sys = EdgeSystem { width: w, height: h, mask: mask.clone(), dx, dy };
        let d = sys.solve(IntegrateOptions { tolerance: 1e-12, ..Default::default() }).unwrap();
        let cost = |f: &[f64]| sys.residuals(f).iter().map(|r| r * r).sum::<f64>();
        let base = cost(&d.depth);
        for _ in 0..10 {
            let f: Vec<f64> = d.depth.iter().map(|v| v + rng.random_range(-1e-3..1e-3)).collect();
            prop_assert!(cost(&f) >= base - 1e-12);
        }
        let shifted: Vec<f64> = d.depth.iter().map(|v| v + 3.5).collect();
        prop_assert!((cost(&shifted) - base).abs() < 1e-9);
        let (labels, count) = components(&mask, w, h);
        for comp in 0..count {
            let s: f64 = (0..w * h).filter(|&i| labels[i] == Some(comp)).map(|i| d.depth[i]).sum();
            prop_assert!(s.abs() < 1e-9);
        }
    }
}
