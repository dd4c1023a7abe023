mod common;

use common::{sphere_rms, sphere_scene};
use homelight::brdf::{shade_direct, BrdfParams, ShadingGeometry};
use homelight::math::Vec3;
use homelight::raster::Image;
use homelight::render::*;
use homelight::scene::*;
use homelight::tracer::Tracer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn codirectional_sphere_matches_closed_form() {
    let scene = sphere_scene();
    let bundle = render_scene(&scene, &LightRig::nominal(&scene.camera), 256, RenderOptions::default()).unwrap();
    let (rms, n, bad_mask) = sphere_rms(&bundle.images[0], &bundle.mask);
    assert_eq!(bad_mask, 0);
    assert!(n > 3 * 20_000);
    assert!(rms < 1e-3, "rms {rms}");
}

#[test]
fn occluded_floor_is_exactly_black() {
    let scene = sphere_scene();
    let mut rig = LightRig::nominal(&scene.camera);
    rig.lights[5].direction = Vec3::Y;
    rig.lights[4].direction = Vec3::from_azimuth_elevation(-90.0, -10.0);
    let res = 96;
    let bundle = render_scene(&scene, &rig, res, RenderOptions::default()).unwrap();
    let tracer = Tracer::new(&scene);
    let (mut shadowed, mut lit) = (0, 0);
    for row in 0..res {
        for col in 0..res {
            if bundle.mask.get(0, row, col) > 0.5 {
                continue;
            }
            let ray = tracer.camera_ray(res, row, col, (0.5, 0.5));
            let t = -ray.origin.y / ray.dir.y;
            let p = ray.origin + ray.dir * t;
            let d2 = p.x * p.x + p.z * p.z;
            let overhead = bundle.images[5].get(0, row, col);
            if d2 < 0.95 * 0.95 {
                assert_eq!(overhead, 0.0, "shadowed floor at ({row},{col})");
                shadowed += 1;
            } else if d2 > 1.05 * 1.05 {
                assert!(overhead > 0.0);
                lit += 1;
            }
            for c in 0..3 {
                assert_eq!(bundle.images[4].get(c, row, col), 0.0, "light below the floor");
            }
        }
    }
    assert!(shadowed > 50 && lit > 50, "{shadowed} {lit}");
}

#[test]
fn radiance_is_linear_in_intensity() {
    let scene = sphere_scene();
    let rig = LightRig::nominal(&scene.camera);
    let mut bright = rig.clone();
    bright.lights.iter_mut().for_each(|l| l.intensity = 2.5);
    let a = render_scene(&scene, &rig, 32, RenderOptions::default()).unwrap();
    let b = render_scene(&scene, &bright, 32, RenderOptions::default()).unwrap();
    for (x, y) in a.images.iter().zip(&b.images) {
        for (u, v) in x.data.iter().zip(&y.data) {
            assert!((2.5 * u - v).abs() <= 1e-5 * v.abs().max(1e-3));
        }
    }
}

fn random_bundle(seed: u64, res: usize) -> RenderBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_bundle(&mut rng, &SceneConfig::default(), res, RenderOptions::default()).unwrap()
}

#[test]
fn ground_truth_reshades_the_codirectional_image() {
    for seed in 0..4 {
        let b = random_bundle(seed, 64);
        let (mut se, mut n) = (0.0, 0usize);
        for row in 0..64 {
            for col in 0..64 {
                if b.mask.get(0, row, col) < 0.5 {
                    continue;
                }
                let nrm = Vec3::new(
                    b.gt.normal.get(0, row, col) as f64,
                    b.gt.normal.get(1, row, col) as f64,
                    b.gt.normal.get(2, row, col) as f64,
                );
                let alb = Vec3::new(
                    b.gt.albedo.get(0, row, col) as f64,
                    b.gt.albedo.get(1, row, col) as f64,
                    b.gt.albedo.get(2, row, col) as f64,
                );
                let params = BrdfParams::new(alb, b.gt.roughness.get(0, row, col) as f64).unwrap();
                let Ok(geom) = ShadingGeometry::new(Vec3::Z, Vec3::Z, nrm.normalize()) else { continue };
                let c = shade_direct(&params, &geom, 1.0, true);
                for (ch, v) in c.to_array().into_iter().enumerate() {
                    let e = b.images[0].get(ch, row, col) as f64 - v;
                    se += e * e;
                    n += 1;
                }
            }
        }
        let rms = (se / n.max(1) as f64).sqrt();
        assert!(rms < 1e-3, "seed {seed}: rms {rms}");
    }
}

#[test]
fn masks_and_ground_truth_agree() {
    for seed in 10..14 {
        let b = random_bundle(seed, 48);
        for row in 0..48 {
            for col in 0..48 {
                let n: Vec<f32> = (0..3).map(|c| b.gt.normal.get(c, row, col)).collect();
                let a: Vec<f32> = (0..3).map(|c| b.gt.albedo.get(c, row, col)).collect();
                if b.mask.get(0, row, col) > 0.5 {
                    let len = n.iter().map(|v| v * v).sum::<f32>().sqrt();
                    assert!((len - 1.0).abs() < 1e-4);
                    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
                    assert!(b.gt.roughness.get(0, row, col) > 0.0);
                } else {
                    assert!(n.iter().chain(&a).all(|&v| v == 0.0));
                    assert_eq!(b.gt.roughness.get(0, row, col), 0.0);
                }
            }
        }
    }
}

#[test]
fn srgb_reference_values() {
    assert_eq!(srgb_encode(0.0), 0.0);
    assert_eq!(srgb_encode(1.0), 1.0);
    // 1.055 · 0.18^(1/2.4) − 0.055 evaluated at 30 digits.
    assert!((srgb_encode(0.18) as f64 - 0.461356129500441619).abs() < 1e-6);
}

#[test]
fn exposure_targets_the_sampled_median() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let flat = Image::filled(8, 8, 3, 0.7);
    for _ in 0..200 {
        let out = normalize_exposure(&flat, None, &mut rng);
        let m = out.data[0];
        assert!(out.data.iter().all(|&v| v == m));
        assert!((0.01..=0.2 + 1e-6).contains(&m));
    }
    let b = random_bundle(7, 48);
    let out = normalize_exposure(&b.images[0], Some(&b.mask), &mut rng);
    let m = masked_median(&out, Some(&b.mask));
    assert!((0.01 - 1e-6..=0.2 + 1e-6).contains(&m), "{m}");
    let zero = Image::zeros(4, 4, 3);
    assert_eq!(normalize_exposure(&zero, None, &mut rng), zero);
    let again = |seed| normalize_exposure(&flat, None, &mut ChaCha8Rng::seed_from_u64(seed)).data[0];
    assert_eq!(again(9), again(9));
}
