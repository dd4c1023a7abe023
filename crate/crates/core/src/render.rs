//! Direct-illumination renderer with hard shadows, ground-truth maps, and the
//! training-time photometric and geometric augmentations.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::brdf::{shade_direct, ShadingGeometry};
use crate::error::{Error, Result};
use crate::io;
use crate::maps::MapSet;
use crate::raster::Image;
use crate::scene::{build_light_rig, sample_scene, LightRig, SceneConfig, SceneFile, SceneSpec, NUM_SLOTS};
use crate::tracer::{Surface, Tracer};

/// One synthetic scene: six linear HDR renders, ground truth and mask.
#[derive(Clone, Debug)]
pub struct RenderBundle {
    pub images: Vec<Image>,
    pub gt: MapSet,
    pub mask: Image,
    pub meta: SceneFile,
}

impl RenderBundle {
    pub fn resolution(&self) -> usize {
        self.mask.width
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (slot, img) in self.images.iter().enumerate() {
            io::write_pfm(&dir.join(format!("img_{slot}.pfm")), img)?;
        }
        io::write_pfm(&dir.join("normal.pfm"), &self.gt.normal)?;
        io::write_pfm(&dir.join("albedo.pfm"), &self.gt.albedo)?;
        io::write_pfm(&dir.join("rough.pfm"), &self.gt.roughness)?;
        io::write_png(&dir.join("mask.png"), &self.mask, false)?;
        self.meta.save(&dir.join("scene.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let images = (0..NUM_SLOTS)
            .map(|slot| io::read_pfm(&dir.join(format!("img_{slot}.pfm"))))
            .collect::<Result<Vec<_>>>()?;
        let gt = MapSet {
            normal: io::read_pfm(&dir.join("normal.pfm"))?,
            albedo: io::read_pfm(&dir.join("albedo.pfm"))?,
            roughness: io::read_pfm(&dir.join("rough.pfm"))?,
        };
        gt.validate()?;
        let mask = io::read_mask(&dir.join("mask.png"))?;
        let meta = SceneFile::load(&dir.join("scene.txt"))?;
        let bundle = RenderBundle { images, gt, mask, meta };
        bundle.check_sizes()?;
        Ok(bundle)
    }

    fn check_sizes(&self) -> Result<()> {
        if self.images.len() != NUM_SLOTS
            || !self.images.iter().all(|i| i.same_size(&self.mask) && i.channels == 3)
            || !self.gt.normal.same_size(&self.mask)
        {
            return Err(Error::Shape("bundle buffers disagree in size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RenderOptions {
    /// Average radiance over a 2×2 sub-pixel grid (ground truth stays at the center).
    pub supersample: bool,
}

/// Samples a scene and light rig and renders them.
pub fn generate_bundle<R: Rng + ?Sized>(
    rng: &mut R,
    config: &SceneConfig,
    resolution: usize,
    options: RenderOptions,
) -> Result<RenderBundle> {
    let scene = sample_scene(rng, config)?;
    let rig = build_light_rig(rng, &scene.camera);
    render_scene(&scene, &rig, resolution, options)
}

/// Renders `count` scenes; scene `i` draws from its own stream of `seed`,
/// so the result does not depend on scheduling.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    config: &SceneConfig,
    resolution: usize,
    options: RenderOptions,
) -> Result<Vec<RenderBundle>> {
    (0..count)
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_bundle(&mut rng, config, resolution, options)
        })
        .collect()
}

/// Renders every light slot of `rig` at `resolution`² pixels.
pub fn render_scene(
    scene: &SceneSpec,
    rig: &LightRig,
    resolution: usize,
    options: RenderOptions,
) -> Result<RenderBundle> {
    scene.validate()?;
    if rig.lights.len() != NUM_SLOTS {
        return Err(Error::InvalidInput(format!("rig has {} lights", rig.lights.len())));
    }
    let tracer = Tracer::new(scene);
    let res = resolution;
    let nl = rig.lights.len();
    let offsets: &[(f64, f64)] = if options.supersample {
        &[(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
    } else {
        &[(0.5, 0.5)]
    };

    // Per row: radiance[light][x][rgb], normal, albedo, roughness, mask.
    type Row = (Vec<[f32; 3]>, Vec<[f32; 3]>, Vec<[f32; 3]>, Vec<f32>, Vec<f32>);
    let rows: Vec<Row> = (0..res)
        .into_par_iter()
        .map(|row| {
            let mut rad = vec![[0f32; 3]; nl * res];
            let mut nrm = vec![[0f32; 3]; res];
            let mut alb = vec![[0f32; 3]; res];
            let mut rough = vec![0f32; res];
            let mut mask = vec![0f32; res];
            for col in 0..res {
                for (k, &off) in offsets.iter().enumerate() {
                    let ray = tracer.camera_ray(res, row, col, off);
                    let Some(hit) = tracer.intersect(&ray, 0.0, f64::INFINITY) else { continue };
                    let params = tracer.brdf_at(&hit);
                    let view = -ray.dir;
                    for (li, light) in rig.lights.iter().enumerate() {
                        let l = light.direction.normalize();
                        let Ok(geom) = ShadingGeometry::new(view, l, hit.normal) else { continue };
                        let vis = geom.n_dot_l() > 0.0 && tracer.visible(&hit, l);
                        let c = shade_direct(&params, &geom, light.intensity, vis) / offsets.len() as f64;
                        let px = &mut rad[li * res + col];
                        px[0] += c.x as f32;
                        px[1] += c.y as f32;
                        px[2] += c.z as f32;
                    }
                    let center = offsets.len() == 1 || k == 0;
                    if center {
                        let gt_hit = if offsets.len() == 1 {
                            Some(hit)
                        } else {
                            tracer.intersect(&tracer.camera_ray(res, row, col, (0.5, 0.5)), 0.0, f64::INFINITY)
                        };
                        if let Some(h) = gt_hit {
                            if let Surface::Primitive(_) = h.surface {
                                let p = tracer.brdf_at(&h);
                                let n = scene.camera.world_to_camera(h.normal);
                                nrm[col] = [n.x as f32, n.y as f32, n.z as f32];
                                alb[col] = [p.albedo.x as f32, p.albedo.y as f32, p.albedo.z as f32];
                                rough[col] = p.roughness as f32;
                                mask[col] = 1.0;
                            }
                        }
                    }
                }
            }
            (rad, nrm, alb, rough, mask)
        })
        .collect();

    let mut images = vec![Image::zeros(res, res, 3); nl];
    let mut gt = MapSet::zeros(res, res);
    let mut mask = Image::zeros(res, res, 1);
    for (row, (rad, nrm, alb, rough, m)) in rows.into_iter().enumerate() {
        for col in 0..res {
            for c in 0..3 {
                for (li, img) in images.iter_mut().enumerate() {
                    img.set(c, row, col, rad[li * res + col][c]);
                }
                gt.normal.set(c, row, col, nrm[col][c]);
                gt.albedo.set(c, row, col, alb[col][c]);
            }
            gt.roughness.set(0, row, col, rough[col]);
            mask.set(0, row, col, m[col]);
        }
    }
    Ok(RenderBundle {
        images,
        gt,
        mask,
        meta: SceneFile { scene: scene.clone(), rig: rig.clone() },
    })
}

/// sRGB transfer curve followed by a clamp to [0, 1].
#[inline]
pub fn srgb_encode(v: f32) -> f32 {
    let v = v.max(0.0) as f64;
    let out = if v <= 0.003_130_8 { v * 12.92 } else { 1.055 * v.powf(1.0 / 2.4) - 0.055 };
    (out as f32).clamp(0.0, 1.0)
}

pub fn tonemap_srgb(hdr: &Image) -> Image {
    hdr.map(srgb_encode)
}

/// Median of the foreground values over all channels; falls back to the
/// median of positive foreground values when that is zero.
pub fn masked_median(img: &Image, mask: Option<&Image>) -> f32 {
    let n = img.plane_len();
    let mut vals: Vec<f32> = Vec::new();
    for c in 0..img.channels {
        for i in 0..n {
            if mask.is_none_or(|m| m.data[i] > 0.5) {
                vals.push(img.data[c * n + i]);
            }
        }
    }
    let median = |v: &mut Vec<f32>| -> f32 {
        if v.is_empty() {
            return 0.0;
        }
        let mid = v.len() / 2;
        let (_, m, _) = v.select_nth_unstable_by(mid, f32::total_cmp);
        *m
    };
    let m = median(&mut vals);
    if m > 0.0 {
        return m;
    }
    let mut pos: Vec<f32> = vals.into_iter().filter(|&v| v > 0.0).collect();
    median(&mut pos)
}

/// Rescales a linear image so its masked median is a uniform draw from
/// [0.01, 0.2]. All-zero inputs are returned unchanged.
pub fn normalize_exposure<R: Rng + ?Sized>(hdr: &Image, mask: Option<&Image>, rng: &mut R) -> Image {
    let target: f32 = rng.random_range(0.01..=0.2);
    let m = masked_median(hdr, mask);
    if m <= 0.0 {
        return hdr.clone();
    }
    let mut out = hdr.clone();
    out.scale(target / m);
    out
}

/// Probability of the crop-and-resize path in [`augment_geometry`].
pub const CROP_PROBABILITY: f64 = 0.7;

/// Which geometric transform was applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    Crop { x: f64, y: f64, side: f64 },
    Shrink { size: usize, x: usize, y: usize },
}

pub fn sample_augmentation<R: Rng + ?Sized>(rng: &mut R, src: usize, out: usize) -> Augmentation {
    if rng.random_bool(CROP_PROBABILITY) {
        let side = rng.random_range(0.7..=1.0) * src as f64;
        let span = src as f64 - side;
        Augmentation::Crop {
            x: if span > 0.0 { rng.random_range(0.0..=span) } else { 0.0 },
            y: if span > 0.0 { rng.random_range(0.0..=span) } else { 0.0 },
            side,
        }
    } else {
        let size = ((rng.random_range(0.6..=1.0) * out as f64).round() as usize).clamp(1, out);
        Augmentation::Shrink {
            size,
            x: rng.random_range(0..=out - size),
            y: rng.random_range(0..=out - size),
        }
    }
}

/// Applies one geometric transform identically to all buffers of a bundle.
pub fn apply_augmentation(bundle: &RenderBundle, aug: Augmentation, out: usize) -> Result<RenderBundle> {
    let src = bundle.resolution();
    let f = |img: &Image| -> Result<Image> {
        match aug {
            Augmentation::Crop { x, y, side } => Ok(img.resample_window((x, y, side, side), out, out)),
            Augmentation::Shrink { size, x, y } => {
                img.resample_window((0.0, 0.0, src as f64, src as f64), size, size).pad_into(out, out, x, y)
            }
        }
    };
    let images = bundle.images.iter().map(&f).collect::<Result<Vec<_>>>()?;
    let mask = f(&bundle.mask)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let mut gt = MapSet {
        normal: f(&bundle.gt.normal)?,
        albedo: f(&bundle.gt.albedo)?,
        roughness: f(&bundle.gt.roughness)?,
    };
    gt.apply_mask(&mask);
    Ok(RenderBundle { images, gt, mask, meta: bundle.meta.clone() })
}

/// Random crop-and-resize (p = 0.7) or shrink-and-pad (p = 0.3) to `out`².
/// Crops that lose the whole foreground are redrawn (bounded).
pub fn augment_geometry<R: Rng + ?Sized>(
    bundle: &RenderBundle,
    rng: &mut R,
    out: usize,
) -> Result<(RenderBundle, Augmentation)> {
    let src = bundle.resolution();
    if src < out {
        return Err(Error::InvalidInput(format!("bundle at {src} is below the {out} output size")));
    }
    let mut last = None;
    for _ in 0..16 {
        let aug = sample_augmentation(rng, src, out);
        let result = apply_augmentation(bundle, aug, out)?;
        if result.mask.data.iter().any(|&v| v > 0.5) || bundle.mask.data.iter().all(|&v| v <= 0.5) {
            return Ok((result, aug));
        }
        last = Some((result, aug));
    }
    Ok(last.expect("at least one attempt"))
}

/// Six tonemapped images in slot order with a mask and active-slot flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    pub images: Vec<Image>,
    pub mask: Image,
    pub active: [bool; NUM_SLOTS],
}

impl ImageStack {
    /// Builds a stack; inactive or missing slots are zero-filled. Slot 0 is required.
    pub fn new(images: Vec<Option<Image>>, mask: Image) -> Result<Self> {
        if images.len() != NUM_SLOTS {
            return Err(Error::InvalidInput(format!("expected {NUM_SLOTS} slots, got {}", images.len())));
        }
        if images[0].is_none() {
            return Err(Error::MissingCodirectional);
        }
        let mut active = [false; NUM_SLOTS];
        let mut out = Vec::with_capacity(NUM_SLOTS);
        for (slot, img) in images.into_iter().enumerate() {
            match img {
                Some(img) => {
                    if !img.same_size(&mask) || img.channels != 3 {
                        return Err(Error::Shape(format!("slot {slot} does not match the mask size")));
                    }
                    active[slot] = true;
                    out.push(img.map(|v| v.clamp(0.0, 1.0)));
                }
                None => out.push(Image::zeros(mask.width, mask.height, 3)),
            }
        }
        Ok(ImageStack { images: out, mask, active })
    }

    /// Exposure-normalizes and tonemaps HDR renders, keeping `active` slots.
    pub fn from_hdr<R: Rng + ?Sized>(
        hdr: &[Image],
        mask: &Image,
        active: [bool; NUM_SLOTS],
        normalize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let imgs = hdr
            .iter()
            .zip(active)
            .map(|(img, on)| {
                let scaled = if normalize { normalize_exposure(img, Some(mask), rng) } else { img.clone() };
                on.then(|| tonemap_srgb(&scaled))
            })
            .collect();
        ImageStack::new(imgs, mask.clone())
    }

    pub fn resolution(&self) -> usize {
        self.mask.width
    }

    pub fn deactivate(&mut self, slot: usize) {
        self.active[slot] = false;
        self.images[slot].data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// 19-channel raster: six RGB images in slot order then the mask.
    pub fn channels(&self) -> Image {
        let mut parts: Vec<&Image> = self.images.iter().collect();
        parts.push(&self.mask);
        Image::concat(&parts).expect("stack images share a size")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;
    use crate::scene::{Camera, Floor, Material, Primitive, PrimitiveKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn ball_scene() -> SceneSpec {
        SceneSpec {
            primitives: vec![Primitive {
                kind: PrimitiveKind::Ellipsoid,
                center: Vec3::new(0.0, 0.5, 0.0),
                rotation_axis: Vec3::Y,
                rotation_angle: 0.0,
                half_extents: Vec3::splat(0.5),
                bands: vec![],
                material: Material::uniform(Vec3::splat(0.6), 1.0),
            }],
            floor: Floor { half_x: 20.0, half_z: 20.0, material: Material::uniform(Vec3::splat(0.4), 0.8) },
            camera: Camera { elevation_deg: 30.0, target: Vec3::new(0.0, 0.5, 0.0), view_size: 1.6 },
        }
    }

    #[test]
    fn srgb_values() {
        assert_eq!(srgb_encode(0.0), 0.0);
        assert!((srgb_encode(1.0) - 1.0).abs() < 1e-6);
        assert!((srgb_encode(0.18) - 0.461356).abs() < 1e-5);
        assert_eq!(srgb_encode(4.0), 1.0);
    }

    #[test]
    fn exposure_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Image::filled(4, 4, 3, 0.7);
        for _ in 0..100 {
            let out = normalize_exposure(&img, None, &mut rng);
            let m = out.data[0];
            assert!((0.01 - 1e-7..=0.2 + 1e-7).contains(&m));
            assert!(out.data.iter().all(|&v| v == m));
        }
        let zero = Image::zeros(4, 4, 3);
        assert_eq!(normalize_exposure(&zero, None, &mut rng), zero);
        let a = normalize_exposure(&img, None, &mut ChaCha8Rng::seed_from_u64(9));
        let b = normalize_exposure(&img, None, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn stack_requires_slot_zero() {
        let mask = Image::filled(2, 2, 1, 1.0);
        let mut imgs = vec![None; NUM_SLOTS];
        assert!(matches!(ImageStack::new(imgs.clone(), mask.clone()), Err(Error::MissingCodirectional)));
        imgs[0] = Some(Image::filled(2, 2, 3, 0.5));
        let s = ImageStack::new(imgs, mask).unwrap();
        assert_eq!(s.active, [true, false, false, false, false, false]);
        let ch = s.channels();
        assert_eq!(ch.channels, 19);
        assert!(ch.data[3 * 4..18 * 4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10_000;
        let crops = (0..n)
            .filter(|_| matches!(sample_augmentation(&mut rng, 256, 256), Augmentation::Crop { .. }))
            .count();
        let f = crops as f64 / n as f64;
        assert!((f - 0.7).abs() < 0.02, "{f}");
    }

    #[test]
    fn identity_crop_and_padding() {
        let bundle = render_scene(&ball_scene(), &LightRig::nominal(&ball_scene().camera), 32, Default::default()).unwrap();
        let same = apply_augmentation(&bundle, Augmentation::Crop { x: 0.0, y: 0.0, side: 32.0 }, 32).unwrap();
        for (a, b) in same.images[0].data.iter().zip(&bundle.images[0].data) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(same.mask, bundle.mask);
        let pad = apply_augmentation(&bundle, Augmentation::Shrink { size: 20, x: 5, y: 7 }, 32).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let inside = (5..25).contains(&x) && (7..27).contains(&y);
                if !inside {
                    assert_eq!(pad.mask.get(0, y, x), 0.0);
                    assert!((0..3).all(|c| pad.images[0].get(c, y, x) == 0.0));
                }
                if pad.mask.get(0, y, x) == 0.0 {
                    assert_eq!(pad.gt.normal.pixel(y, x), vec![0.0; 3]);
                } else {
                    let n = pad.gt.normal.pixel(y, x);
                    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                    assert!((len - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn bundle_round_trip() {
        let scene = ball_scene();
        let bundle = render_scene(&scene, &LightRig::nominal(&scene.camera), 16, Default::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let back = RenderBundle::load(dir.path()).unwrap();
        assert_eq!(back.images, bundle.images);
        assert_eq!(back.gt, bundle.gt);
        assert_eq!(back.mask, bundle.mask);
        assert_eq!(back.meta, bundle.meta);
    }
}
