//! Angular-error evaluation, photometric-stereo object loading and the
//! light-deviation / intensity-perturbation protocols.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::infer::predict;
use crate::io::{read_any, read_mask, read_pfm, write_pfm, write_png};
use crate::math::Vec3;
use crate::netarch::NetworkWeights;
use crate::raster::Image;
use crate::render::{masked_median, render_scene, tonemap_srgb, ImageStack, RenderBundle, RenderOptions};
use crate::scene::{Light, LightRig, SceneSpec, NUM_SLOTS, SLOT_NAMES};

/// Per-image masked median used when protocols normalize exposure.
pub const EVAL_EXPOSURE: f32 = 0.1;

/// Mean angle between predicted and true normals over the mask, in degrees.
/// Evaluated as `atan2(|p × g|, p · g)`, which equals `acos(p · g)` for unit
/// vectors without its loss of precision near zero.
pub fn mean_angular_error(pred: &Image, gt: &Image, mask: &Image) -> Result<f64> {
    if pred.channels != 3 || gt.channels != 3 || !pred.same_size(gt) || !pred.same_size(mask) {
        return Err(Error::Shape("MAE needs two 3-channel normal maps and a mask of one size".into()));
    }
    let n = mask.plane_len();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in (0..n).filter(|&i| mask.data[i] > 0.5) {
        let p = Vec3::new(pred.data[i] as f64, pred.data[n + i] as f64, pred.data[2 * n + i] as f64);
        let g = Vec3::new(gt.data[i] as f64, gt.data[n + i] as f64, gt.data[2 * n + i] as f64);
        sum += p.angle_deg(g);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidInput("MAE over an empty mask".into()));
    }
    Ok(sum / count as f64)
}

/// Chosen indices and their angular distances (degrees) to the targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

/// Nearest available direction per target, in target order. An index is used
/// at most once; ties go to the lowest index.
pub fn select_lights_by_direction(available: &[Vec3], targets: &[Vec3]) -> Result<Selection> {
    if targets.is_empty() || available.is_empty() {
        return Err(Error::InvalidInput("light selection needs targets and available lights".into()));
    }
    if available.len() < targets.len() {
        return Err(Error::InvalidInput(format!("{} lights available for {} targets", available.len(), targets.len())));
    }
    let mut used = vec![false; available.len()];
    let mut sel = Selection { indices: Vec::new(), distances: Vec::new() };
    for t in targets {
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in available.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = a.angle_deg(*t);
            if best.is_none_or(|(_, bd)| d < bd - 1e-9) {
                best = Some((i, d));
            }
        }
        let (i, d) = best.expect("enough unused lights");
        used[i] = true;
        sel.indices.push(i);
        sel.distances.push(d);
    }
    Ok(sel)
}

/// Per-image gain factors `max(0, N(1, σ))`.
pub fn intensity_scalars<R: Rng + ?Sized>(count: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be non-negative, got {sigma}")));
    }
    let dist = Normal::new(1.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
    Ok((0..count).map(|_| dist.sample(rng)).collect())
}

/// Scales each HDR image by its own `max(0, N(1, σ))` draw, then tonemaps.
pub fn perturb_intensity<R: Rng + ?Sized>(images: &[Image], sigma: f64, rng: &mut R) -> Result<Vec<Image>> {
    let gains = intensity_scalars(images.len(), sigma, rng)?;
    Ok(images
        .iter()
        .zip(gains)
        .map(|(img, g)| {
            let g = g.max(0.0) as f32;
            tonemap_srgb(&img.map(|v| v * g))
        })
        .collect())
}

/// Scales an image so its masked median equals `median`.
pub fn fixed_exposure(img: &Image, mask: &Image, median: f32) -> Image {
    let m = masked_median(img, Some(mask));
    if m <= 0.0 {
        return img.clone();
    }
    img.map(|v| v * median / m)
}

/// A photometric-stereo capture with calibrated lights and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PsObject {
    pub name: String,
    /// Linear images, already divided by their light intensities.
    pub images: Vec<Image>,
    /// Unit directions toward the lights, camera space (x right, y up, z to the camera).
    pub directions: Vec<Vec3>,
    pub intensities: Vec<[f64; 3]>,
    pub normals: Image,
    pub mask: Image,
}

impl PsObject {
    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if n == 0 || self.directions.len() != n || self.intensities.len() != n {
            return Err(Error::InvalidInput(format!(
                "{}: {} images, {} directions, {} intensities",
                self.name,
                n,
                self.directions.len(),
                self.intensities.len()
            )));
        }
        if self.images.iter().any(|i| !i.same_size(&self.mask) || i.channels != 3)
            || !self.normals.same_size(&self.mask)
            || self.normals.channels != 3
        {
            return Err(Error::Shape(format!("{}: images, normals and mask differ in size", self.name)));
        }
        let p = self.mask.plane_len();
        for i in (0..p).filter(|&i| self.mask.data[i] > 0.5) {
            let len = (0..3).map(|c| (self.normals.data[c * p + i] as f64).powi(2)).sum::<f64>().sqrt();
            if (len - 1.0).abs() > 1e-3 {
                return Err(Error::InvalidInput(format!(
                    "{}: ground-truth normal at pixel {i} has length {len:.4}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Six slot images of a rendered bundle with its rig in camera space.
    pub fn from_bundle(name: &str, bundle: &RenderBundle) -> Self {
        let cam = &bundle.meta.scene.camera;
        PsObject {
            name: name.to_string(),
            images: bundle.images.clone(),
            directions: bundle.meta.rig.lights.iter().map(|l| cam.world_to_camera(l.direction)).collect(),
            intensities: vec![[1.0; 3]; bundle.images.len()],
            normals: bundle.gt.normal.clone(),
            mask: bundle.mask.clone(),
        }
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }
}

fn parse_triples(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, line)| {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, format!("line {}: not a number triple", k + 1)))?;
            <[f64; 3]>::try_from(v).map_err(|_| Error::format(path, format!("line {}: expected 3 values", k + 1)))
        })
        .collect()
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?;
            let ext = p.extension()?.to_str()?.to_ascii_lowercase();
            let num = stem.parse::<u64>().ok()?;
            matches!(ext.as_str(), "pfm" | "png" | "tif" | "tiff").then_some((num, p))
        })
        .collect();
    files.sort();
    Ok(files.into_iter().map(|f| f.1).collect())
}

/// Loads `NNN.{pfm,png}` images (read as linear values), `light_directions.txt`,
/// optional `light_intensities.txt`, `mask.png` and `normal.pfm`.
pub fn load_ps_object(dir: &Path) -> Result<PsObject> {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("object").to_string();
    let files = image_files(dir)?;
    let directions: Vec<Vec3> = parse_triples(&dir.join("light_directions.txt"))?
        .into_iter()
        .map(|[x, y, z]| Vec3::new(x, y, z).normalize())
        .collect();
    if directions.len() != files.len() {
        return Err(Error::InvalidInput(format!(
            "{name}: {} light directions for {} images",
            directions.len(),
            files.len()
        )));
    }
    let ipath = dir.join("light_intensities.txt");
    let intensities = if ipath.is_file() { parse_triples(&ipath)? } else { vec![[1.0; 3]; files.len()] };
    if intensities.len() != files.len() {
        return Err(Error::InvalidInput(format!(
            "{name}: {} light intensities for {} images",
            intensities.len(),
            files.len()
        )));
    }
    let mut images = Vec::with_capacity(files.len());
    for (f, inten) in files.iter().zip(&intensities) {
        let mut img = read_any(f)?;
        if inten.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidInput(format!("{}: non-positive light intensity", f.display())));
        }
        for (c, &s) in inten.iter().enumerate() {
            img.plane_mut(c).iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
        }
        images.push(img);
    }
    let obj = PsObject {
        name,
        images,
        directions,
        intensities,
        normals: read_pfm(&dir.join("normal.pfm"))?,
        mask: read_mask(&dir.join("mask.png"))?,
    };
    obj.validate()?;
    Ok(obj)
}

/// Inverse of [`load_ps_object`]; images are stored multiplied back by their intensities.
pub fn write_ps_object(obj: &PsObject, dir: &Path) -> Result<()> {
    obj.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let width = obj.images.len().to_string().len().max(3);
    for (k, (img, inten)) in obj.images.iter().zip(&obj.intensities).enumerate() {
        let mut scaled = img.clone();
        for (c, &s) in inten.iter().enumerate() {
            scaled.plane_mut(c).iter_mut().for_each(|v| *v = (*v as f64 * s) as f32);
        }
        write_pfm(&dir.join(format!("{:0width$}.pfm", k + 1)), &scaled)?;
    }
    let fmt = |rows: Vec<[f64; 3]>| rows.iter().map(|r| format!("{} {} {}\n", r[0], r[1], r[2])).collect::<String>();
    let dpath = dir.join("light_directions.txt");
    fs::write(&dpath, fmt(obj.directions.iter().map(|d| [d.x, d.y, d.z]).collect())).map_err(|e| Error::io(&dpath, e))?;
    let ipath = dir.join("light_intensities.txt");
    fs::write(&ipath, fmt(obj.intensities.clone())).map_err(|e| Error::io(&ipath, e))?;
    write_png(&dir.join("mask.png"), &obj.mask, false)?;
    write_pfm(&dir.join("normal.pfm"), &obj.normals)
}

/// Renders a scene under arbitrary camera-space light directions, six at a time.
pub fn render_ps_object(name: &str, scene: &SceneSpec, directions: &[Vec3], resolution: usize) -> Result<PsObject> {
    let cam = &scene.camera;
    let mut images = Vec::with_capacity(directions.len());
    let mut last = None;
    for chunk in directions.chunks(NUM_SLOTS) {
        let mut lights: Vec<Light> =
            chunk.iter().map(|d| Light { direction: cam.camera_to_world(d.normalize()), intensity: 1.0 }).collect();
        while lights.len() < NUM_SLOTS {
            lights.push(lights[0]);
        }
        let bundle = render_scene(scene, &LightRig { lights }, resolution, RenderOptions::default())?;
        images.extend(bundle.images.iter().take(chunk.len()).cloned());
        last = Some(bundle);
    }
    let bundle = last.ok_or_else(|| Error::InvalidInput("no light directions".into()))?;
    Ok(PsObject {
        name: name.to_string(),
        images,
        directions: directions.iter().map(|d| d.normalize()).collect(),
        intensities: vec![[1.0; 3]; directions.len()],
        normals: bundle.gt.normal,
        mask: bundle.mask,
    })
}

/// Anything that maps a stack to a normal field of the stack's size.
pub trait NormalModel {
    fn predict_normals(&self, stack: &ImageStack) -> Result<Image>;
}

/// A trained network run at up to `resolution`.
pub struct NetworkModel<'a> {
    pub weights: &'a NetworkWeights,
    pub resolution: usize,
}

impl NormalModel for NetworkModel<'_> {
    fn predict_normals(&self, stack: &ImageStack) -> Result<Image> {
        let p = predict(self.weights, stack, self.resolution)?;
        if p.framing.width != stack.mask.width || p.framing.height != stack.mask.height {
            return Err(Error::Shape(format!(
                "capture {}x{} exceeds the evaluation resolution {}",
                stack.mask.width, stack.mask.height, self.resolution
            )));
        }
        Ok(p.maps.normal)
    }
}

/// Returns the ground truth regardless of input (harness self-test).
pub struct GroundTruthModel(pub Image);

impl NormalModel for GroundTruthModel {
    fn predict_normals(&self, _: &ImageStack) -> Result<Image> {
        Ok(self.0.clone())
    }
}

/// Nominal target direction (camera space) of a slot name.
pub fn slot_target(name: &str) -> Result<(usize, Vec3)> {
    let slot = SLOT_NAMES
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| Error::InvalidInput(format!("unknown light '{name}' (expected one of {SLOT_NAMES:?})")))?;
    let dir = match slot {
        0 => Vec3::new(0.0, 0.0, 1.0),
        5 => Vec3::from_azimuth_elevation(0.0, 90.0),
        s => Vec3::from_azimuth_elevation(crate::scene::SIDE_AZIMUTHS[s - 1], 0.0),
    };
    Ok((slot, dir))
}

/// Parses a comma-separated list of slot names.
pub fn parse_light_list(list: &str) -> Result<Vec<(usize, Vec3)>> {
    let out: Vec<(usize, Vec3)> = list.split(',').map(|s| slot_target(s.trim())).collect::<Result<_>>()?;
    if !out.iter().any(|(s, _)| *s == 0) {
        return Err(Error::MissingCodirectional);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtocolOptions {
    /// Per-image masked median applied before perturbation (`None` keeps the data's exposure).
    pub exposure: Option<f32>,
    pub sigma: f64,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions { exposure: Some(EVAL_EXPOSURE), sigma: 0.0 }
    }
}

/// Places object images into slots, perturbs, tonemaps and predicts.
pub fn run_selection<R: Rng + ?Sized>(
    obj: &PsObject,
    model: &dyn NormalModel,
    slots: &[(usize, usize)],
    opts: ProtocolOptions,
    rng: &mut R,
) -> Result<f64> {
    let hdr: Vec<Image> = slots
        .iter()
        .map(|&(_, idx)| match opts.exposure {
            Some(m) => fixed_exposure(&obj.images[idx], &obj.mask, m),
            None => obj.images[idx].clone(),
        })
        .collect();
    let ldr = perturb_intensity(&hdr, opts.sigma, rng)?;
    let mut images: Vec<Option<Image>> = vec![None; NUM_SLOTS];
    for (&(slot, _), img) in slots.iter().zip(ldr) {
        images[slot] = Some(img);
    }
    let stack = ImageStack::new(images, obj.mask.clone())?;
    let pred = model.predict_normals(&stack)?;
    mean_angular_error(&pred, &obj.normals, &obj.mask)
}

/// One evaluation result row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub object: String,
    pub n_images: usize,
    pub deviation: f64,
    pub sigma: f64,
    #[serde(rename = "MAE")]
    pub mae: f64,
}

/// Fixed-protocol evaluation: nearest lights to the named slots.
pub fn evaluate_lights<R: Rng + ?Sized>(
    obj: &PsObject,
    model: &dyn NormalModel,
    lights: &[(usize, Vec3)],
    opts: ProtocolOptions,
    rng: &mut R,
) -> Result<EvalRecord> {
    let targets: Vec<Vec3> = lights.iter().map(|l| l.1).collect();
    let sel = select_lights_by_direction(&obj.directions, &targets)?;
    let slots: Vec<(usize, usize)> = lights.iter().map(|l| l.0).zip(sel.indices.iter().copied()).collect();
    let mae = run_selection(obj, model, &slots, opts, rng)?;
    let deviation = sel.distances.iter().sum::<f64>() / sel.distances.len() as f64;
    Ok(EvalRecord { object: obj.name.clone(), n_images: lights.len(), deviation, sigma: opts.sigma, mae })
}

/// Rotates `v` toward `toward` by `deg` degrees along their great circle.
pub fn rotate_toward(v: Vec3, toward: Vec3, deg: f64) -> Vec3 {
    let v = v.normalize();
    let total = v.angle_deg(toward);
    if total < 1e-12 {
        return v;
    }
    let ortho = (toward.normalize() - v * v.dot(toward.normalize())).normalize();
    let a = deg.to_radians();
    v * a.cos() + ortho * a.sin()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// Requested inward rotation of both side lights (degrees).
    pub deviation: f64,
    /// Mean angle between the chosen side lights and the unrotated targets.
    pub achieved: f64,
    pub indices: Vec<usize>,
    pub mae: f64,
}

/// Largest accepted gap (degrees) between a sweep target and its chosen light.
pub const SWEEP_MAX_GAP: f64 = 5.0;

/// Front light fixed; the front-right / front-left targets rotate toward the
/// camera axis by each deviation. Stops early (with a warning) once a target
/// passes the axis or no light lies within [`SWEEP_MAX_GAP`] of it.
pub fn sweep_angular_deviation<R: Rng + ?Sized>(
    obj: &PsObject,
    model: &dyn NormalModel,
    deviations: &[f64],
    side_targets: [Vec3; 2],
    opts: ProtocolOptions,
    rng: &mut R,
) -> Result<Vec<SweepRow>> {
    let front = Vec3::new(0.0, 0.0, 1.0);
    let mut rows = Vec::new();
    for &dev in deviations {
        if side_targets.iter().any(|t| dev > t.angle_deg(front)) {
            warn!("deviation {dev}° passes the camera axis; sweep truncated");
            break;
        }
        let targets = [front, rotate_toward(side_targets[0], front, dev), rotate_toward(side_targets[1], front, dev)];
        let sel = select_lights_by_direction(&obj.directions, &targets)?;
        if sel.distances.iter().any(|&d| d > SWEEP_MAX_GAP) {
            warn!("no light within {SWEEP_MAX_GAP}° of the targets at deviation {dev}°; sweep truncated");
            break;
        }
        let slots = [(0, sel.indices[0]), (1, sel.indices[1]), (3, sel.indices[2])];
        let mae = run_selection(obj, model, &slots, opts, rng)?;
        let achieved = (1..3).map(|k| obj.directions[sel.indices[k]].angle_deg(side_targets[k - 1])).sum::<f64>() / 2.0;
        rows.push(SweepRow { deviation: dev, achieved, indices: sel.indices, mae });
    }
    Ok(rows)
}

/// Three-light protocol at each intensity noise level.
pub fn sweep_intensity<R: Rng + ?Sized>(
    obj: &PsObject,
    model: &dyn NormalModel,
    lights: &[(usize, Vec3)],
    sigmas: &[f64],
    exposure: Option<f32>,
    rng: &mut R,
) -> Result<Vec<EvalRecord>> {
    sigmas.iter().map(|&sigma| evaluate_lights(obj, model, lights, ProtocolOptions { exposure, sigma }, rng)).collect()
}

/// Writes `object,n_images,deviation,sigma,MAE` rows; MAE to one decimal.
pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in records {
        let row = EvalRecord { mae: (r.mae * 10.0).round() / 10.0, ..r.clone() };
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(w: usize, f: impl Fn(usize) -> [f32; 3]) -> Image {
        let mut img = Image::zeros(w, 1, 3);
        for i in 0..w {
            for (c, v) in f(i).iter().enumerate() {
                img.set(c, 0, i, *v);
            }
        }
        img
    }

    #[test]
    fn mae_examples() {
        let mask = Image::filled(4, 1, 1, 1.0);
        let up = field(4, |_| [0.0, 0.0, 1.0]);
        assert_eq!(mean_angular_error(&up, &up, &mask).unwrap(), 0.0);
        let side = field(4, |_| [1.0, 0.0, 0.0]);
        assert!((mean_angular_error(&side, &up, &mask).unwrap() - 90.0).abs() < 1e-9);
        let t = 10f32.to_radians();
        let half = field(4, |i| if i < 2 { [0.0, 0.0, 1.0] } else { [t.sin(), 0.0, t.cos()] });
        assert!((mean_angular_error(&half, &up, &mask).unwrap() - 5.0).abs() < 1e-4);
        assert!(mean_angular_error(&up, &up, &Image::zeros(4, 1, 1)).is_err());
    }

    #[test]
    fn selection_examples() {
        let fan: Vec<Vec3> = (-12..=12).map(|k| Vec3::from_azimuth_elevation(5.0 * k as f64, 0.0)).collect();
        let targets = [Vec3::from_azimuth_elevation(47.0, 0.0), Vec3::from_azimuth_elevation(-44.0, 0.0)];
        let sel = select_lights_by_direction(&fan, &targets).unwrap();
        assert_eq!(sel.indices, vec![21, 3]);
        assert!((sel.distances[0] - 2.0).abs() < 1e-9 && (sel.distances[1] - 1.0).abs() < 1e-9);

        let one = [Vec3::new(0.0, 0.0, 1.0)];
        let far = select_lights_by_direction(&one, &[Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(far.indices, vec![0]);
        assert!((far.distances[0] - 90.0).abs() < 1e-9);
        assert!(select_lights_by_direction(&one, &[one[0], one[0]]).is_err());

        // Same target twice: the second gets the next-nearest light.
        let twice = select_lights_by_direction(&fan, &[fan[5], fan[5]]).unwrap();
        assert_eq!(twice.indices[0], 5);
        assert!(twice.indices[1] == 4 || twice.indices[1] == 6);
        assert_eq!(twice.indices[1], 4, "ties go to the lowest index");
    }

    #[test]
    fn zero_sigma_is_plain_tonemapping() {
        let img = Image::from_data(2, 1, 3, vec![0.1, 0.5, 0.0, 2.0, 0.18, 0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = perturb_intensity(std::slice::from_ref(&img), 0.0, &mut rng).unwrap();
        assert_eq!(out[0].data, tonemap_srgb(&img).data);
    }

    #[test]
    fn intensity_scalars_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = intensity_scalars(10_000, 0.4, &mut rng).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!(intensity_scalars(1, -0.1, &mut rng).is_err());
    }

    #[test]
    fn rotate_toward_moves_by_angle() {
        let front = Vec3::new(0.0, 0.0, 1.0);
        let v = Vec3::from_azimuth_elevation(45.0, 0.0);
        let r = rotate_toward(v, front, 10.0);
        assert!((r.angle_deg(v) - 10.0).abs() < 1e-9);
        assert!((r.angle_deg(front) - 35.0).abs() < 1e-9);
    }

    #[test]
    fn light_lists() {
        let l = parse_light_list("front,front-left,front-right").unwrap();
        assert_eq!(l.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 3, 1]);
        assert!(parse_light_list("front-left").is_err());
        assert!(parse_light_list("front,back").is_err());
    }
}
