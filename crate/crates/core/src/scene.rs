//! Procedural scenes: primitive composites on a floor, randomized materials,
//! an orthographic camera and the six-slot light rig.

use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::brdf::{Rgb, DEFAULT_F0};
use crate::error::{Error, Result};
use crate::math::Vec3;

/// Median of the Phong-exponent distribution used for roughness sampling.
pub const PHONG_MEDIAN: f64 = 80.0;

pub const NUM_SLOTS: usize = 6;

/// Human-readable names of the light slots, in slot order.
pub const SLOT_NAMES: [&str; NUM_SLOTS] =
    ["front", "front-right", "right", "front-left", "left", "above"];

/// Nominal azimuths (degrees, positive toward camera-right) of slots 1..=4.
pub const SIDE_AZIMUTHS: [f64; 4] = [45.0, 90.0, -45.0, -90.0];
pub const SIDE_ELEVATION: f64 = 25.0;
pub const SIDE_PERTURBATION: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Cube,
    Ellipsoid,
    Cylinder,
}

/// One sinusoidal displacement band along the surface normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    /// Unit direction in the primitive's normalized frame.
    pub direction: Vec3,
    /// Cycles across the object's normalized extent.
    pub frequency: f64,
    /// Peak displacement as a fraction of the smallest half-extent.
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Texture {
    Constant { color: Rgb },
    /// Base color plus a few smooth 3-D sinusoids.
    Smooth { base: Rgb, waves: Vec<Wave> },
    /// Piecewise-constant cells around seed points.
    Patches { seeds: Vec<Vec3>, colors: Vec<Rgb> },
    /// Planar projection of an 8-bit image file.
    Image { path: PathBuf, tiles: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub frequency: Vec3,
    pub phase: f64,
    pub amplitude: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub texture: Texture,
    /// Per-channel multiplicative jitter applied to the texture.
    pub jitter: Rgb,
    pub roughness: f64,
    pub f0: f64,
}

impl Material {
    pub fn uniform(albedo: Rgb, roughness: f64) -> Self {
        Material {
            texture: Texture::Constant { color: albedo },
            jitter: Vec3::splat(1.0),
            roughness,
            f0: DEFAULT_F0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: Vec3,
    pub rotation_axis: Vec3,
    pub rotation_angle: f64,
    /// Half-extents along the local axes (cylinder: radius = x = z, half-height = y).
    pub half_extents: Vec3,
    pub bands: Vec<Band>,
    pub material: Material,
}

impl Primitive {
    pub fn max_displacement(&self) -> f64 {
        let s = self.half_extents.x.min(self.half_extents.y).min(self.half_extents.z);
        self.bands.iter().map(|b| b.amplitude.abs()).sum::<f64>() * s
    }
}

/// Axis-aligned floor rectangle in the x-z plane at y = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Floor {
    pub half_x: f64,
    pub half_z: f64,
    pub material: Material,
}

/// Orthographic camera whose optical axis lies in the y-z plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub elevation_deg: f64,
    pub target: Vec3,
    /// World-space width (and height) covered by the image.
    pub view_size: f64,
}

impl Camera {
    /// Unit vector from the scene toward the camera.
    pub fn to_camera(&self) -> Vec3 {
        Vec3::from_azimuth_elevation(0.0, self.elevation_deg)
    }

    pub fn forward(&self) -> Vec3 {
        -self.to_camera()
    }

    pub fn right(&self) -> Vec3 {
        Vec3::X
    }

    pub fn up(&self) -> Vec3 {
        let e = self.elevation_deg.to_radians();
        Vec3::new(0.0, e.cos(), -e.sin())
    }

    /// World direction to camera space (x right, y up, z toward the camera).
    pub fn world_to_camera(&self, v: Vec3) -> Vec3 {
        Vec3::new(v.dot(self.right()), v.dot(self.up()), v.dot(self.to_camera()))
    }

    pub fn camera_to_world(&self, v: Vec3) -> Vec3 {
        self.right() * v.x + self.up() * v.y + self.to_camera() * v.z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub floor: Floor,
    pub camera: Camera,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.primitives.len();
        if !(1..=9).contains(&n) {
            return Err(Error::InvalidInput(format!("{n} primitives (expected 1..=9)")));
        }
        let e = self.camera.elevation_deg;
        if !(10.0..=45.0).contains(&e) {
            return Err(Error::InvalidInput(format!("camera elevation {e} outside [10, 45]")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Unit vector from the surface toward the light.
    pub direction: Vec3,
    pub intensity: f64,
}

/// Six directional lights in fixed slot order (see [`SLOT_NAMES`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightRig {
    pub lights: Vec<Light>,
}

impl LightRig {
    /// Lights at their nominal positions: side lights at 25° elevation and
    /// the overhead light straight up.
    pub fn nominal(camera: &Camera) -> LightRig {
        let mut lights = vec![Light { direction: camera.to_camera(), intensity: 1.0 }];
        for az in SIDE_AZIMUTHS {
            lights.push(Light {
                direction: Vec3::from_azimuth_elevation(az, SIDE_ELEVATION),
                intensity: 1.0,
            });
        }
        lights.push(Light { direction: Vec3::Y, intensity: 1.0 });
        LightRig { lights }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub max_bands: usize,
    pub min_frequency: f64,
    pub max_frequency: f64,
    pub max_amplitude: f64,
    /// Fraction of the frame spanned by the object's bounding sphere.
    pub min_fill: f64,
    pub max_fill: f64,
    pub texture_dir: Option<PathBuf>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            min_primitives: 1,
            max_primitives: 9,
            max_bands: 4,
            min_frequency: 1.0,
            max_frequency: 16.0,
            max_amplitude: 0.05,
            min_fill: 0.4,
            max_fill: 0.8,
            texture_dir: None,
        }
    }
}

impl SceneConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("scene config: {e}")))
    }
}

/// Where albedo textures come from.
#[derive(Clone, Debug)]
pub enum TextureSource {
    Procedural,
    Directory(Vec<PathBuf>),
}

impl TextureSource {
    pub fn from_config(config: &SceneConfig) -> Result<Self> {
        match &config.texture_dir {
            None => Ok(TextureSource::Procedural),
            Some(dir) => TextureSource::scan(dir),
        }
    }

    pub fn scan(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Ok(TextureSource::Procedural);
        }
        Ok(TextureSource::Directory(files))
    }
}

/// Beckmann-equivalent roughness of a Phong exponent: `sqrt(2 / (2 + E))`.
pub fn phong_to_beckmann(exponent: f64) -> f64 {
    (2.0 / (2.0 + exponent.max(0.0))).sqrt()
}

/// Phong exponent drawn from an exponential distribution with median 80.
pub fn sample_phong_exponent<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Exp::new(LN_2 / PHONG_MEDIAN).expect("positive rate").sample(rng)
}

pub fn sample_roughness<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    phong_to_beckmann(sample_phong_exponent(rng))
}

/// Per-channel multiplicative jitter ~ N(1, 0.2).
pub fn sample_jitter<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    let n = Normal::new(1.0, 0.2).expect("valid normal");
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    Vec3::new(rng.random(), rng.random(), rng.random())
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

fn procedural_texture<R: Rng + ?Sized>(rng: &mut R) -> Texture {
    match rng.random_range(0..3) {
        0 => Texture::Constant { color: random_color(rng) },
        1 => {
            let base = random_color(rng) * 0.6 + Vec3::splat(0.2);
            let waves = (0..rng.random_range(1..=3))
                .map(|_| Wave {
                    frequency: random_unit(rng) * rng.random_range(0.5..4.0),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amplitude: random_color(rng) * 0.25,
                })
                .collect();
            Texture::Smooth { base, waves }
        }
        _ => {
            let n = rng.random_range(2..=6);
            let seeds = (0..n).map(|_| random_unit(rng) * rng.random_range(0.0..1.0)).collect();
            let colors = (0..n).map(|_| random_color(rng)).collect();
            Texture::Patches { seeds, colors }
        }
    }
}

/// Draws a texture (directory image or procedural) and its channel jitter.
/// Unreadable directory images are skipped; after a bounded number of
/// failures the procedural generator is used.
pub fn sample_albedo<R: Rng + ?Sized>(rng: &mut R, source: &TextureSource) -> (Texture, Rgb) {
    let texture = match source {
        TextureSource::Procedural => procedural_texture(rng),
        TextureSource::Directory(files) => {
            let mut chosen = None;
            for _ in 0..8 {
                let path = &files[rng.random_range(0..files.len())];
                if image::ImageReader::open(path)
                    .ok()
                    .and_then(|r| r.with_guessed_format().ok())
                    .and_then(|r| r.into_dimensions().ok())
                    .is_some()
                {
                    chosen = Some(path.clone());
                    break;
                }
                log::warn!("skipping unreadable texture {}", path.display());
            }
            match chosen {
                Some(path) => Texture::Image { path, tiles: rng.random_range(0.5..2.0) },
                None => procedural_texture(rng),
            }
        }
    };
    (texture, sample_jitter(rng))
}

pub fn sample_material<R: Rng + ?Sized>(rng: &mut R, source: &TextureSource) -> Material {
    let (texture, jitter) = sample_albedo(rng, source);
    Material { texture, jitter, roughness: sample_roughness(rng), f0: DEFAULT_F0 }
}

fn sample_bands<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Vec<Band> {
    if config.max_bands == 0 {
        return Vec::new();
    }
    let (lo, hi) = (config.min_frequency.ln(), config.max_frequency.ln());
    (0..rng.random_range(1..=config.max_bands))
        .map(|_| Band {
            direction: random_unit(rng),
            frequency: if hi > lo { rng.random_range(lo..hi).exp() } else { lo.exp() },
            amplitude: rng.random_range(0.0..=config.max_amplitude),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect()
}

fn sample_primitive<R: Rng + ?Sized>(
    rng: &mut R,
    config: &SceneConfig,
    source: &TextureSource,
) -> Primitive {
    let kind = match rng.random_range(0..3) {
        0 => PrimitiveKind::Cube,
        1 => PrimitiveKind::Ellipsoid,
        _ => PrimitiveKind::Cylinder,
    };
    let mut half_extents = Vec3::new(
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
    );
    if kind == PrimitiveKind::Cylinder {
        half_extents.z = half_extents.x;
    }
    let center = Vec3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.5..0.5),
    );
    Primitive {
        kind,
        center,
        rotation_axis: random_unit(rng),
        rotation_angle: rng.random_range(0.0..2.0 * PI),
        half_extents,
        bands: sample_bands(rng, config),
        material: sample_material(rng, source),
    }
}

/// Bounding sphere (center, radius) of all primitives including displacement.
pub fn bounding_sphere(primitives: &[Primitive]) -> (Vec3, f64) {
    let lo = primitives.iter().fold(Vec3::splat(f64::INFINITY), |acc, p| {
        let r = p.half_extents.length() + p.max_displacement();
        Vec3::new(acc.x.min(p.center.x - r), acc.y.min(p.center.y - r), acc.z.min(p.center.z - r))
    });
    let hi = primitives.iter().fold(Vec3::splat(f64::NEG_INFINITY), |acc, p| {
        let r = p.half_extents.length() + p.max_displacement();
        Vec3::new(acc.x.max(p.center.x + r), acc.y.max(p.center.y + r), acc.z.max(p.center.z + r))
    });
    let c = (lo + hi) * 0.5;
    let radius = primitives
        .iter()
        .map(|p| (p.center - c).length() + p.half_extents.length() + p.max_displacement())
        .fold(0.0, f64::max);
    (c, radius)
}

/// Samples a composite of primitives resting on the floor, framed so that
/// the object's bounding sphere spans `min_fill..max_fill` of the image.
/// Retries (bounded) until a coarse render shows the object.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Result<SceneSpec> {
    let source = TextureSource::from_config(config)?;
    let mut last = None;
    for _ in 0..16 {
        let scene = sample_scene_once(rng, config, &source);
        let coverage = crate::tracer::coverage(&scene, 32);
        if coverage > 0.05 {
            return Ok(scene);
        }
        last = Some(scene);
    }
    Ok(last.expect("at least one attempt"))
}

fn sample_scene_once<R: Rng + ?Sized>(
    rng: &mut R,
    config: &SceneConfig,
    source: &TextureSource,
) -> SceneSpec {
    let lo = config.min_primitives.clamp(1, 9);
    let hi = config.max_primitives.clamp(lo, 9);
    let count = rng.random_range(lo..=hi);
    let mut primitives: Vec<Primitive> =
        (0..count).map(|_| sample_primitive(rng, config, source)).collect();

    // Rest the composite on the floor.
    let lowest = primitives
        .iter()
        .map(|p| p.center.y - p.half_extents.length() - p.max_displacement())
        .fold(f64::INFINITY, f64::min);
    for p in &mut primitives {
        p.center.y -= lowest;
    }
    let (center, radius) = bounding_sphere(&primitives);
    let fill = rng.random_range(config.min_fill..=config.max_fill);
    let camera = Camera {
        elevation_deg: rng.random_range(10.0..=45.0),
        target: center,
        view_size: 2.0 * radius / fill,
    };
    let floor = Floor {
        half_x: 40.0 * radius,
        half_z: 40.0 * radius,
        material: sample_material(rng, source),
    };
    SceneSpec { primitives, floor, camera }
}

/// Six lights: co-directional, four perturbed side lights, one overhead.
pub fn build_light_rig<R: Rng + ?Sized>(rng: &mut R, camera: &Camera) -> LightRig {
    let mut lights = vec![Light { direction: camera.to_camera(), intensity: 1.0 }];
    for az in SIDE_AZIMUTHS {
        let da = rng.random_range(-SIDE_PERTURBATION..=SIDE_PERTURBATION);
        let de = rng.random_range(-SIDE_PERTURBATION..=SIDE_PERTURBATION);
        lights.push(Light {
            direction: Vec3::from_azimuth_elevation(az + da, SIDE_ELEVATION + de),
            intensity: 1.0,
        });
    }
    let el = rng.random_range(80.0..=90.0);
    let az = rng.random_range(0.0..360.0);
    lights.push(Light { direction: Vec3::from_azimuth_elevation(az, el), intensity: 1.0 });
    LightRig { lights }
}

/// Scene plus rig as stored in a bundle's `scene.txt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub scene: SceneSpec,
    pub rig: LightRig,
}

impl SceneFile {
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("serializing scene: {e}")))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("parsing scene: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
