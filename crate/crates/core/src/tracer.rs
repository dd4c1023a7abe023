//! Ray queries against a [`SceneSpec`]: analytic intersection for the base
//! primitives and sphere tracing inside a thin shell for displaced surfaces.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use crate::brdf::{BrdfParams, Rgb};
use crate::math::{rotate, Vec3};
use crate::raster::Image;
use crate::scene::{Material, Primitive, PrimitiveKind, SceneSpec, Texture};

const MAX_MARCH_STEPS: usize = 600;

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Which surface a ray hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Primitive(usize),
    Floor,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub surface: Surface,
}

struct Prepared {
    kind: PrimitiveKind,
    center: Vec3,
    axes: [Vec3; 3],
    half: Vec3,
    shell: f64,
    lipschitz: f64,
    min_half: f64,
    bands: Vec<crate::scene::Band>,
}

impl Prepared {
    fn new(p: &Primitive) -> Self {
        let axis = if p.rotation_axis.length() > 0.0 { p.rotation_axis.normalize() } else { Vec3::Y };
        let axes = [Vec3::X, Vec3::Y, Vec3::Z].map(|a| rotate(a, axis, p.rotation_angle));
        let mut half = p.half_extents;
        if p.kind == PrimitiveKind::Cylinder {
            half.z = half.x;
        }
        let min_half = half.x.min(half.y).min(half.z);
        let disp = p.max_displacement();
        // Gradient bound of the displacement in world units, plus slack for the
        // approximate ellipsoid distance.
        let grad: f64 = p.bands.iter().map(|b| b.amplitude.abs() * PI * b.frequency).sum();
        let slack = if p.kind == PrimitiveKind::Ellipsoid {
            half.max_elem() / min_half
        } else {
            1.0
        };
        Prepared {
            kind: p.kind,
            center: p.center,
            axes,
            half,
            shell: if disp > 0.0 { 1.5 * disp + 1e-9 } else { 0.0 },
            lipschitz: (1.0 + grad) * slack,
            min_half,
            bands: p.bands.clone(),
        }
    }

    #[inline]
    fn to_local(&self, v: Vec3) -> Vec3 {
        Vec3::new(v.dot(self.axes[0]), v.dot(self.axes[1]), v.dot(self.axes[2]))
    }

    #[inline]
    fn to_world(&self, v: Vec3) -> Vec3 {
        self.axes[0] * v.x + self.axes[1] * v.y + self.axes[2] * v.z
    }

    fn displaced(&self) -> bool {
        self.shell > 0.0
    }

    /// Distance-like function of the base shape in the local frame.
    fn base_sdf(&self, p: Vec3) -> f64 {
        let h = self.half;
        match self.kind {
            PrimitiveKind::Cube => {
                let q = p.abs() - h;
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).length();
                outside + q.max_elem().min(0.0)
            }
            PrimitiveKind::Ellipsoid => {
                let k0 = p.div_elem(h).length();
                let k1 = p.div_elem(h.mul_elem(h)).length();
                if k1 == 0.0 {
                    -h.x.min(h.y).min(h.z)
                } else {
                    k0 * (k0 - 1.0) / k1
                }
            }
            PrimitiveKind::Cylinder => {
                let dx = (p.x * p.x + p.z * p.z).sqrt() - h.x;
                let dy = p.y.abs() - h.y;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dx.max(dy).min(0.0)
            }
        }
    }

    fn displacement(&self, local: Vec3) -> f64 {
        let unit = local.div_elem(self.half);
        self.bands
            .iter()
            .map(|b| b.amplitude * (PI * b.frequency * b.direction.dot(unit) + b.phase).sin())
            .sum::<f64>()
            * self.min_half
    }

    fn sdf(&self, local: Vec3) -> f64 {
        self.base_sdf(local) - self.displacement(local)
    }

    /// Entry/exit parameters of a local ray against the base shape grown by `grow`.
    fn slab(&self, o: Vec3, d: Vec3, grow: f64) -> Option<(f64, f64)> {
        let h = self.half + Vec3::splat(grow);
        match self.kind {
            PrimitiveKind::Cube => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for (oi, di, hi) in [(o.x, d.x, h.x), (o.y, d.y, h.y), (o.z, d.z, h.z)] {
                    if di.abs() < 1e-300 {
                        if oi.abs() > hi {
                            return None;
                        }
                    } else {
                        let (a, b) = ((-hi - oi) / di, (hi - oi) / di);
                        t0 = t0.max(a.min(b));
                        t1 = t1.min(a.max(b));
                    }
                }
                (t0 <= t1).then_some((t0, t1))
            }
            PrimitiveKind::Ellipsoid => {
                let os = o.div_elem(h);
                let ds = d.div_elem(h);
                quadratic(ds.dot(ds), 2.0 * os.dot(ds), os.dot(os) - 1.0)
            }
            PrimitiveKind::Cylinder => {
                let a = d.x * d.x + d.z * d.z;
                let (mut t0, mut t1) = if a < 1e-300 {
                    if o.x * o.x + o.z * o.z > h.x * h.x {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    quadratic(a, 2.0 * (o.x * d.x + o.z * d.z), o.x * o.x + o.z * o.z - h.x * h.x)?
                };
                if d.y.abs() < 1e-300 {
                    if o.y.abs() > h.y {
                        return None;
                    }
                } else {
                    let (a, b) = ((-h.y - o.y) / d.y, (h.y - o.y) / d.y);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 <= t1).then_some((t0, t1))
            }
        }
    }

    fn analytic_normal(&self, p: Vec3) -> Vec3 {
        let h = self.half;
        match self.kind {
            PrimitiveKind::Ellipsoid => p.div_elem(h.mul_elem(h)).normalize(),
            PrimitiveKind::Cube => {
                let q = p.div_elem(h).abs();
                if q.x >= q.y && q.x >= q.z {
                    Vec3::new(p.x.signum(), 0.0, 0.0)
                } else if q.y >= q.z {
                    Vec3::new(0.0, p.y.signum(), 0.0)
                } else {
                    Vec3::new(0.0, 0.0, p.z.signum())
                }
            }
            PrimitiveKind::Cylinder => {
                let radial = (p.x * p.x + p.z * p.z).sqrt();
                if (p.y.abs() - h.y).abs() * h.x < (radial - h.x).abs() * h.y {
                    Vec3::new(0.0, p.y.signum(), 0.0)
                } else {
                    Vec3::new(p.x, 0.0, p.z).normalize()
                }
            }
        }
    }

    fn gradient_normal(&self, p: Vec3) -> Vec3 {
        let e = 1e-6 * self.min_half;
        let g = Vec3::new(
            self.sdf(p + Vec3::X * e) - self.sdf(p - Vec3::X * e),
            self.sdf(p + Vec3::Y * e) - self.sdf(p - Vec3::Y * e),
            self.sdf(p + Vec3::Z * e) - self.sdf(p - Vec3::Z * e),
        );
        if g.length() > 0.0 {
            g.normalize()
        } else {
            self.analytic_normal(p)
        }
    }

    /// Nearest hit in `(t_min, t_max)` as `(t, local point)`.
    fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<(f64, Vec3)> {
        let o = self.to_local(ray.origin - self.center);
        let d = self.to_local(ray.dir);
        if !self.displaced() {
            let (t0, t1) = self.slab(o, d, 0.0)?;
            let t = if t0 > t_min { t0 } else { t1 };
            return (t > t_min && t < t_max).then(|| (t, o + d * t));
        }
        let (t0, t1) = self.slab(o, d, self.shell)?;
        let mut t = t0.max(t_min);
        let end = t1.min(t_max);
        if t >= end {
            return None;
        }
        let tol = 1e-9 * self.min_half.max(1e-6);
        let min_step = 1e-4 * self.min_half;
        let mut prev_t = t;
        let mut prev_g = self.sdf(o + d * t);
        if prev_g <= 0.0 {
            // Starting inside the displaced surface (only for rays leaving it):
            // march until outside, then keep looking for the next entry.
            let mut steps = 0;
            while prev_g <= 0.0 && t < end && steps < MAX_MARCH_STEPS {
                t += (-prev_g / self.lipschitz).max(min_step);
                prev_g = self.sdf(o + d * t);
                steps += 1;
            }
            prev_t = t;
            if t >= end {
                return None;
            }
        }
        for _ in 0..MAX_MARCH_STEPS {
            let g = self.sdf(o + d * t);
            if g <= 0.0 {
                return Some(self.bisect(o, d, prev_t, t, tol));
            }
            if g < tol {
                return Some((t, o + d * t));
            }
            prev_t = t;
            t += (g / self.lipschitz).max(min_step);
            if t > end {
                // Catch a crossing skipped by the final step.
                let ge = self.sdf(o + d * end);
                return (ge <= 0.0).then(|| self.bisect(o, d, prev_t, end, tol));
            }
        }
        None
    }

    fn bisect(&self, o: Vec3, d: Vec3, mut lo: f64, mut hi: f64, tol: f64) -> (f64, Vec3) {
        for _ in 0..80 {
            if hi - lo < tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.sdf(o + d * mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (hi, o + d * hi)
    }
}

fn quadratic(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let q = -0.5 * (b + b.signum() * s);
    let (r0, r1) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
    Some((r0.min(r1), r0.max(r1)))
}

/// Ray-query structure built once per scene.
pub struct Tracer<'a> {
    pub scene: &'a SceneSpec,
    prims: Vec<Prepared>,
    bounds: Vec<(Vec3, f64)>,
    textures: HashMap<PathBuf, Image>,
}

impl<'a> Tracer<'a> {
    pub fn new(scene: &'a SceneSpec) -> Self {
        let prims: Vec<Prepared> = scene.primitives.iter().map(Prepared::new).collect();
        let bounds = scene
            .primitives
            .iter()
            .zip(&prims)
            .map(|(p, q)| (p.center, q.half.length() + q.shell + 1e-9))
            .collect();
        let mut textures = HashMap::new();
        let materials = scene.primitives.iter().map(|p| &p.material).chain([&scene.floor.material]);
        for m in materials {
            if let Texture::Image { path, .. } = &m.texture {
                if !textures.contains_key(path) {
                    match crate::io::read_rgb(path) {
                        Ok(img) => {
                            textures.insert(path.clone(), img);
                        }
                        Err(e) => log::warn!("texture {} unavailable: {e}", path.display()),
                    }
                }
            }
        }
        Tracer { scene, prims, bounds, textures }
    }

    /// Primary ray through the center of pixel `(row, col)` at `res`² pixels,
    /// with an optional sub-pixel offset in pixel units.
    pub fn camera_ray(&self, res: usize, row: usize, col: usize, offset: (f64, f64)) -> Ray {
        let cam = &self.scene.camera;
        let px = cam.view_size / res as f64;
        let x = (col as f64 + offset.0 - res as f64 / 2.0) * px;
        let y = (res as f64 / 2.0 - row as f64 - offset.1) * px;
        let back = 4.0 * (cam.view_size + cam.target.length()) + 10.0;
        Ray {
            origin: cam.target + cam.to_camera() * back + cam.right() * x + cam.up() * y,
            dir: cam.forward(),
        }
    }

    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<Hit> {
        let mut best: Option<(f64, usize, Vec3)> = None;
        for (i, prim) in self.prims.iter().enumerate() {
            let limit = best.map_or(t_max, |b| b.0);
            let (c, r) = self.bounds[i];
            let oc = ray.origin - c;
            let b = oc.dot(ray.dir);
            let disc = b * b - (oc.dot(oc) - r * r);
            if disc < 0.0 || -b + disc.sqrt() < t_min || -b - disc.sqrt() > limit {
                continue;
            }
            if let Some((t, local)) = prim.intersect(ray, t_min, limit) {
                best = Some((t, i, local));
            }
        }
        let floor_t = self.floor_hit(ray, t_min, best.map_or(t_max, |b| b.0));
        match (best, floor_t) {
            (_, Some(t)) => Some(Hit { t, point: ray.at(t), normal: Vec3::Y, surface: Surface::Floor }),
            (Some((t, i, local)), None) => {
                let prim = &self.prims[i];
                let n_local = if prim.displaced() {
                    prim.gradient_normal(local)
                } else {
                    prim.analytic_normal(local)
                };
                let mut normal = prim.to_world(n_local).normalize();
                if normal.dot(ray.dir) > 0.0 && !prim.displaced() {
                    normal = -normal;
                }
                Some(Hit { t, point: ray.at(t), normal, surface: Surface::Primitive(i) })
            }
            (None, None) => None,
        }
    }

    fn floor_hit(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        if ray.dir.y.abs() < 1e-300 {
            return None;
        }
        let t = -ray.origin.y / ray.dir.y;
        if t <= t_min || t >= t_max {
            return None;
        }
        let p = ray.at(t);
        let f = &self.scene.floor;
        (p.x.abs() <= f.half_x && p.z.abs() <= f.half_z).then_some(t)
    }

    /// True when nothing blocks the path from `hit` toward `light_dir`.
    pub fn visible(&self, hit: &Hit, light_dir: Vec3) -> bool {
        let eps = 1e-6 * (self.scene.camera.view_size + 1.0);
        let ray = Ray { origin: hit.point + hit.normal * eps, dir: light_dir };
        self.intersect(&ray, eps, f64::INFINITY).is_none()
    }

    pub fn material(&self, surface: Surface) -> &Material {
        match surface {
            Surface::Floor => &self.scene.floor.material,
            Surface::Primitive(i) => &self.scene.primitives[i].material,
        }
    }

    /// Shading parameters at a hit: texture lookup, jitter, clamp.
    pub fn brdf_at(&self, hit: &Hit) -> BrdfParams {
        let material = self.material(hit.surface);
        let coord = match hit.surface {
            Surface::Floor => hit.point * 0.5,
            Surface::Primitive(i) => {
                let prim = &self.prims[i];
                prim.to_local(hit.point - prim.center).div_elem(prim.half)
            }
        };
        let base = self.texture_value(&material.texture, coord);
        let albedo = base.mul_elem(material.jitter).map(|v| v.clamp(0.0, 1.0));
        BrdfParams {
            albedo,
            roughness: material.roughness.clamp(1e-4, 1.0),
            f0: material.f0,
        }
    }

    fn texture_value(&self, texture: &Texture, p: Vec3) -> Rgb {
        match texture {
            Texture::Constant { color } => *color,
            Texture::Smooth { base, waves } => {
                let mut c = *base;
                for w in waves {
                    c += w.amplitude * (2.0 * PI * w.frequency.dot(p) + w.phase).sin();
                }
                c
            }
            Texture::Patches { seeds, colors } => {
                let nearest = seeds
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (*a.1 - p).length().total_cmp(&(*b.1 - p).length()))
                    .map_or(0, |(i, _)| i);
                colors.get(nearest).copied().unwrap_or(Vec3::splat(0.5))
            }
            Texture::Image { path, tiles } => match self.textures.get(path) {
                None => Vec3::splat(0.5),
                Some(img) => {
                    let u = (p.x * 0.5 + 0.5) * tiles;
                    let v = (p.y * 0.5 + 0.5 + p.z * 0.5) * tiles;
                    let fx = u.rem_euclid(1.0) * img.width as f64;
                    let fy = v.rem_euclid(1.0) * img.height as f64;
                    Vec3::new(
                        img.sample_bilinear(0, fy, fx) as f64,
                        img.sample_bilinear(1, fy, fx) as f64,
                        img.sample_bilinear(2, fy, fx) as f64,
                    )
                }
            },
        }
    }
}

/// Fraction of a `res`² frame covered by primitives.
pub fn coverage(scene: &SceneSpec, res: usize) -> f64 {
    let tracer = Tracer::new(scene);
    let mut hits = 0;
    for row in 0..res {
        for col in 0..res {
            let ray = tracer.camera_ray(res, row, col, (0.5, 0.5));
            if let Some(h) = tracer.intersect(&ray, 0.0, f64::INFINITY) {
                if matches!(h.surface, Surface::Primitive(_)) {
                    hits += 1;
                }
            }
        }
    }
    hits as f64 / (res * res) as f64
}
