//! Orthographic depth from normal maps, triangulation and export.
//!
//! Conventions: columns grow to the right (`x`), rows grow downward, and
//! normals live in camera space with `y` pointing up. Depth `f` grows toward
//! the camera, so a surface `z = f(x, y)` has normal `∝ (-f_x, -f_y, 1)` with
//! `f_y` taken along the upward axis. Moving one row down therefore changes
//! depth by `-q`.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Image;

/// Smallest `n_z` used when converting normals to gradients.
pub const GRADIENT_EPS: f64 = 1e-3;
/// Default relative residual at which the solver stops.
pub const DEFAULT_TOLERANCE: f64 = 1e-8;

/// Per-pixel surface gradients `p = f_x`, `q = f_y` (y up).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub width: usize,
    pub height: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Pixels whose normal was too steep and got clamped.
    pub flagged: Vec<bool>,
}

/// Depth in pixel units over a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.mask[i].then(|| self.depth[i])
    }

    /// One-channel raster, zero outside the mask.
    pub fn to_image(&self) -> Image {
        let data = self.depth.iter().zip(&self.mask).map(|(&d, &m)| if m { d as f32 } else { 0.0 }).collect();
        Image::from_data(self.width, self.height, 1, data).expect("sizes agree")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    /// `(x, y, z)` with `y` up and `z` the depth.
    pub vertices: Vec<[f64; 3]>,
    /// Texture coordinates in `[0, 1]²`, one per vertex.
    pub uvs: Vec<[f64; 2]>,
    pub colors: Option<Vec<[f32; 3]>>,
    /// Counter-clockwise when seen from the camera.
    pub faces: Vec<[usize; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegrateOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions { tolerance: DEFAULT_TOLERANCE, max_iterations: 100_000 }
    }
}

fn mask_bits(mask: &Image) -> Vec<bool> {
    mask.plane(0).iter().map(|&m| m > 0.5).collect()
}

/// `p = -n_x / n_z`, `q = -n_y / n_z` on the mask (zero elsewhere). Pixels with
/// `n_z <= ε` use `n_z = ε` and have the gradient clamped to length `1/ε`.
pub fn normals_to_gradients(normals: &Image, mask: &Image) -> Result<Gradients> {
    if normals.channels != 3 || mask.channels != 1 || !normals.same_size(mask) {
        return Err(Error::Shape("expected a 3-channel normal map and a matching 1-channel mask".into()));
    }
    let n = normals.plane_len();
    let m = mask_bits(mask);
    let mut g = Gradients {
        width: normals.width,
        height: normals.height,
        p: vec![0.0; n],
        q: vec![0.0; n],
        flagged: vec![false; n],
    };
    for i in (0..n).filter(|&i| m[i]) {
        let (nx, ny, nz) = (normals.data[i] as f64, normals.data[n + i] as f64, normals.data[2 * n + i] as f64);
        let steep = nz <= GRADIENT_EPS;
        let z = if steep { GRADIENT_EPS } else { nz };
        let (mut p, mut q) = (-nx / z, -ny / z);
        if steep {
            let len = p.hypot(q);
            let cap = 1.0 / GRADIENT_EPS;
            if len > cap {
                p *= cap / len;
                q *= cap / len;
            }
            g.flagged[i] = true;
        }
        g.p[i] = p;
        g.q[i] = q;
    }
    Ok(g)
}

/// Labels 4-connected components of the mask; `None` outside.
pub fn components(mask: &[bool], width: usize, height: usize) -> (Vec<Option<usize>>, usize) {
    let mut label = vec![None; mask.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start].is_some() {
            continue;
        }
        label[start] = Some(count);
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / width, i % width);
            let mut nb = [None; 4];
            if c > 0 {
                nb[0] = Some(i - 1);
            }
            if c + 1 < width {
                nb[1] = Some(i + 1);
            }
            if r > 0 {
                nb[2] = Some(i - width);
            }
            if r + 1 < height {
                nb[3] = Some(i + width);
            }
            for j in nb.into_iter().flatten() {
                if mask[j] && label[j].is_none() {
                    label[j] = Some(count);
                    queue.push_back(j);
                }
            }
        }
        count += 1;
    }
    (label, count)
}

/// Edge targets of the difference system on a `width × height` grid.
/// `dx[i]` is the target of `f[i + 1] - f[i]` and `dy[i]` that of
/// `f[i + width] - f[i]` (one row down). Equations touching an unmasked pixel
/// or leaving the grid are dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSystem {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl EdgeSystem {
    /// Edge targets from pixel gradients, averaging the two endpoint samples.
    pub fn from_gradients(g: &Gradients, mask: &[bool]) -> Self {
        let (w, h) = (g.width, g.height);
        let mut dx = vec![0.0; w * h];
        let mut dy = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if c + 1 < w {
                    dx[i] = 0.5 * (g.p[i] + g.p[i + 1]);
                }
                if r + 1 < h {
                    dy[i] = -0.5 * (g.q[i] + g.q[i + w]);
                }
            }
        }
        EdgeSystem { width: w, height: h, mask: mask.to_vec(), dx, dy }
    }

    fn has_dx(&self, i: usize) -> bool {
        i % self.width + 1 < self.width && self.mask[i] && self.mask[i + 1]
    }

    fn has_dy(&self, i: usize) -> bool {
        i / self.width + 1 < self.height && self.mask[i] && self.mask[i + self.width]
    }

    pub fn equation_count(&self) -> usize {
        (0..self.mask.len()).map(|i| self.has_dx(i) as usize + self.has_dy(i) as usize).sum()
    }

    /// Residuals `A f - b` over all active equations, in a fixed order.
    pub fn residuals(&self, f: &[f64]) -> Vec<f64> {
        let w = self.width;
        let mut out = Vec::with_capacity(2 * f.len());
        for i in 0..self.mask.len() {
            if self.has_dx(i) {
                out.push(f[i + 1] - f[i] - self.dx[i]);
            }
            if self.has_dy(i) {
                out.push(f[i + w] - f[i] - self.dy[i]);
            }
        }
        out
    }

    /// Least-squares solve with zero mean per 4-connected component.
    pub fn solve(&self, opts: IntegrateOptions) -> Result<DepthMap> {
        let n = self.width * self.height;
        if self.mask.len() != n || self.dx.len() != n || self.dy.len() != n {
            return Err(Error::Shape("edge system buffers disagree with the grid size".into()));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("cannot integrate over an empty mask".into()));
        }
        let (labels, count) = components(&self.mask, self.width, self.height);
        let mut members = vec![Vec::new(); count];
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = l {
                members[*l].push(i);
            }
        }
        let mut depth = vec![0.0; n];
        for idx in &members {
            self.solve_component(idx, opts, &mut depth)?;
        }
        Ok(DepthMap { width: self.width, height: self.height, depth, mask: self.mask.clone() })
    }

    /// `Aᵀ b` restricted to the active equations.
    fn normal_rhs(&self) -> Vec<f64> {
        let w = self.width;
        let mut rhs = vec![0.0; self.mask.len()];
        for i in 0..self.mask.len() {
            if self.has_dx(i) {
                rhs[i + 1] += self.dx[i];
                rhs[i] -= self.dx[i];
            }
            if self.has_dy(i) {
                rhs[i + w] += self.dy[i];
                rhs[i] -= self.dy[i];
            }
        }
        rhs
    }

    fn solve_component(&self, idx: &[usize], opts: IntegrateOptions, depth: &mut [f64]) -> Result<()> {
        let m = idx.len();
        if m == 1 {
            depth[idx[0]] = 0.0;
            return Ok(());
        }
        let w = self.width;
        let mut local = vec![usize::MAX; self.mask.len()];
        for (k, &i) in idx.iter().enumerate() {
            local[i] = k;
        }
        // Laplacian neighbor lists (AᵀA = D - adjacency).
        let mut nbrs: Vec<[usize; 4]> = vec![[usize::MAX; 4]; m];
        let mut degree = vec![0usize; m];
        for (k, &i) in idx.iter().enumerate() {
            let mut push = |j: usize| {
                nbrs[k][degree[k]] = local[j];
                degree[k] += 1;
            };
            if self.has_dx(i) {
                push(i + 1);
            }
            if i % w > 0 && self.has_dx(i - 1) {
                push(i - 1);
            }
            if self.has_dy(i) {
                push(i + w);
            }
            if i >= w && self.has_dy(i - w) {
                push(i - w);
            }
        }
        let apply = |x: &[f64], y: &mut [f64]| {
            for k in 0..m {
                let mut s = degree[k] as f64 * x[k];
                for &j in &nbrs[k][..degree[k]] {
                    s -= x[j];
                }
                y[k] = s;
            }
        };
        let full_rhs = self.normal_rhs();
        let mut b: Vec<f64> = idx.iter().map(|&i| full_rhs[i]).collect();
        remove_mean(&mut b);
        let bnorm = norm(&b);
        let mut x = vec![0.0; m];
        if bnorm > 0.0 {
            let mut r = b.clone();
            let mut d = r.clone();
            let mut ad = vec![0.0; m];
            let mut rr = dot(&r, &r);
            let mut converged = false;
            for _ in 0..opts.max_iterations {
                if rr.sqrt() <= opts.tolerance * bnorm {
                    converged = true;
                    break;
                }
                apply(&d, &mut ad);
                let alpha = rr / dot(&d, &ad);
                for k in 0..m {
                    x[k] += alpha * d[k];
                    r[k] -= alpha * ad[k];
                }
                remove_mean(&mut r);
                let rr_new = dot(&r, &r);
                let beta = rr_new / rr;
                for k in 0..m {
                    d[k] = r[k] + beta * d[k];
                }
                rr = rr_new;
            }
            if !converged && rr.sqrt() > opts.tolerance * bnorm {
                return Err(Error::InvalidInput(format!(
                    "integration did not reach relative residual {} in {} iterations",
                    opts.tolerance, opts.max_iterations
                )));
            }
        }
        remove_mean(&mut x);
        for (k, &i) in idx.iter().enumerate() {
            depth[i] = x[k];
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn remove_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Depth whose forward differences best match the normals in least squares.
pub fn integrate_normals(normals: &Image, mask: &Image) -> Result<DepthMap> {
    integrate_normals_with(normals, mask, IntegrateOptions::default())
}

pub fn integrate_normals_with(normals: &Image, mask: &Image, opts: IntegrateOptions) -> Result<DepthMap> {
    let g = normals_to_gradients(normals, mask)?;
    let flagged = g.flagged.iter().filter(|&&f| f).count();
    if flagged > 0 {
        log::warn!("{flagged} pixels had n_z <= {GRADIENT_EPS} and were clamped");
    }
    EdgeSystem::from_gradients(&g, &mask_bits(mask)).solve(opts)
}

/// One vertex per masked pixel and two triangles per fully masked 2×2 quad.
pub fn depth_to_mesh(depth: &DepthMap, albedo: Option<&Image>) -> Result<Mesh> {
    let (w, h) = (depth.width, depth.height);
    if let Some(a) = albedo {
        if a.width != w || a.height != h || a.channels != 3 {
            return Err(Error::Shape("albedo must be 3-channel and match the depth map".into()));
        }
    }
    let mut index = vec![usize::MAX; w * h];
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut colors = albedo.map(|_| Vec::new());
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !depth.mask[i] {
                continue;
            }
            index[i] = vertices.len();
            vertices.push([c as f64, (h - 1 - r) as f64, depth.depth[i]]);
            uvs.push([(c as f64 + 0.5) / w as f64, 1.0 - (r as f64 + 0.5) / h as f64]);
            if let (Some(cols), Some(a)) = (colors.as_mut(), albedo) {
                cols.push([a.get(0, r, c), a.get(1, r, c), a.get(2, r, c)]);
            }
        }
    }
    let mut faces = Vec::new();
    for r in 0..h.saturating_sub(1) {
        for c in 0..w.saturating_sub(1) {
            let (tl, tr, bl, br) = (index[r * w + c], index[r * w + c + 1], index[(r + 1) * w + c], index[(r + 1) * w + c + 1]);
            if [tl, tr, bl, br].contains(&usize::MAX) {
                continue;
            }
            faces.push([tl, bl, br]);
            faces.push([tl, br, tr]);
        }
    }
    Ok(Mesh { vertices, uvs, colors, faces })
}

/// Writes `v` (with optional colors), `vt` and `f v/vt` records.
pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for (k, v) in mesh.vertices.iter().enumerate() {
            match &mesh.colors {
                Some(cols) => {
                    let c = cols[k];
                    writeln!(out, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2])?
                }
                None => writeln!(out, "v {} {} {}", v[0], v[1], v[2])?,
            }
        }
        for t in &mesh.uvs {
            writeln!(out, "vt {} {}", t[0], t[1])?;
        }
        for f in &mesh.faces {
            let [a, b, c] = f.map(|i| i + 1);
            writeln!(out, "f {a}/{a} {b}/{b} {c}/{c}")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
