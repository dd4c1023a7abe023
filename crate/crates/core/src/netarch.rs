//! InitNet, RecNet and the single-pass ResNet baseline, plus the recursive
//! coarse-to-fine driver.
//!
//! Every module is built from its layer string (`conv_k7_f64-BN-Relu-...`),
//! and the same strings fingerprint checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{normal_from_xy, MapSet};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Param, ResidualBlock, Sequential, Tape, Tensor};
use crate::raster::{is_pow2, Image};
use crate::render::ImageStack;

/// Image channels (six RGB slots) plus the mask.
pub const STACK_CHANNELS: usize = 19;
/// Stack channels plus the upsampled albedo, normal xy and roughness.
pub const REC_CHANNELS: usize = 25;
pub const MASK_CHANNEL: usize = 18;
pub const INIT_LEVEL: u32 = 5;
pub const INIT_RESOLUTION: usize = 1 << INIT_LEVEL;
pub const MIN_REC_LEVEL: u32 = 6;
pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_MAX_LEVEL: u32 = 10;

const CHECKPOINT_MAGIC: &[u8; 8] = b"HLWEIGHT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Albedo,
    Normal,
    Roughness,
}

impl MapKind {
    pub const ALL: [MapKind; 3] = [MapKind::Albedo, MapKind::Normal, MapKind::Roughness];

    /// Output channels of the module predicting this map.
    pub fn channels(self) -> usize {
        match self {
            MapKind::Albedo => 3,
            MapKind::Normal => 2,
            MapKind::Roughness => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Albedo => "albedo",
            MapKind::Normal => "normal",
            MapKind::Roughness => "roughness",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    Init,
    Rec,
    ResNet,
}

impl Arch {
    pub fn in_channels(self) -> usize {
        match self {
            Arch::Rec => REC_CHANNELS,
            Arch::Init | Arch::ResNet => STACK_CHANNELS,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Arch::Init => "init",
            Arch::Rec => "rec",
            Arch::ResNet => "resnet",
        }
    }
}

/// Layer string of one module with base feature width `w` and `c` outputs.
pub fn layer_string(arch: Arch, w: usize, c: usize) -> String {
    let (w2, w4) = (2 * w, 4 * w);
    match arch {
        Arch::Init => format!("conv_k7_f{w}-BN-Relu-Res_{w}-Res_{w}-conv_k7_f{c}"),
        Arch::Rec => format!(
            "conv_k7_f{w}-BN-Relu-Res_{w}-Res_{w}-conv_k3_f{w2}_s2-BN-Relu-Res_{w2}-Res_{w2}-\
             conv_k3_f{w4}_s2-Res_{w4}-Res_{w4}-convt_k3_f{w2}_s2-Res_{w2}-Res_{w2}-\
             convt_k3_f{w}_s2-BN-Relu-conv_k7_f{c}"
        ),
        Arch::ResNet => format!(
            "conv_k7_f{w}-BN-Relu-conv_k3_f{w2}_s2-BN-Relu-conv_k3_f{w4}_s2-BN-Relu-\
             Res_{w4}-Res_{w4}-Res_{w4}-Res_{w4}-convt_k3_f{w2}_s2-BN-Relu-convt_k3_f{w}_s2-BN-Relu-conv_k7_f{c}"
        ),
    }
}

fn parse_conv(tok: &str) -> Option<(bool, usize, usize, usize)> {
    let (transposed, rest) = if let Some(r) = tok.strip_prefix("convt_") {
        (true, r)
    } else {
        (false, tok.strip_prefix("conv_")?)
    };
    let mut parts = rest.split('_');
    let k = parts.next()?.strip_prefix('k')?.parse().ok()?;
    let f = parts.next()?.strip_prefix('f')?.parse().ok()?;
    let s = match parts.next() {
        Some(p) => p.strip_prefix('s')?.parse().ok()?,
        None => 1,
    };
    parts.next().is_none().then_some((transposed, k, f, s))
}

/// Builds a module from its layer string.
pub fn build_from_layer_string<R: Rng + ?Sized>(spec: &str, in_channels: usize, rng: &mut R) -> Result<Sequential> {
    let mut layers = Vec::new();
    let mut c = in_channels;
    for tok in spec.split('-') {
        let bad = || Error::InvalidInput(format!("bad layer token {tok:?}"));
        let layer = match tok {
            "BN" => Layer::Norm(BatchNorm2d::new(c)),
            "Relu" => Layer::Relu,
            t if t.starts_with("Res_") => {
                let n: usize = t[4..].parse().map_err(|_| bad())?;
                if n != c {
                    return Err(Error::Shape(format!("residual block width {n} after {c} channels")));
                }
                Layer::Residual(ResidualBlock::new(n, rng))
            }
            t => {
                let (transposed, k, f, s) = parse_conv(t).ok_or_else(bad)?;
                if transposed {
                    Layer::ConvT(ConvTranspose2d::new(c, f, k, s, rng))
                } else {
                    Layer::Conv(Conv2d::new(c, f, k, s, rng))
                }
            }
        };
        c = layer.out_channels(c);
        layers.push(layer);
    }
    Ok(Sequential::new(layers))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Feature width of the first stage; deeper stages use 2x and 4x.
    pub width: usize,
    /// Largest supported input side is `2^max_level`.
    pub max_level: u32,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { width: DEFAULT_WIDTH, max_level: DEFAULT_MAX_LEVEL }
    }
}

/// The albedo, normal and roughness modules of one network.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub arch: Arch,
    pub width: usize,
    pub modules: [Sequential; 3],
}

impl Triplet {
    pub fn new<R: Rng + ?Sized>(arch: Arch, width: usize, rng: &mut R) -> Self {
        let modules = MapKind::ALL.map(|kind| {
            build_from_layer_string(&layer_string(arch, width, kind.channels()), arch.in_channels(), rng)
                .expect("generated layer strings are well formed")
        });
        Triplet { arch, width, modules }
    }

    pub fn module(&self, kind: MapKind) -> &Sequential {
        &self.modules[kind as usize]
    }

    pub fn num_parameters(&self) -> usize {
        self.modules.iter().map(Sequential::num_parameters).sum()
    }

    pub fn layer_strings(&self) -> [String; 3] {
        MapKind::ALL.map(|k| layer_string(self.arch, self.width, k.channels()))
    }

    pub fn visit(&mut self, f: &mut crate::nn::layers::ParamVisitor<'_>) {
        let tag = self.arch.tag();
        for (kind, m) in MapKind::ALL.iter().zip(self.modules.iter_mut()) {
            m.visit(&format!("{tag}.{}", kind.name()), f);
        }
    }

    /// Eval-mode evaluation of all three modules.
    pub fn forward(&self, x: &Tensor) -> Maps {
        let raw = self.modules.each_ref().map(|m| m.forward(x));
        let [a, n, r] = raw;
        Maps { albedo: sigmoid(&a), normal: disk_clamp(&n), roughness: sigmoid(&r) }
    }

    fn forward_tape(&mut self, x: &Tensor, train: bool) -> (Maps, TripletTape) {
        let mut raw = Vec::with_capacity(3);
        let mut tapes = Vec::with_capacity(3);
        for m in &mut self.modules {
            let (y, t) = m.forward_tape(x.clone(), train);
            raw.push(y);
            tapes.push(t);
        }
        let maps = Maps { albedo: sigmoid(&raw[0]), normal: disk_clamp(&raw[1]), roughness: sigmoid(&raw[2]) };
        (maps.clone(), TripletTape { tapes, raw, out: maps })
    }

    /// Backpropagates gradients of the activated outputs; returns the input
    /// gradient when requested.
    fn backward(&mut self, tape: TripletTape, g: &Maps, input_grad: bool, param_grad: bool) -> Option<Tensor> {
        let mut total: Option<Tensor> = None;
        for ((kind, m), (t, raw)) in MapKind::ALL.iter().zip(self.modules.iter_mut()).zip(tape.tapes.into_iter().zip(&tape.raw)) {
            let gout = g.get(*kind);
            let graw = match kind {
                MapKind::Normal => disk_clamp_backward(raw, gout),
                _ => sigmoid_backward(tape.out.get(*kind), gout),
            };
            let gx = m.backward(t, graw, input_grad, param_grad);
            if input_grad {
                match &mut total {
                    Some(acc) => acc.add_assign(&gx),
                    None => total = Some(gx),
                }
            }
        }
        total
    }
}

struct TripletTape {
    tapes: Vec<Vec<Tape>>,
    raw: Vec<Tensor>,
    out: Maps,
}

/// Batched activated predictions: albedo (3), normal xy (2), roughness (1).
#[derive(Clone, Debug, PartialEq)]
pub struct Maps {
    pub albedo: Tensor,
    pub normal: Tensor,
    pub roughness: Tensor,
}

impl Maps {
    pub fn zeros(n: usize, size: usize) -> Self {
        Maps {
            albedo: Tensor::zeros([n, 3, size, size]),
            normal: Tensor::zeros([n, 2, size, size]),
            roughness: Tensor::zeros([n, 1, size, size]),
        }
    }

    pub fn get(&self, kind: MapKind) -> &Tensor {
        match kind {
            MapKind::Albedo => &self.albedo,
            MapKind::Normal => &self.normal,
            MapKind::Roughness => &self.roughness,
        }
    }

    pub fn get_mut(&mut self, kind: MapKind) -> &mut Tensor {
        match kind {
            MapKind::Albedo => &mut self.albedo,
            MapKind::Normal => &mut self.normal,
            MapKind::Roughness => &mut self.roughness,
        }
    }

    pub fn resolution(&self) -> usize {
        self.albedo.h()
    }

    pub fn batch(&self) -> usize {
        self.albedo.n()
    }

    /// Sample `i` as a [`MapSet`] with unit normals.
    pub fn to_mapset(&self, i: usize) -> MapSet {
        MapSet {
            normal: normal_from_xy(&self.normal.to_image(i)).expect("two channels"),
            albedo: self.albedo.to_image(i),
            roughness: self.roughness.to_image(i),
        }
    }

    pub fn from_mapsets(sets: &[&MapSet]) -> Result<Self> {
        let xy: Vec<Image> = sets.iter().map(|s| s.normal_xy()).collect();
        Ok(Maps {
            albedo: Tensor::from_images(&sets.iter().map(|s| &s.albedo).collect::<Vec<_>>())?,
            normal: Tensor::from_images(&xy.iter().collect::<Vec<_>>())?,
            roughness: Tensor::from_images(&sets.iter().map(|s| &s.roughness).collect::<Vec<_>>())?,
        })
    }
}

fn sigmoid(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
    y
}

fn sigmoid_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let mut out = g.clone();
    out.data.iter_mut().zip(&y.data).for_each(|(gv, &yv)| *gv *= yv * (1.0 - yv));
    out
}

/// Rescales `(x, y)` pairs lying outside the unit disk onto its boundary.
fn disk_clamp(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let p = x.plane();
    for i in 0..x.n() {
        let s = y.sample_mut(i);
        let (xs, ys) = s.split_at_mut(p);
        for (a, b) in xs.iter_mut().zip(ys.iter_mut()) {
            let r = (*a * *a + *b * *b).sqrt();
            if r > 1.0 {
                *a /= r;
                *b /= r;
            }
        }
    }
    y
}

fn disk_clamp_backward(raw: &Tensor, g: &Tensor) -> Tensor {
    let mut out = g.clone();
    let p = raw.plane();
    for i in 0..raw.n() {
        let (rx, ry) = raw.sample(i).split_at(p);
        let (gx, gy) = out.sample_mut(i).split_at_mut(p);
        for j in 0..p {
            let r = (rx[j] * rx[j] + ry[j] * ry[j]).sqrt();
            if r > 1.0 {
                let (ux, uy) = (rx[j] / r, ry[j] / r);
                let d = ux * gx[j] + uy * gy[j];
                gx[j] = (gx[j] - ux * d) / r;
                gy[j] = (gy[j] - uy * d) / r;
            }
        }
    }
    out
}

/// Saved state of the previous-level upsampling.
struct UpTape {
    /// Unit normals at the coarse level.
    coarse: Tensor,
    /// Upsampled, not yet renormalized normals.
    fine: Tensor,
}

/// Upsamples the previous maps ×2 (bilinear). Normals are lifted to 3-D,
/// interpolated and renormalized before taking their xy part again.
fn upsample_maps(prev: &Maps) -> (Tensor, UpTape) {
    let coarse = lift_normals(&prev.normal);
    let fine = coarse.upsample2();
    let mut unit = fine.clone();
    let p = fine.plane();
    for i in 0..fine.n() {
        let s = unit.sample_mut(i);
        for j in 0..p {
            let (x, y, z) = (s[j], s[p + j], s[2 * p + j]);
            let len = (x * x + y * y + z * z).sqrt();
            if len > 1e-12 {
                s[j] = x / len;
                s[p + j] = y / len;
            }
        }
    }
    let xy = unit.slice_channels(0..2);
    let cat = Tensor::concat_channels(&[&prev.albedo.upsample2(), &xy, &prev.roughness.upsample2()])
        .expect("maps share a size");
    (cat, UpTape { coarse, fine })
}

fn lift_normals(xy: &Tensor) -> Tensor {
    let p = xy.plane();
    let mut out = Tensor::zeros([xy.n(), 3, xy.h(), xy.w()]);
    for i in 0..xy.n() {
        let s = xy.sample(i);
        let d = out.sample_mut(i);
        for j in 0..p {
            let (x, y) = (s[j], s[p + j]);
            d[j] = x;
            d[p + j] = y;
            d[2 * p + j] = (1.0 - x * x - y * y).max(0.0).sqrt();
        }
    }
    out
}

/// Gradient of the upsampled 6-channel block back onto the previous maps.
fn upsample_maps_backward(tape: &UpTape, g: &Tensor) -> Maps {
    let albedo = Tensor::upsample2_backward(&g.slice_channels(0..3));
    let roughness = Tensor::upsample2_backward(&g.slice_channels(5..6));
    let gxy = g.slice_channels(3..5);
    let p = gxy.plane();
    let mut gfine = Tensor::zeros(tape.fine.shape);
    for i in 0..gxy.n() {
        let v = tape.fine.sample(i);
        let gs = gxy.sample(i);
        let d = gfine.sample_mut(i);
        for j in 0..p {
            let (x, y, z) = (v[j], v[p + j], v[2 * p + j]);
            let len = (x * x + y * y + z * z).sqrt();
            if len <= 1e-12 {
                continue;
            }
            let m = [x / len, y / len, z / len];
            let gm = [gs[j], gs[p + j], 0.0];
            let dot = m[0] * gm[0] + m[1] * gm[1];
            for c in 0..3 {
                d[c * p + j] = (gm[c] - m[c] * dot) / len;
            }
        }
    }
    let gcoarse = Tensor::upsample2_backward(&gfine);
    let cp = gcoarse.plane();
    let mut normal = Tensor::zeros([gcoarse.n(), 2, gcoarse.h(), gcoarse.w()]);
    for i in 0..gcoarse.n() {
        let n3 = tape.coarse.sample(i);
        let gs = gcoarse.sample(i);
        let d = normal.sample_mut(i);
        for j in 0..cp {
            let z = n3[2 * cp + j];
            // dz/dx = -x/z blows up at the rim; drop that path there.
            let (dzx, dzy) = if z > 1e-3 { (-n3[j] / z, -n3[cp + j] / z) } else { (0.0, 0.0) };
            d[j] = gs[j] + gs[2 * cp + j] * dzx;
            d[cp + j] = gs[cp + j] + gs[2 * cp + j] * dzy;
        }
    }
    Maps { albedo, normal, roughness }
}

/// Level input: the stack area-downsampled to `size`, mask re-binarized.
pub fn level_stack(stack: &Tensor, size: usize) -> Tensor {
    let mut out = stack.area_downsample(stack.h() / size);
    let p = out.plane();
    for i in 0..out.n() {
        let s = out.sample_mut(i);
        s[MASK_CHANNEL * p..(MASK_CHANNEL + 1) * p]
            .iter_mut()
            .for_each(|v| *v = if *v > 0.5 { 1.0 } else { 0.0 });
    }
    out
}

fn zero_mask_grad(g: &mut Tensor) {
    let p = g.plane();
    for i in 0..g.n() {
        g.sample_mut(i)[MASK_CHANNEL * p..(MASK_CHANNEL + 1) * p].fill(0.0);
    }
}

/// Validates a stack side and returns its level `K` (side `2^K`).
pub fn check_resolution(side: usize, max_level: u32) -> Result<u32> {
    if !is_pow2(side) {
        return Err(Error::Shape(format!("input side {side} is not a power of two; pad the capture first")));
    }
    let k = side.trailing_zeros();
    if k < MIN_REC_LEVEL {
        return Err(Error::Shape(format!("input side {side} is below the minimum of {}", 1 << MIN_REC_LEVEL)));
    }
    if k > max_level {
        return Err(Error::Shape(format!(
            "input side {side} exceeds the configured maximum {}; downsample the capture or raise max_level",
            1usize << max_level
        )));
    }
    Ok(k)
}

/// 19-channel InitNet input from a 32×32 (or larger power-of-two) stack.
pub fn assemble_init_input(stack: &ImageStack) -> Result<Image> {
    if !stack.active[0] {
        return Err(Error::MissingCodirectional);
    }
    let side = stack.resolution();
    if !is_pow2(side) || side < INIT_RESOLUTION || stack.mask.height != side {
        return Err(Error::Shape(format!("stack side {side} cannot be reduced to {INIT_RESOLUTION}")));
    }
    let t = Tensor::from_images(&[&stack.channels()])?;
    Ok(level_stack(&t, INIT_RESOLUTION).to_image(0))
}

/// Initial and recursive networks (and optionally the ResNet baseline).
#[derive(Clone, Debug)]
pub struct NetworkWeights {
    pub config: NetConfig,
    pub init: Triplet,
    pub rec: Triplet,
    pub resnet: Option<Triplet>,
}

impl NetworkWeights {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, with_resnet: bool, rng: &mut R) -> Self {
        NetworkWeights {
            config,
            init: Triplet::new(Arch::Init, config.width, rng),
            rec: Triplet::new(Arch::Rec, config.width, rng),
            resnet: with_resnet.then(|| Triplet::new(Arch::ResNet, config.width, rng)),
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self.config.width, self.resnet.is_some())
    }

    /// Visits the InitNet and RecNet parameters (the trained set).
    pub fn visit(&mut self, f: &mut crate::nn::layers::ParamVisitor<'_>) {
        self.init.visit(f);
        self.rec.visit(f);
    }

    pub fn visit_all(&mut self, f: &mut crate::nn::layers::ParamVisitor<'_>) {
        self.visit(f);
        if let Some(r) = &mut self.resnet {
            r.visit(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_all(&mut |_, p, _| p.zero_grad());
    }
}

/// Architecture fingerprint: every module's layer string.
pub fn fingerprint(width: usize, with_resnet: bool) -> String {
    let mut archs = vec![Arch::Init, Arch::Rec];
    if with_resnet {
        archs.push(Arch::ResNet);
    }
    archs
        .iter()
        .flat_map(|&a| MapKind::ALL.map(move |k| format!("{}.{}={}", a.tag(), k.name(), layer_string(a, width, k.channels()))))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Sum of trainable element counts over every module present.
pub fn count_parameters(weights: &[&Triplet]) -> usize {
    weights.iter().map(|t| t.num_parameters()).sum()
}

/// Level sizes `32, 64, ..., 2^K`.
pub fn level_sizes(k: u32) -> Vec<usize> {
    (INIT_LEVEL..=k).map(|l| 1usize << l).collect()
}

/// Eval-mode RecNet application on a 25-channel input.
pub fn rec_net_forward(rec: &Triplet, input: &Tensor) -> Result<Maps> {
    if input.c() != REC_CHANNELS {
        return Err(Error::Shape(format!("RecNet expects {REC_CHANNELS} channels, got {}", input.c())));
    }
    if !is_pow2(input.h()) || input.h() < 1 << MIN_REC_LEVEL || input.h() != input.w() {
        return Err(Error::Shape(format!("RecNet input side {} must be a power of two >= 64", input.h())));
    }
    Ok(rec.forward(input))
}

/// Eval-mode InitNet application on a 19-channel 32×32 input.
pub fn init_net_forward(init: &Triplet, input: &Tensor) -> Result<Maps> {
    if input.c() != STACK_CHANNELS || input.h() != INIT_RESOLUTION || input.w() != INIT_RESOLUTION {
        return Err(Error::Shape(format!(
            "InitNet expects {STACK_CHANNELS}x{INIT_RESOLUTION}x{INIT_RESOLUTION}, got {:?}",
            input.shape
        )));
    }
    Ok(init.forward(input))
}

/// Eval-mode single-pass baseline on a 19-channel input.
pub fn resnet_forward(resnet: &Triplet, input: &Tensor) -> Result<Maps> {
    if input.c() != STACK_CHANNELS || !is_pow2(input.h()) || input.h() < 4 {
        return Err(Error::Shape(format!("ResNet expects 19 channels at a power-of-two side, got {:?}", input.shape)));
    }
    Ok(resnet.forward(input))
}

/// Per-level record of which RecNet weights ran.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecursionTrace {
    /// `(resolution, address of the RecNet triplet used)`.
    pub applications: Vec<(usize, usize)>,
}

/// Runs the recursion on a batched 19-channel stack of side `2^K`,
/// returning maps at every level from 32 up to `2^K`.
pub fn predict_pyramid(weights: &NetworkWeights, stack: &Tensor) -> Result<(Vec<Maps>, RecursionTrace)> {
    let k = check_stack(weights, stack)?;
    let mut levels = vec![init_net_forward(&weights.init, &level_stack(stack, INIT_RESOLUTION))?];
    let mut trace = RecursionTrace { applications: Vec::new() };
    for size in level_sizes(k).into_iter().skip(1) {
        let (up, _) = upsample_maps(levels.last().expect("init level"));
        let input = Tensor::concat_channels(&[&level_stack(stack, size), &up])?;
        trace.applications.push((size, &weights.rec as *const Triplet as usize));
        levels.push(rec_net_forward(&weights.rec, &input)?);
    }
    Ok((levels, trace))
}

fn check_stack(weights: &NetworkWeights, stack: &Tensor) -> Result<u32> {
    if stack.c() != STACK_CHANNELS || stack.h() != stack.w() {
        return Err(Error::Shape(format!("expected a square 19-channel stack, got {:?}", stack.shape)));
    }
    check_resolution(stack.h(), weights.config.max_level)
}

/// Coarse-to-fine prediction for one capture; level 0 is 32×32.
pub fn recursive_predict(weights: &NetworkWeights, stack: &ImageStack) -> Result<Vec<MapSet>> {
    Ok(recursive_predict_traced(weights, stack)?.0)
}

pub fn recursive_predict_traced(weights: &NetworkWeights, stack: &ImageStack) -> Result<(Vec<MapSet>, RecursionTrace)> {
    if !stack.active[0] {
        return Err(Error::MissingCodirectional);
    }
    let t = Tensor::from_images(&[&stack.channels()])?;
    let (levels, trace) = predict_pyramid(weights, &t)?;
    Ok((levels.iter().map(|m| m.to_mapset(0)).collect(), trace))
}

/// Intermediates of a taped recursion.
pub struct PyramidTape {
    stack_shape: [usize; 4],
    init: TripletTape,
    levels: Vec<(TripletTape, UpTape, usize)>,
}

/// Taped recursion for training or input-gradient probes.
pub fn forward_pyramid(weights: &mut NetworkWeights, stack: &Tensor, train: bool) -> Result<(Vec<Maps>, PyramidTape)> {
    let k = check_stack(weights, stack)?;
    let (first, init) = weights.init.forward_tape(&level_stack(stack, INIT_RESOLUTION), train);
    let mut levels = vec![first];
    let mut tapes = Vec::new();
    for size in level_sizes(k).into_iter().skip(1) {
        let (up, up_tape) = upsample_maps(levels.last().expect("init level"));
        let input = Tensor::concat_channels(&[&level_stack(stack, size), &up])?;
        let (maps, tape) = weights.rec.forward_tape(&input, train);
        levels.push(maps);
        tapes.push((tape, up_tape, size));
    }
    Ok((levels, PyramidTape { stack_shape: stack.shape, init, levels: tapes }))
}

/// Backpropagates per-level output gradients through the recursion.
/// Returns the gradient with respect to the full-resolution stack when
/// `input_grad` is set (the mask channel receives none).
pub fn backward_pyramid(
    weights: &mut NetworkWeights,
    tape: PyramidTape,
    mut grads: Vec<Maps>,
    input_grad: bool,
    param_grad: bool,
) -> Result<Option<Tensor>> {
    if grads.len() != tape.levels.len() + 1 {
        return Err(Error::Shape(format!("{} gradient levels for {} outputs", grads.len(), tape.levels.len() + 1)));
    }
    let full = tape.stack_shape[2];
    let mut gstack = input_grad.then(|| Tensor::zeros(tape.stack_shape));
    for (idx, (ttape, up_tape, size)) in tape.levels.into_iter().enumerate().rev() {
        let g = grads.pop().expect("level gradient");
        let gin = weights.rec.backward(ttape, &g, true, param_grad).expect("input gradient requested");
        let prev = upsample_maps_backward(&up_tape, &gin.slice_channels(STACK_CHANNELS..REC_CHANNELS));
        let target = &mut grads[idx];
        for kind in MapKind::ALL {
            target.get_mut(kind).add_assign(prev.get(kind));
        }
        if let Some(acc) = &mut gstack {
            let mut gs = gin.slice_channels(0..STACK_CHANNELS);
            zero_mask_grad(&mut gs);
            acc.add_assign(&Tensor::area_downsample_backward(&gs, full / size));
        }
    }
    let g = grads.pop().expect("init gradient");
    let gin = weights.init.backward(tape.init, &g, input_grad, param_grad);
    if let (Some(acc), Some(mut gs)) = (&mut gstack, gin) {
        zero_mask_grad(&mut gs);
        acc.add_assign(&Tensor::area_downsample_backward(&gs, full / INIT_RESOLUTION));
    }
    Ok(gstack)
}

/// A differentiable image-to-normals model for receptive-field probes.
pub trait InputGradient {
    /// Gradient of the normal-x output at `pixel = (row, col)` with respect
    /// to the 19-channel input (batch of one).
    fn seeded_input_gradient(&mut self, stack: &Tensor, pixel: (usize, usize)) -> Result<Tensor>;
}

/// The full recursion (InitNet then RecNet at every level).
pub struct RecursiveModel<'a>(pub &'a mut NetworkWeights);

/// A single ResNet application at full resolution.
pub struct ResNetModel<'a>(pub &'a mut Triplet);

fn seed_maps(n: usize, size: usize, pixel: (usize, usize)) -> Maps {
    let mut g = Maps::zeros(n, size);
    g.normal.data[pixel.0 * size + pixel.1] = 1.0;
    g
}

impl InputGradient for RecursiveModel<'_> {
    fn seeded_input_gradient(&mut self, stack: &Tensor, pixel: (usize, usize)) -> Result<Tensor> {
        let (levels, tape) = forward_pyramid(self.0, stack, false)?;
        let grads: Vec<Maps> = levels
            .iter()
            .enumerate()
            .map(|(i, m)| if i + 1 == levels.len() { seed_maps(1, m.resolution(), pixel) } else { Maps::zeros(1, m.resolution()) })
            .collect();
        Ok(backward_pyramid(self.0, tape, grads, true, false)?.expect("input gradient requested"))
    }
}

impl InputGradient for ResNetModel<'_> {
    fn seeded_input_gradient(&mut self, stack: &Tensor, pixel: (usize, usize)) -> Result<Tensor> {
        if stack.c() != STACK_CHANNELS || !is_pow2(stack.h()) {
            return Err(Error::Shape(format!("ResNet expects a 19-channel power-of-two stack, got {:?}", stack.shape)));
        }
        let (_, tape) = self.0.forward_tape(stack, false);
        let g = seed_maps(1, stack.h(), pixel);
        let mut gx = self.0.backward(tape, &g, true, false).expect("input gradient requested");
        zero_mask_grad(&mut gx);
        Ok(gx)
    }
}

/// Per-pixel L2 norm (over input channels) of the gradient of the normal-x
/// output at `pixel` with respect to the input stack.
pub fn receptive_field_map(model: &mut dyn InputGradient, stack: &ImageStack, pixel: (usize, usize)) -> Result<Image> {
    let side = stack.resolution();
    if pixel.0 >= side || pixel.1 >= side {
        return Err(Error::InvalidInput(format!("pixel {pixel:?} outside a {side}x{side} input")));
    }
    let t = Tensor::from_images(&[&stack.channels()])?;
    let g = model.seeded_input_gradient(&t, pixel)?;
    let p = g.plane();
    let s = g.sample(0);
    let mut out = Image::zeros(side, side, 1);
    for (j, v) in out.data.iter_mut().enumerate() {
        *v = (0..g.c()).map(|c| s[c * p + j] * s[c * p + j]).sum::<f32>().sqrt();
    }
    Ok(out)
}

/// Largest Chebyshev distance from `pixel` to a nonzero entry.
pub fn support_radius(field: &Image, pixel: (usize, usize)) -> Option<usize> {
    let mut best = None;
    for y in 0..field.height {
        for x in 0..field.width {
            if field.get(0, y, x) != 0.0 {
                let d = y.abs_diff(pixel.0).max(x.abs_diff(pixel.1));
                best = Some(best.map_or(d, |b: usize| b.max(d)));
            }
        }
    }
    best
}

/// Gradient-support maps of the recursion and the ResNet baseline.
#[derive(Clone, Debug)]
pub struct RfProbe {
    pub recnet: Image,
    pub resnet: Image,
    pub recnet_radius: Option<usize>,
    pub resnet_radius: Option<usize>,
}

/// Receptive-field probe on a random all-foreground stack with freshly
/// initialized networks of the given width.
pub fn rf_probe<R: Rng + ?Sized>(width: usize, side: usize, pixel: (usize, usize), rng: &mut R) -> Result<RfProbe> {
    let max_level = check_resolution(side, DEFAULT_MAX_LEVEL.max(side.trailing_zeros()))?;
    let mut weights = NetworkWeights::new(NetConfig { width, max_level }, true, rng);
    let images = (0..crate::scene::NUM_SLOTS)
        .map(|_| {
            let data = (0..3 * side * side).map(|_| rng.random::<f32>()).collect();
            Image::from_data(side, side, 3, data).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let stack = ImageStack::new(images, Image::filled(side, side, 1, 1.0))?;
    let recnet = receptive_field_map(&mut RecursiveModel(&mut weights), &stack, pixel)?;
    let mut resnet_net = weights.resnet.take().expect("built with the baseline");
    let resnet = receptive_field_map(&mut ResNetModel(&mut resnet_net), &stack, pixel)?;
    Ok(RfProbe {
        recnet_radius: support_radius(&recnet, pixel),
        resnet_radius: support_radius(&resnet, pixel),
        recnet,
        resnet,
    })
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Writes all modules (including batch-norm running statistics).
pub fn save_checkpoint(weights: &NetworkWeights, path: &Path) -> Result<()> {
    let mut w = weights.clone();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_str(&mut buf, &weights.fingerprint());
    buf.extend_from_slice(&(weights.config.width as u32).to_le_bytes());
    buf.extend_from_slice(&weights.config.max_level.to_le_bytes());
    buf.push(weights.resnet.is_some() as u8);
    let mut tensors: Vec<(String, Param)> = Vec::new();
    w.visit_all(&mut |name, p, _| tensors.push((name.to_string(), p.clone())));
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, p) in &tensors {
        write_str(&mut buf, name);
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid utf-8"))
    }
}

/// Loads a checkpoint, rejecting it when its fingerprint disagrees with the
/// architecture it claims (or with `expected`, when given).
pub fn load_checkpoint(path: &Path, expected: Option<&str>) -> Result<NetworkWeights> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0, path };
    if c.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a weights file"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, &format!("unsupported version {version}")));
    }
    let stored = c.string()?;
    let width = c.u32()? as usize;
    let max_level = c.u32()?;
    let with_resnet = c.take(1)?[0] != 0;
    let implied = fingerprint(width, with_resnet);
    if stored != implied {
        return Err(Error::Fingerprint { expected: implied, found: stored });
    }
    if let Some(e) = expected {
        if e != stored {
            return Err(Error::Fingerprint { expected: e.to_string(), found: stored });
        }
    }
    let count = c.u32()? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let values: Vec<f32> = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, (shape, values));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut weights = NetworkWeights::new(NetConfig { width, max_level }, with_resnet, &mut rng);
    let mut missing = None;
    weights.visit_all(&mut |name, p, _| match tensors.remove(name) {
        Some((shape, values)) if shape == p.shape => p.value = values,
        _ => missing = Some(name.to_string()),
    });
    if let Some(name) = missing {
        return Err(Error::format(path, &format!("tensor {name} missing or mis-shaped")));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(path, &format!("unexpected tensor {extra}")));
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetworkWeights {
        NetworkWeights::new(NetConfig { width: 4, max_level: 10 }, true, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn random_stack(side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros([1, STACK_CHANNELS, side, side]);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let p = t.plane();
        t.data[MASK_CHANNEL * p..].iter_mut().for_each(|v| *v = 1.0);
        t
    }

    #[test]
    fn layer_string_parsing_roundtrip() {
        let m = build_from_layer_string("conv_k3_f8_s2-BN-Relu-Res_8-convt_k3_f4_s2", 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.layers.len(), 5);
        assert!(matches!(&m.layers[0], Layer::Conv(c) if c.stride == 2 && c.out_channels == 8));
        assert!(matches!(&m.layers[4], Layer::ConvT(c) if c.in_channels == 8 && c.out_channels == 4));
        assert!(build_from_layer_string("conv_k3_f8-Res_4", 3, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(build_from_layer_string("pool_k2", 3, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn pyramid_shapes_and_shared_weights() {
        let w = small();
        let (levels, trace) = predict_pyramid(&w, &random_stack(128, 1)).unwrap();
        assert_eq!(levels.iter().map(Maps::resolution).collect::<Vec<_>>(), vec![32, 64, 128]);
        assert_eq!(trace.applications.len(), 2);
        assert!(trace.applications.iter().all(|&(_, a)| a == trace.applications[0].1));
        for m in &levels {
            assert_eq!(m.normal.c(), 2);
            assert!(m.albedo.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn resolution_errors() {
        let w = small();
        assert!(predict_pyramid(&w, &random_stack(32, 1)).is_err());
        assert!(check_resolution(96, 10).is_err());
        let err = check_resolution(2048, 10).unwrap_err().to_string();
        assert!(err.contains("max_level"), "{err}");
        assert_eq!(check_resolution(1024, 10).unwrap(), 10);
    }

    #[test]
    fn disk_clamp_keeps_unit_disk() {
        let t = Tensor::from_vec([1, 2, 1, 3], vec![0.9, 0.1, 3.0, 0.9, 0.2, -4.0]).unwrap();
        let c = disk_clamp(&t);
        for j in 0..3 {
            let r = (c.data[j].powi(2) + c.data[3 + j].powi(2)).sqrt();
            assert!(r <= 1.0 + 1e-6);
        }
        assert_eq!(c.data[1], 0.1);
    }

    #[test]
    fn upsample_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut prev = Maps::zeros(1, 4);
        for kind in MapKind::ALL {
            prev.get_mut(kind).data.iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
        }
        let (out, tape) = upsample_maps(&prev);
        let mut r = Tensor::zeros(out.shape);
        r.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let g = upsample_maps_backward(&tape, &r);
        let objective = |m: &Maps| -> f64 {
            let (o, _) = upsample_maps(m);
            o.data.iter().zip(&r.data).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        for kind in MapKind::ALL {
            for idx in 0..prev.get(kind).data.len() {
                let eps = 1e-3;
                let mut p = prev.clone();
                p.get_mut(kind).data[idx] += eps;
                let mut m = prev.clone();
                m.get_mut(kind).data[idx] -= eps;
                let fd = (objective(&p) - objective(&m)) / (2.0 * eps as f64);
                let an = g.get(kind).data[idx] as f64;
                assert!((fd - an).abs() < 2e-2 * fd.abs().max(1e-1), "{kind:?}[{idx}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn pyramid_input_gradient_matches_finite_differences() {
        let mut w = small();
        // Eval mode makes the loss a smooth-almost-everywhere function of the input.
        let stack = random_stack(64, 5);
        let (levels, tape) = forward_pyramid(&mut w, &stack, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let weights: Vec<Maps> = levels
            .iter()
            .map(|m| {
                let mut g = Maps::zeros(1, m.resolution());
                for kind in MapKind::ALL {
                    g.get_mut(kind).data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                }
                g
            })
            .collect();
        let gx = backward_pyramid(&mut w, tape, weights.clone(), true, false).unwrap().unwrap();
        let objective = |s: &Tensor| -> f64 {
            let (lv, _) = predict_pyramid(&w, s).unwrap();
            lv.iter()
                .zip(&weights)
                .map(|(m, g)| {
                    MapKind::ALL
                        .iter()
                        .map(|&k| m.get(k).data.iter().zip(&g.get(k).data).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>())
                        .sum::<f64>()
                })
                .sum()
        };
        let mut checked = 0;
        for idx in (0..MASK_CHANNEL * 64 * 64).step_by(997) {
            let fd = |eps: f32| {
                let mut p = stack.clone();
                p.data[idx] += eps;
                let mut m = stack.clone();
                m.data[idx] -= eps;
                (objective(&p) - objective(&m)) / (2.0 * eps as f64)
            };
            let (a, b) = (fd(2e-2), fd(1e-2));
            if (a - b).abs() > 2e-2 * a.abs().max(1e-2) {
                continue;
            }
            checked += 1;
            let an = gx.data[idx] as f64;
            assert!((b - an).abs() < 3e-2 * b.abs().max(an.abs()).max(1e-2), "idx {idx}: fd {b} vs {an}");
        }
        assert!(checked > 60, "{checked}");
    }

    #[test]
    fn checkpoint_roundtrip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let w = small();
        let path = dir.path().join("w.bin");
        save_checkpoint(&w, &path).unwrap();
        let back = load_checkpoint(&path, Some(&w.fingerprint())).unwrap();
        let stack = random_stack(64, 9);
        assert_eq!(predict_pyramid(&w, &stack).unwrap().0, predict_pyramid(&back, &stack).unwrap().0);
        let other = fingerprint(8, true);
        assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Fingerprint { .. })));
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }

    #[test]
    fn resnet_keeps_resolution() {
        let w = small();
        let out = resnet_forward(w.resnet.as_ref().unwrap(), &random_stack(64, 2)).unwrap();
        assert_eq!(out.resolution(), 64);
    }
}
