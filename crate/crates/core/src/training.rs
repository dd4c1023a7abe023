//! Multi-scale supervised training of InitNet and RecNet.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::MapSet;
use crate::netarch::{
    backward_pyramid, forward_pyramid, save_checkpoint, MapKind, Maps, NetConfig, NetworkWeights, INIT_RESOLUTION,
};
use crate::nn::{Adam, Tensor};
use crate::raster::{is_pow2, Image};
use crate::render::{apply_augmentation, augment_geometry, Augmentation, ImageStack, RenderBundle};
use crate::scene::NUM_SLOTS;

/// Probability of 1..=6 active images per training sample.
pub const DEFAULT_ACTIVE_DISTRIBUTION: [f64; NUM_SLOTS] = [0.3, 0.2, 0.2, 0.1, 0.1, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub active_distribution: [f64; NUM_SLOTS],
    /// Training side length (a power of two, at least 64).
    pub resolution: usize,
    pub network: NetConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 keeps only the final one).
    pub checkpoint_every: usize,
    /// Random crop / shrink before each step.
    pub augment: bool,
    /// Random exposure scaling before tonemapping.
    pub normalize_exposure: bool,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 10,
            learning_rate: 1e-4,
            active_distribution: DEFAULT_ACTIVE_DISTRIBUTION,
            resolution: 256,
            network: NetConfig::default(),
            seed: 0,
            checkpoint_every: 1,
            augment: true,
            normalize_exposure: true,
            max_steps: None,
            data: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.active_distribution.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.active_distribution.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidInput(format!("active distribution sums to {sum}, expected 1")));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        if !is_pow2(self.resolution) || self.resolution < 64 {
            return Err(Error::InvalidInput(format!("training resolution {} is not a power of two >= 64", self.resolution)));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("train config: {e}")))
    }
}

/// Draws the active slots: a count from `distribution`, slot 0 always on,
/// the rest chosen uniformly without replacement.
pub fn sample_active_images<R: Rng + ?Sized>(rng: &mut R, distribution: &[f64; NUM_SLOTS]) -> [bool; NUM_SLOTS] {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut count = NUM_SLOTS;
    for (i, p) in distribution.iter().enumerate() {
        acc += p;
        if u < acc {
            count = i + 1;
            break;
        }
    }
    let mut others: Vec<usize> = (1..NUM_SLOTS).collect();
    others.shuffle(rng);
    let mut active = [false; NUM_SLOTS];
    active[0] = true;
    for &s in &others[..count - 1] {
        active[s] = true;
    }
    active
}

/// Ground truth at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct GtLevel {
    pub maps: MapSet,
    pub mask: Image,
}

/// Area-averaged ground truth at every level from 32 to the input side,
/// normals renormalized and the background zeroed.
pub fn build_gt_pyramid(gt: &MapSet, mask: &Image) -> Result<Vec<GtLevel>> {
    gt.validate()?;
    let side = gt.width();
    if !is_pow2(side) || side < INIT_RESOLUTION || gt.height() != side || !mask.same_size(&gt.roughness) {
        return Err(Error::Shape(format!("ground truth at {side} cannot form a pyramid")));
    }
    let mut levels = Vec::new();
    let mut size = INIT_RESOLUTION;
    while size <= side {
        let f = side / size;
        let mut maps = MapSet {
            normal: gt.normal.area_downsample(f)?,
            albedo: gt.albedo.area_downsample(f)?,
            roughness: gt.roughness.area_downsample(f)?,
        };
        let m = mask.area_downsample(f)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        maps.apply_mask(&m);
        levels.push(GtLevel { maps, mask: m });
        size *= 2;
    }
    Ok(levels)
}

/// A batch of ground-truth levels in tensor form.
#[derive(Clone, Debug)]
pub struct GtBatch {
    pub maps: Maps,
    pub mask: Tensor,
}

pub fn batch_gt_levels(samples: &[Vec<GtLevel>]) -> Result<Vec<GtBatch>> {
    let nlev = samples.first().map_or(0, Vec::len);
    if samples.iter().any(|s| s.len() != nlev) {
        return Err(Error::Shape("samples have different pyramid depths".into()));
    }
    (0..nlev)
        .map(|l| {
            let sets: Vec<&MapSet> = samples.iter().map(|s| &s[l].maps).collect();
            let masks: Vec<&Image> = samples.iter().map(|s| &s[l].mask).collect();
            Ok(GtBatch { maps: Maps::from_mapsets(&sets)?, mask: Tensor::from_images(&masks)? })
        })
        .collect()
}

/// Loss value with its per-map breakdown (each summed over levels).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub albedo: f64,
    pub normal: f64,
    pub roughness: f64,
}

/// Sum over levels of the masked mean absolute error of each map (normals
/// compared on their xy components), with gradients for every level.
pub fn multiscale_loss(pred: &[Maps], gt: &[GtBatch]) -> Result<(LossTerms, Vec<Maps>)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted levels vs {} ground-truth levels", pred.len(), gt.len())));
    }
    let mut terms = LossTerms::default();
    let mut grads = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        if p.resolution() != g.maps.resolution() || p.batch() != g.maps.batch() {
            return Err(Error::Shape("level size mismatch".into()));
        }
        let mut grad = Maps::zeros(p.batch(), p.resolution());
        let plane = g.mask.plane();
        let masked: usize = g.mask.data.iter().filter(|&&m| m > 0.5).count();
        for kind in MapKind::ALL {
            let (pt, gtt) = (p.get(kind), g.maps.get(kind));
            let c = kind.channels();
            let denom = (masked * c) as f64;
            let mut sum = 0.0f64;
            let gout = grad.get_mut(kind);
            for i in 0..p.batch() {
                let m = g.mask.sample(i);
                let (ps, gs) = (pt.sample(i), gtt.sample(i));
                let os = gout.sample_mut(i);
                for ch in 0..c {
                    for j in 0..plane {
                        if m[j] > 0.5 {
                            let d = ps[ch * plane + j] - gs[ch * plane + j];
                            sum += d.abs() as f64;
                            os[ch * plane + j] = if denom > 0.0 { (d.signum() as f64 / denom) as f32 } else { 0.0 };
                            if d == 0.0 {
                                os[ch * plane + j] = 0.0;
                            }
                        }
                    }
                }
            }
            let term = if denom > 0.0 { sum / denom } else { 0.0 };
            match kind {
                MapKind::Albedo => terms.albedo += term,
                MapKind::Normal => terms.normal += term,
                MapKind::Roughness => terms.roughness += term,
            }
        }
        grads.push(grad);
    }
    terms.total = terms.albedo + terms.normal + terms.roughness;
    Ok((terms, grads))
}

/// One prepared training sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub stack: ImageStack,
    pub gt: Vec<GtLevel>,
}

/// Augmentation, exposure normalization, tonemapping and slot zeroing.
pub fn prepare_sample<R: Rng + ?Sized>(bundle: &RenderBundle, config: &TrainConfig, rng: &mut R) -> Result<Sample> {
    let res = config.resolution;
    let bundle = if config.augment {
        augment_geometry(bundle, rng, res)?.0
    } else if bundle.resolution() != res {
        let side = bundle.resolution() as f64;
        apply_augmentation(bundle, Augmentation::Crop { x: 0.0, y: 0.0, side }, res)?
    } else {
        bundle.clone()
    };
    let active = sample_active_images(rng, &config.active_distribution);
    let stack = ImageStack::from_hdr(&bundle.images, &bundle.mask, active, config.normalize_exposure, rng)?;
    let gt = build_gt_pyramid(&bundle.gt, &bundle.mask)?;
    Ok(Sample { stack, gt })
}

pub fn stack_tensor(stacks: &[&ImageStack]) -> Result<Tensor> {
    let chans: Vec<Image> = stacks.iter().map(|s| s.channels()).collect();
    Tensor::from_images(&chans.iter().collect::<Vec<_>>())
}

/// Forward, loss and backward for one batch; accumulates gradients.
pub fn loss_and_gradients(weights: &mut NetworkWeights, samples: &[Sample]) -> Result<LossTerms> {
    let stacks: Vec<&ImageStack> = samples.iter().map(|s| &s.stack).collect();
    let input = stack_tensor(&stacks)?;
    let gt = batch_gt_levels(&samples.iter().map(|s| s.gt.clone()).collect::<Vec<_>>())?;
    let (pred, tape) = forward_pyramid(weights, &input, true)?;
    let (terms, grads) = multiscale_loss(&pred, &gt)?;
    backward_pyramid(weights, tape, grads, false, true)?;
    Ok(terms)
}

/// Evaluation-mode loss of a batch (no gradient).
pub fn eval_loss(weights: &NetworkWeights, samples: &[Sample]) -> Result<LossTerms> {
    let stacks: Vec<&ImageStack> = samples.iter().map(|s| &s.stack).collect();
    let input = stack_tensor(&stacks)?;
    let gt = batch_gt_levels(&samples.iter().map(|s| s.gt.clone()).collect::<Vec<_>>())?;
    let (pred, _) = crate::netarch::predict_pyramid(weights, &input)?;
    Ok(multiscale_loss(&pred, &gt)?.0)
}

pub fn adam_step(weights: &mut NetworkWeights, opt: &mut Adam) {
    opt.begin();
    weights.visit(&mut |_, p, trainable| {
        if trainable {
            opt.update(p)
        }
    });
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossTerms,
}

/// Runs the training loop. With `out` set, appends `loss.csv` and writes
/// checkpoints (`epoch_NNN.bin` at the cadence, `model.bin` at the end).
pub fn train<R: Rng + ?Sized>(
    config: &TrainConfig,
    dataset: &[RenderBundle],
    weights: &mut NetworkWeights,
    rng: &mut R,
    out: Option<&Path>,
) -> Result<Vec<StepLog>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss.csv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "epoch,step,loss,albedo,normal,roughness").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut opt = Adam::new(config.learning_rate as f32);
    let mut log = Vec::new();
    let mut step = 0;
    let batch = config.batch_size.min(dataset.len());
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let samples = chunk
                .iter()
                .map(|&i| prepare_sample(&dataset[i], config, rng))
                .collect::<Result<Vec<_>>>()?;
            weights.zero_grad();
            let terms = loss_and_gradients(weights, &samples)?;
            if !terms.total.is_finite() {
                return Err(Error::NonFiniteLoss { batch: step });
            }
            adam_step(weights, &mut opt);
            if let Some((f, path)) = &mut csv {
                writeln!(f, "{epoch},{step},{},{},{},{}", terms.total, terms.albedo, terms.normal, terms.roughness)
                    .map_err(|e| Error::io(&*path, e))?;
            }
            log.push(StepLog { epoch, step, loss: terms });
            step += 1;
        }
        let epoch_losses: Vec<f64> = log.iter().filter(|l| l.epoch == epoch).map(|l| l.loss.total).collect();
        if !epoch_losses.is_empty() {
            info!("epoch {epoch}: mean loss {:.5}", epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
        }
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                save_checkpoint(weights, &dir.join(format!("epoch_{:03}.bin", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(weights, &dir.join("model.bin"))?;
    }
    Ok(log)
}

/// Loads every bundle directory (sorted by name) below `dir`.
pub fn load_dataset(dir: &Path) -> Result<Vec<RenderBundle>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!("no scene bundles under {}", dir.display())));
    }
    dirs.iter().map(|d| RenderBundle::load(d)).collect()
}

/// Median of the per-step losses of one epoch.
pub fn epoch_median(log: &[StepLog], epoch: usize) -> Option<f64> {
    let mut v: Vec<f64> = log.iter().filter(|l| l.epoch == epoch).map(|l| l.loss.total).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_gt(side: usize, normal: [f32; 3]) -> (MapSet, Image) {
        let mut gt = MapSet::zeros(side, side);
        for (c, v) in normal.iter().enumerate() {
            gt.normal.plane_mut(c).fill(*v);
        }
        gt.albedo.data.fill(0.5);
        gt.roughness.data.fill(0.3);
        (gt, Image::filled(side, side, 1, 1.0))
    }

    #[test]
    fn active_draws_always_include_front() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            assert!(sample_active_images(&mut rng, &DEFAULT_ACTIVE_DISTRIBUTION)[0]);
        }
        let all = sample_active_images(&mut rng, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(all.iter().all(|&a| a));
    }

    #[test]
    fn pyramid_levels_and_constant_normal() {
        let n = [0.6, 0.0, 0.8];
        let (gt, mask) = flat_gt(256, n);
        let levels = build_gt_pyramid(&gt, &mask).unwrap();
        assert_eq!(levels.iter().map(|l| l.maps.width()).collect::<Vec<_>>(), vec![32, 64, 128, 256]);
        for l in &levels {
            assert!((l.maps.normal.get(0, 3, 5) - 0.6).abs() < 1e-6);
            assert!((l.maps.normal.get(2, 3, 5) - 0.8).abs() < 1e-6);
        }
    }

    #[test]
    fn checker_albedo_averages_to_grey() {
        let (mut gt, mask) = flat_gt(256, [0.0, 0.0, 1.0]);
        for y in 0..256 {
            for x in 0..256 {
                let v = if (y / 2 + x / 2) % 2 == 0 { 1.0 } else { 0.0 };
                for c in 0..3 {
                    gt.albedo.set(c, y, x, v);
                }
            }
        }
        let levels = build_gt_pyramid(&gt, &mask).unwrap();
        assert!(levels[0].maps.albedo.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    fn to_batch(levels: &[GtLevel]) -> Vec<GtBatch> {
        batch_gt_levels(&[levels.to_vec()]).unwrap()
    }

    fn as_pred(levels: &[GtBatch]) -> Vec<Maps> {
        levels.iter().map(|l| l.maps.clone()).collect()
    }

    #[test]
    fn loss_zero_on_match_and_offset_value() {
        let (gt, mask) = flat_gt(64, [0.0, 0.6, 0.8]);
        let levels = to_batch(&build_gt_pyramid(&gt, &mask).unwrap());
        let mut pred = as_pred(&levels);
        assert_eq!(multiscale_loss(&pred, &levels).unwrap().0.total, 0.0);
        pred[1].albedo.data.iter_mut().for_each(|v| *v += 0.1);
        let (terms, _) = multiscale_loss(&pred, &levels).unwrap();
        assert!((terms.total - 0.1).abs() < 1e-6, "{terms:?}");
        let swapped: Vec<GtBatch> = pred.iter().zip(&levels).map(|(p, g)| GtBatch { maps: p.clone(), mask: g.mask.clone() }).collect();
        let back = multiscale_loss(&as_pred(&levels), &swapped).unwrap().0;
        assert!((back.total - terms.total).abs() < 1e-12);
        assert!(multiscale_loss(&pred[..1], &levels).is_err());
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let text = cfg.to_text().unwrap();
        assert_eq!(TrainConfig::from_text(&text).unwrap(), cfg);
        assert!(TrainConfig::from_text("batch_size = 0").is_err());
        assert!(TrainConfig::from_text("active_distribution = [0.5, 0.5, 0.5, 0.0, 0.0, 0.0]").is_err());
        assert_eq!(TrainConfig::from_text("epochs = 7").unwrap().batch_size, 10);
    }
}
