//! Capture loading, padding and full-resolution inference.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{depth_to_mesh, integrate_normals, write_obj, DepthMap, Mesh};
use crate::io::{read_any, read_mask, write_pfm, write_png};
use crate::maps::MapSet;
use crate::netarch::{recursive_predict_traced, NetworkWeights, MIN_REC_LEVEL};
use crate::raster::{is_pow2, next_pow2, Image};
use crate::render::{tonemap_srgb, ImageStack};
use crate::scene::{NUM_SLOTS, SIDE_AZIMUTHS, SIDE_ELEVATION, SLOT_NAMES};

pub const DEFAULT_CAPTURE_RESOLUTION: usize = 1024;

/// Capture files keyed by slot name (`front`, `front-right`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureConfig {
    pub slots: BTreeMap<String, PathBuf>,
    pub mask: Option<PathBuf>,
    /// Declared `(azimuth, elevation)` in degrees per slot.
    pub light_directions: Vec<[f64; 2]>,
    /// Largest side fed to the network (a power of two in 64..=1024).
    pub resolution: usize,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        let mut dirs = vec![[0.0, 0.0]];
        dirs.extend(SIDE_AZIMUTHS.iter().map(|&a| [a, SIDE_ELEVATION]));
        dirs.push([0.0, 90.0]);
        CaptureConfig { slots: BTreeMap::new(), mask: None, light_directions: dirs, resolution: DEFAULT_CAPTURE_RESOLUTION }
    }
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<()> {
        for name in self.slots.keys() {
            if !SLOT_NAMES.contains(&name.as_str()) {
                return Err(Error::InvalidInput(format!("unknown slot '{name}' (expected one of {SLOT_NAMES:?})")));
            }
        }
        if !self.slots.contains_key(SLOT_NAMES[0]) {
            return Err(Error::MissingCodirectional);
        }
        if !is_pow2(self.resolution) || !(64..=1024).contains(&self.resolution) {
            return Err(Error::InvalidInput(format!("resolution {} is not a power of two in 64..=1024", self.resolution)));
        }
        if self.light_directions.len() != NUM_SLOTS {
            return Err(Error::InvalidInput(format!("expected {NUM_SLOTS} light directions")));
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: CaptureConfig = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("capture config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("capture config: {e}")))
    }

    /// Loads the capture as a stack. PFM inputs are treated as linear and
    /// tonemapped; other formats are used as stored. Without a mask the
    /// whole frame is foreground.
    pub fn load(&self) -> Result<ImageStack> {
        self.validate()?;
        let mut images: Vec<Option<Image>> = vec![None; NUM_SLOTS];
        for (slot, name) in SLOT_NAMES.iter().enumerate() {
            if let Some(path) = self.slots.get(*name) {
                let img = read_any(path)?;
                let is_pfm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
                images[slot] = Some(if is_pfm { tonemap_srgb(&img) } else { img });
            }
        }
        let first = images[0].as_ref().expect("validated");
        let mask = match &self.mask {
            Some(p) => read_mask(p)?,
            None => Image::filled(first.width, first.height, 1, 1.0),
        };
        ImageStack::new(images, mask)
    }
}

/// Rescale and padding applied to a capture before the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    /// Content size after the optional downscale.
    pub width: usize,
    pub height: usize,
    /// Square power-of-two side fed to the network.
    pub side: usize,
}

/// Fits the capture into `resolution` (downscaling if needed) and pads it
/// at the top-left to a power-of-two square of at least 64.
pub fn frame_capture(width: usize, height: usize, resolution: usize) -> Framing {
    let longest = width.max(height);
    let (w, h) = if longest > resolution {
        let s = resolution as f64 / longest as f64;
        (((width as f64 * s).round() as usize).max(1), ((height as f64 * s).round() as usize).max(1))
    } else {
        (width, height)
    };
    let side = next_pow2(w.max(h)).max(1 << MIN_REC_LEVEL);
    Framing { width: w, height: h, side }
}

/// Resizes and zero-pads every image and the mask of a stack.
pub fn pad_stack(stack: &ImageStack, framing: Framing) -> Result<ImageStack> {
    let fit = |img: &Image| img.resize(framing.width, framing.height).pad_into(framing.side, framing.side, 0, 0);
    let images = stack.images.iter().map(fit).collect::<Result<Vec<_>>>()?;
    let mask = fit(&stack.mask)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    if !is_pow2(mask.width) || mask.width != mask.height {
        return Err(Error::Shape(format!("padded side {} is not a power-of-two square", mask.width)));
    }
    Ok(ImageStack { images, mask, active: stack.active })
}

/// Predicted maps cropped back to the capture framing.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub maps: MapSet,
    pub mask: Image,
    /// Uncropped pyramid, 32×32 first.
    pub pyramid: Vec<MapSet>,
    pub framing: Framing,
}

/// Runs the recursion on any capture size.
pub fn predict(weights: &NetworkWeights, stack: &ImageStack, resolution: usize) -> Result<Prediction> {
    let framing = frame_capture(stack.mask.width, stack.mask.height, resolution);
    let padded = pad_stack(stack, framing)?;
    let (pyramid, trace) = recursive_predict_traced(weights, &padded)?;
    info!("recursion: InitNet at 32 then RecNet at {:?}", trace.applications.iter().map(|a| a.0).collect::<Vec<_>>());
    let top = pyramid.last().expect("pyramid has levels");
    let crop = |img: &Image| img.crop(0, 0, framing.width, framing.height);
    let mask = crop(&padded.mask)?;
    let mut maps = MapSet { normal: crop(&top.normal)?, albedo: crop(&top.albedo)?, roughness: crop(&top.roughness)? };
    maps.apply_mask(&mask);
    Ok(Prediction { maps, mask, pyramid, framing })
}

/// `n ↦ (n + 1) / 2` for display.
pub fn normal_to_rgb(normal: &Image) -> Image {
    normal.map(|v| 0.5 * (v + 1.0))
}

/// Files written by [`write_prediction`].
#[derive(Clone, Debug)]
pub struct InferenceOutputs {
    pub depth: DepthMap,
    pub mesh: Mesh,
    pub files: Vec<PathBuf>,
}

/// Writes maps (PNG and PFM), depth, mesh and optionally the pyramid under `out`.
pub fn write_prediction(pred: &Prediction, out: &Path, emit_pyramid: bool) -> Result<InferenceOutputs> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    let mut save = |name: &str, img: &Image, png: bool| -> Result<()> {
        let path = out.join(name);
        if png {
            write_png(&path, img, false)?;
        } else {
            write_pfm(&path, img)?;
        }
        files.push(path);
        Ok(())
    };
    save("normal.png", &normal_to_rgb(&pred.maps.normal), true)?;
    save("normal.pfm", &pred.maps.normal, false)?;
    save("albedo.png", &tonemap_srgb(&pred.maps.albedo), true)?;
    save("albedo.pfm", &pred.maps.albedo, false)?;
    save("roughness.png", &pred.maps.roughness, true)?;
    save("roughness.pfm", &pred.maps.roughness, false)?;
    save("mask.png", &pred.mask, true)?;
    let depth = integrate_normals(&pred.maps.normal, &pred.mask)?;
    save("depth.pfm", &depth.to_image(), false)?;
    let mesh = depth_to_mesh(&depth, Some(&pred.maps.albedo))?;
    let obj = out.join("mesh.obj");
    write_obj(&obj, &mesh)?;
    files.push(obj);
    if emit_pyramid {
        let dir = out.join("pyramid");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for level in &pred.pyramid {
            let s = level.width();
            for (name, img) in [
                ("normal", normal_to_rgb(&level.normal)),
                ("albedo", tonemap_srgb(&level.albedo)),
                ("roughness", level.roughness.clone()),
            ] {
                let path = dir.join(format!("{s:04}_{name}.png"));
                write_png(&path, &img, false)?;
                files.push(path);
            }
        }
    }
    Ok(InferenceOutputs { depth, mesh, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_pads_and_downscales() {
        assert_eq!(frame_capture(300, 200, 1024), Framing { width: 300, height: 200, side: 512 });
        assert_eq!(frame_capture(2048, 1024, 1024), Framing { width: 1024, height: 512, side: 1024 });
        assert_eq!(frame_capture(40, 40, 1024), Framing { width: 40, height: 40, side: 64 });
        assert_eq!(frame_capture(256, 256, 256).side, 256);
    }

    #[test]
    fn config_requires_front_slot_and_known_names() {
        let mut cfg = CaptureConfig::default();
        assert!(matches!(cfg.validate(), Err(Error::MissingCodirectional)));
        cfg.slots.insert("front".into(), "a.png".into());
        cfg.validate().unwrap();
        cfg.slots.insert("behind".into(), "b.png".into());
        assert!(cfg.validate().is_err());
        cfg.slots.remove("behind");
        cfg.resolution = 300;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = CaptureConfig::default();
        cfg.slots.insert("front".into(), "f.png".into());
        cfg.slots.insert("front-left".into(), "l.png".into());
        cfg.mask = Some("m.png".into());
        assert_eq!(CaptureConfig::from_text(&cfg.to_text().unwrap()).unwrap(), cfg);
    }
}
