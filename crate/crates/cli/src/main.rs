use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use homelight::eval::{
    evaluate_lights, load_ps_object, parse_light_list, slot_target, sweep_angular_deviation, write_records, EvalRecord,
    GroundTruthModel, NetworkModel, NormalModel, ProtocolOptions, EVAL_EXPOSURE,
};
use homelight::geometry::{depth_to_mesh, integrate_normals, write_obj};
use homelight::infer::{predict, write_prediction, CaptureConfig};
use homelight::io::{read_any, read_mask, write_pfm, write_png};
use homelight::netarch::{load_checkpoint, rf_probe, NetworkWeights};
use homelight::raster::Image;
use homelight::render::{generate_bundle, RenderOptions};
use homelight::scene::{SceneConfig, SLOT_NAMES};
use homelight::training::{load_dataset, train, TrainConfig};

/// Shape and reflectance capture from flashlight photographs.
#[derive(Parser)]
#[command(name = "homelight", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random choice of the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Root directory for all outputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic training scenes.
    GenData(GenData),
    /// Train InitNet and RecNet on rendered scenes.
    Train(Train),
    /// Predict maps, depth and a mesh from a capture.
    Infer(Infer),
    /// Integrate a normal map into depth and a mesh.
    Integrate(Integrate),
    /// Mean angular error on photometric-stereo objects.
    Eval(Eval),
    /// Gradient-support maps of the recursion and the ResNet baseline.
    RfProbe(RfProbe),
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long, default_value_t = 256)]
    res: usize,
    /// Scene sampling parameters (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    supersample: bool,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Training parameters (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Resume from a checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct Infer {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Capture description (TOML); slot flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `slot=path` pairs, e.g. `front=img0.png`.
    #[arg(long = "image", value_name = "SLOT=PATH")]
    images: Vec<String>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    emit_pyramid: bool,
}

#[derive(Args)]
struct Integrate {
    #[command(flatten)]
    common: Common,
    /// Three-channel normal map (PFM, or PNG encoded as (n + 1) / 2).
    #[arg(long)]
    normals: PathBuf,
    /// Foreground mask; defaults to pixels with a nonzero normal.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Optional albedo for vertex colors.
    #[arg(long)]
    albedo: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    /// One object directory or a directory of them.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score ground truth as the prediction (harness self-test).
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value = "front,front-left,front-right")]
    lights: String,
    /// Comma-separated intensity noise levels.
    #[arg(long, default_value = "0")]
    sigmas: String,
    /// Comma-separated inward deviations (degrees) of the side lights.
    #[arg(long)]
    deviations: Option<String>,
    /// Keep the data's exposure instead of normalizing each image.
    #[arg(long)]
    raw_exposure: bool,
    #[arg(long, default_value_t = 1024)]
    res: usize,
}

#[derive(Args)]
struct RfProbe {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 512)]
    res: usize,
    /// Probed output pixel as `row,col`.
    #[arg(long, default_value = "256,256")]
    pixel: String,
    /// Network width (memory grows with width times resolution squared).
    #[arg(long, default_value_t = homelight::netarch::DEFAULT_WIDTH)]
    width: usize,
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number '{t}'"))).collect()
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(a: GenData) -> Result<()> {
    let config = match &a.config {
        Some(p) => SceneConfig::from_text(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SceneConfig::default(),
    };
    create_out(&a.common.out)?;
    let options = RenderOptions { supersample: a.supersample };
    (0..a.scenes).into_par_iter().try_for_each(|i| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
        rng.set_stream(i as u64);
        let bundle = generate_bundle(&mut rng, &config, a.res, options)?;
        bundle.save(&a.common.out.join(format!("scene_{i:05}")))?;
        info!("scene {i} done");
        Ok(())
    })
}

fn train_cmd(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_text(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.common.seed;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(v) = a.width {
        cfg.network.width = v;
    }
    if let Some(v) = a.resolution {
        cfg.resolution = v;
    }
    if a.data.is_some() {
        cfg.data = a.data.clone();
    }
    cfg.validate()?;
    let data_dir = cfg.data.clone().context("no training data: pass --data or set `data` in the config")?;
    let dataset = load_dataset(&data_dir)?;
    info!("{} scenes from {}", dataset.len(), data_dir.display());
    create_out(&a.common.out)?;
    fs::write(a.common.out.join("train.toml"), cfg.to_text()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = match &a.checkpoint {
        Some(p) => {
            let w = load_checkpoint(p, None)?;
            if w.config.width != cfg.network.width {
                bail!("checkpoint width {} differs from the configured width {}", w.config.width, cfg.network.width);
            }
            w
        }
        None => NetworkWeights::new(cfg.network, false, &mut rng),
    };
    let log = train(&cfg, &dataset, &mut weights, &mut rng, Some(&a.common.out))?;
    if let Some(last) = log.last() {
        info!("finished after {} steps, last loss {:.5}", last.step + 1, last.loss.total);
    }
    Ok(())
}

fn infer_cmd(a: Infer) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => CaptureConfig::from_text(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => CaptureConfig::default(),
    };
    for pair in &a.images {
        let (slot, path) = pair.split_once('=').with_context(|| format!("expected SLOT=PATH, got '{pair}'"))?;
        if !SLOT_NAMES.contains(&slot) {
            bail!("unknown slot '{slot}' (expected one of {SLOT_NAMES:?})");
        }
        cfg.slots.insert(slot.to_string(), PathBuf::from(path));
    }
    if a.mask.is_some() {
        cfg.mask = a.mask.clone();
    }
    if let Some(r) = a.res {
        cfg.resolution = r;
    }
    cfg.validate()?;
    let weights = load_checkpoint(&a.checkpoint, None)?;
    let stack = cfg.load()?;
    let pred = predict(&weights, &stack, cfg.resolution)?;
    let outputs = write_prediction(&pred, &a.common.out, a.emit_pyramid)?;
    info!("{} levels, wrote {} files", pred.pyramid.len(), outputs.files.len());
    Ok(())
}

fn read_normals(path: &Path) -> Result<Image> {
    let img = read_any(path)?;
    if img.channels != 3 {
        bail!("{} is not a 3-channel normal map", path.display());
    }
    let is_pfm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    Ok(if is_pfm { img } else { img.map(|v| 2.0 * v - 1.0) })
}

fn integrate_cmd(a: Integrate) -> Result<()> {
    let normals = read_normals(&a.normals)?;
    let mask = match &a.mask {
        Some(p) => read_mask(p)?,
        None => {
            let n = normals.plane_len();
            let data = (0..n)
                .map(|i| {
                    let l = (0..3).map(|c| normals.data[c * n + i].powi(2)).sum::<f32>();
                    if l > 0.25 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Image::from_data(normals.width, normals.height, 1, data)?
        }
    };
    let albedo = a.albedo.as_deref().map(read_any).transpose()?;
    create_out(&a.common.out)?;
    let depth = integrate_normals(&normals, &mask)?;
    write_pfm(&a.common.out.join("depth.pfm"), &depth.to_image())?;
    write_obj(&a.common.out.join("mesh.obj"), &depth_to_mesh(&depth, albedo.as_ref())?)?;
    Ok(())
}

fn object_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("light_directions.txt").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("light_directions.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no objects (directories with light_directions.txt) under {}", root.display());
    }
    Ok(dirs)
}

fn eval_cmd(a: Eval) -> Result<()> {
    let weights = match (&a.checkpoint, a.oracle) {
        (Some(p), _) => Some(load_checkpoint(p, None)?),
        (None, true) => None,
        (None, false) => bail!("pass --checkpoint or --oracle"),
    };
    let lights = parse_light_list(&a.lights)?;
    let sigmas = parse_list(&a.sigmas)?;
    let exposure = (!a.raw_exposure).then_some(EVAL_EXPOSURE);
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let mut records = Vec::new();
    for dir in object_dirs(&a.data)? {
        let obj = load_ps_object(&dir)?;
        let oracle = GroundTruthModel(obj.normals.clone());
        let net = weights.as_ref().map(|w| NetworkModel { weights: w, resolution: a.res });
        let model: &dyn NormalModel = match &net {
            Some(n) => n,
            None => &oracle,
        };
        for &sigma in &sigmas {
            let opts = ProtocolOptions { exposure, sigma };
            match &a.deviations {
                None => records.push(evaluate_lights(&obj, model, &lights, opts, &mut rng)?),
                Some(devs) => {
                    let sides = [slot_target("front-right")?.1, slot_target("front-left")?.1];
                    for row in sweep_angular_deviation(&obj, model, &parse_list(devs)?, sides, opts, &mut rng)? {
                        records.push(EvalRecord {
                            object: obj.name.clone(),
                            n_images: 3,
                            deviation: row.achieved,
                            sigma,
                            mae: row.mae,
                        });
                    }
                }
            }
        }
        for r in records.iter().filter(|r| r.object == obj.name) {
            println!("{}\t{} images\tdeviation {:.1}\tsigma {}\tMAE {:.1}", r.object, r.n_images, r.deviation, r.sigma, r.mae);
        }
    }
    let path = if a.common.out.extension().is_some_and(|e| e == "csv") {
        if let Some(parent) = a.common.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_out(parent)?;
        }
        a.common.out.clone()
    } else {
        create_out(&a.common.out)?;
        a.common.out.join("results.csv")
    };
    write_records(&path, &records)?;
    Ok(())
}

/// Log-scaled support image: zero stays black, the largest entry is white.
fn support_image(field: &Image) -> Image {
    let max = field.data.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return field.clone();
    }
    field.map(|v| if v > 0.0 { (1.0 + (v / max).log10() / 8.0).clamp(0.05, 1.0) } else { 0.0 })
}

fn rf_probe_cmd(a: RfProbe) -> Result<()> {
    let (r, c) = a.pixel.split_once(',').context("--pixel expects row,col")?;
    let pixel = (r.trim().parse::<usize>()?, c.trim().parse::<usize>()?);
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let probe = rf_probe(a.width, a.res, pixel, &mut rng)?;
    create_out(&a.common.out)?;
    write_png(&a.common.out.join("rf_recnet.png"), &support_image(&probe.recnet), false)?;
    write_png(&a.common.out.join("rf_resnet.png"), &support_image(&probe.resnet), false)?;
    write_pfm(&a.common.out.join("rf_recnet.pfm"), &probe.recnet)?;
    write_pfm(&a.common.out.join("rf_resnet.pfm"), &probe.resnet)?;
    let fmt = |r: Option<usize>| r.map_or("none".to_string(), |r| r.to_string());
    let report = format!(
        "recnet_radius {}\nresnet_radius {}\n",
        fmt(probe.recnet_radius),
        fmt(probe.resnet_radius)
    );
    fs::write(a.common.out.join("radii.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if std::env::var("HOMELIGHT_DETERMINISTIC").is_ok_and(|v| v == "1") {
        rayon::ThreadPoolBuilder::new().num_threads(1).build_global().context("configuring the thread pool")?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Integrate(a) => integrate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::RfProbe(a) => rf_probe_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
