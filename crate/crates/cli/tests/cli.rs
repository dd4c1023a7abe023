use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use homelight::eval::{write_ps_object, PsObject};
use homelight::io::{write_pfm, write_png};
use homelight::netarch::{save_checkpoint, NetConfig, NetworkWeights};
use homelight::raster::Image;
use homelight::render::{generate_bundle, RenderOptions};
use homelight::scene::SceneConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn homelight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homelight"))
        .args(args)
        .env("HOMELIGHT_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = homelight(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            files.extend(tree(&path));
        } else {
            files.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
        }
    }
    files.sort();
    files
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        ok(&["gen-data", "--scenes", "2", "--res", "64", "--seed", seed, "--out", s(dir)]);
    }
    let (ta, tb, tc) = (tree(&a), tree(&b), tree(&c));
    assert!(ta.iter().any(|(n, _)| n.ends_with("img_0.pfm")));
    assert_eq!(ta.len(), 2 * 11);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn train_writes_checkpoint_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen-data", "--scenes", "2", "--res", "64", "--out", s(&data)]);
    ok(&[
        "train", "--data", s(&data), "--out", s(&run), "--max-steps", "2", "--width", "4", "--resolution", "64",
        "--batch-size", "1",
    ]);
    assert!(run.join("model.bin").is_file());
    assert!(run.join("loss.csv").is_file());
    let cfg = fs::read_to_string(run.join("train.toml")).unwrap();
    assert!(cfg.contains("width = 4"), "{cfg}");
}

#[test]
fn eval_with_ground_truth_oracle_scores_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bundle = generate_bundle(&mut rng, &SceneConfig::default(), 64, RenderOptions::default()).unwrap();
    write_ps_object(&PsObject::from_bundle("ball", &bundle), &tmp.path().join("objects/ball")).unwrap();
    let csv = tmp.path().join("out/results.csv");
    ok(&["eval", "--data", s(&tmp.path().join("objects")), "--oracle", "--sigmas", "0,0.2", "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "object,n_images,deviation,sigma,MAE");
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        assert!(line.starts_with("ball,3,"), "{line}");
        assert!(line.ends_with(",0.0"), "{line}");
    }
}

#[test]
fn integrate_plane_gives_mesh() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, h) = (12, 9);
    let n = homelight::math::Vec3::new(0.3, -0.2, 1.0).normalize();
    let mut normals = Image::zeros(w, h, 3);
    for r in 0..h {
        for c in 0..w {
            normals.set(0, r, c, n.x as f32);
            normals.set(1, r, c, n.y as f32);
            normals.set(2, r, c, n.z as f32);
        }
    }
    let path = tmp.path().join("n.pfm");
    write_pfm(&path, &normals).unwrap();
    let out = tmp.path().join("geo");
    ok(&["integrate", "--normals", s(&path), "--out", s(&out)]);
    assert!(out.join("depth.pfm").is_file());
    let obj = fs::read_to_string(out.join("mesh.obj")).unwrap();
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), w * h);
    assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 2 * (w - 1) * (h - 1));
}

#[test]
fn infer_pads_and_crops_to_the_capture() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ckpt = tmp.path().join("net.bin");
    save_checkpoint(&NetworkWeights::new(NetConfig { width: 4, max_level: 6 }, false, &mut rng), &ckpt).unwrap();
    let front = tmp.path().join("front.png");
    let side = tmp.path().join("side.png");
    write_png(&front, &Image::filled(50, 40, 3, 0.5), false).unwrap();
    write_png(&side, &Image::filled(50, 40, 3, 0.3), false).unwrap();
    let out = tmp.path().join("pred");
    let front_arg = format!("front={}", s(&front));
    let side_arg = format!("front-left={}", s(&side));
    ok(&[
        "infer", "--checkpoint", s(&ckpt), "--image", &front_arg, "--image", &side_arg, "--out", s(&out),
        "--emit-pyramid",
    ]);
    let normal = homelight::io::read_pfm(&out.join("normal.pfm")).unwrap();
    assert_eq!((normal.width, normal.height), (50, 40));
    assert!(out.join("mesh.obj").is_file());
    assert!(out.join("pyramid/0032_normal.png").is_file());
    assert!(out.join("pyramid/0064_albedo.png").is_file());
}

#[test]
fn rf_probe_reports_radii() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rf");
    let res = ok(&["rf-probe", "--res", "64", "--pixel", "32,32", "--width", "4", "--out", s(&out)]);
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.contains("recnet_radius"), "{text}");
    assert!(out.join("rf_recnet.png").is_file());
    assert!(out.join("rf_resnet.pfm").is_file());
}

#[test]
fn bad_invocations_fail_with_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let missing = homelight(&["eval", "--data", s(tmp.path()), "--out", s(&out)]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--checkpoint or --oracle"));

    let ckpt = tmp.path().join("none.bin");
    let slot = homelight(&["infer", "--checkpoint", s(&ckpt), "--image", "behind=a.png", "--out", s(&out)]);
    assert!(!slot.status.success());
    assert!(String::from_utf8_lossy(&slot.stderr).contains("unknown slot"));

    let flag = homelight(&["gen-data", "--res"]);
    assert!(!flag.status.success());
    let no_out = homelight(&["gen-data"]);
    assert!(!no_out.status.success());
}
