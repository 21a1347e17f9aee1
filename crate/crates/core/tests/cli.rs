use std::path::Path;
use std::process::{Command, Output};

use pointnr::model::Model;
use pointnr::scene::RgbImage;

const BIN: &str = env!("CARGO_BIN_EXE_pointnr");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("spawn pointnr")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fails(args: &[&str], code: i32, tag: &str) -> String {
    let o = run(args);
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    assert_eq!(o.status.code(), Some(code), "{args:?}: {err}");
    let line = err.lines().find(|l| l.starts_with("error[")).expect("error line");
    assert!(line.starts_with(&format!("error[{tag}]: ")), "{line}");
    err
}

const TINY: &str = r#"
seed = 3
batch_size = 2
crop = 24
max_steps = 4
steps_per_epoch = 2
deterministic = true

[loss]
huber = 1000.0
vgg = 0.0
fft = 1.0

[renderer]
widths = [4, 4]
"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    let raw = root.join("raw");
    let scene = root.join("scene");
    let ckpt = root.join("ckpt");
    let cfg = root.join("train.toml");
    std::fs::write(&cfg, TINY).unwrap();

    ok(&["synth", "--out", s(&raw), "--size", "32", "--views", "9", "--grid", "16"]);
    let out = ok(&["prepare", "--manifest", s(&raw.join("manifest.toml")), "--out", s(&scene)]);
    assert!(out.contains("9 views (8 train, 1 test)"), "{out}");

    let out = ok(&["train", "--scene", s(&scene), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert!(out.contains("trained 4 steps (2 epochs)"), "{out}");
    assert!(ckpt.join("optimizer/state.safetensors").is_file());
    assert!(ckpt.join("log.jsonl").is_file());

    let r1 = root.join("r1");
    let r2 = root.join("r2");
    ok(&["render", "--ckpt", s(&ckpt), "--view-id", "2", "--out", s(&r1)]);
    ok(&["render", "--ckpt", s(&ckpt), "--view-id", "2", "--out", s(&r2)]);
    assert_eq!(
        std::fs::read(r1.join("000002.png")).unwrap(),
        std::fs::read(r2.join("000002.png")).unwrap()
    );
    let img = RgbImage::load(r1.join("000002.png")).unwrap();
    assert_eq!((img.width, img.height), (32, 32));
    let err = fails(&["render", "--ckpt", s(&ckpt), "--view-id", "77", "--out", s(&r1)], 3, "E_DATA");
    assert!(err.contains("valid ids: [1, 2, 3, 4, 5, 6, 7, 8, 9]"), "{err}");
    ok(&["render", "--ckpt", s(&ckpt), "--test-split", "--out", s(&r1), "--raster", "native"]);
    assert!(r1.join("000008.png").is_file());

    let ev = root.join("eval");
    let table = ok(&["eval", "--ckpt", s(&ckpt), "--no-lpips", "--out", s(&ev), "--dump-images"]);
    assert!(table.contains("mean"));
    let rows = std::fs::read_to_string(ev.join("metrics.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(ev.join("images/000008.png").is_file());
    fails(
        &["eval", "--ckpt", s(&ckpt), "--lpips", "/nonexistent/lpips.safetensors"],
        2,
        "E_CONFIG",
    );

    let (before, _) = Model::load(&ckpt).unwrap();
    let edited = root.join("edited");
    let out = ok(&["edit", "--ckpt", s(&ckpt), "--box", "5,5,5,6,6,6", "--out", s(&edited)]);
    assert!(out.contains("removed 0 points"), "{out}");
    assert_eq!(Model::load(&edited).unwrap().0, before);
    let out = ok(&["edit", "--ckpt", s(&edited), "--box=-1,-1,-1,0,0,1"]);
    assert!(out.starts_with("removed "), "{out}");
    let (after, _) = Model::load(&edited).unwrap();
    assert!(after.cloud.len() < before.cloud.len());
    assert_eq!(after.renderer, before.renderer);
    ok(&["render", "--ckpt", s(&edited), "--view-id", "1", "--out", s(&r2)]);
    fails(&["edit", "--ckpt", s(&edited), "--box=-100,-100,-100,100,100,100"], 3, "E_DATA");

    let aug = root.join("aug");
    let out = ok(&[
        "augment", "--scene", s(&scene), "--ckpt", s(&ckpt), "--config", s(&cfg), "--rounds", "2", "--out", s(&aug),
        "--seed", "9",
    ]);
    assert!(out.contains("after 2 round(s)"), "{out}");
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(aug.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["rounds"].as_array().unwrap().len(), 2);
    assert!(aug.join("points.ply").is_file());
    let (augmented, _) = Model::load(aug.join("checkpoint")).unwrap();
    assert!(augmented.cloud.len() >= before.cloud.len());
    assert_eq!(&augmented.cloud.positions[..before.cloud.len()], &before.cloud.positions[..]);
}

#[test]
fn configuration_and_data_errors_have_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    fails(&["prepare", "--manifest", s(&root.join("missing.toml")), "--out", s(&root.join("o"))], 3, "E_DATA");

    let raw = root.join("raw");
    ok(&["synth", "--out", s(&raw), "--size", "24", "--views", "3", "--grid", "8"]);
    let scene = root.join("scene");
    ok(&["prepare", "--manifest", s(&raw.join("manifest.toml")), "--out", s(&scene)]);
    let bad = root.join("bad.toml");
    std::fs::write(&bad, "learning_rate = 3\n").unwrap();
    fails(&["train", "--scene", s(&scene), "--config", s(&bad), "--out", s(&root.join("c"))], 2, "E_CONFIG");
    std::fs::write(&bad, "lr_texture = -1.0\n").unwrap();
    fails(&["train", "--scene", s(&scene), "--config", s(&bad), "--out", s(&root.join("c"))], 2, "E_CONFIG");
    std::fs::write(&bad, "crop = 16\n[vgg]\npath = \"/nonexistent/vgg19.safetensors\"\n").unwrap();
    let err = fails(&["train", "--scene", s(&scene), "--config", s(&bad), "--out", s(&root.join("c"))], 2, "E_CONFIG");
    assert!(err.contains("vgg19"), "{err}");
    fails(&["render", "--ckpt", s(&root.join("nope")), "--view-id", "1", "--out", s(root)], 3, "E_DATA");
}
