use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use extremal::imageio::{load_image, save_image_png};
use extremal::Tensor;

fn extremal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_extremal"))
        .args(args)
        .env("EXTREMAL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, args: &[&str], out: &str) -> PathBuf {
        let dir = self.path(out);
        let mut all = vec!["synth"];
        all.extend_from_slice(args);
        all.extend_from_slice(&["--out", s(&dir)]);
        let o = extremal(&all);
        assert!(o.status.success(), "{}", stderr(&o));
        dir
    }
}

#[test]
fn attribute_finds_the_planted_box_area() {
    let ws = Workspace::new();
    let m = ws.synth(&["region", "--size", "48", "--box", "16,17,15,15"], "m");
    let out = ws.path("run");
    let o = extremal(&[
        "attribute",
        "--model",
        s(&m.join("model.json")),
        "--image",
        s(&m.join("image.ft1")),
        "--perturbation",
        "fade",
        "--tau",
        "0.9",
        "--iterations",
        "400",
        "--areas",
        "0.05,0.1,0.2,0.4",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    // the box covers 225 of 2304 pixels
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "a* = 0.1");
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(summary["a_star"], 0.1);
    assert_eq!(summary["mask_files"].as_array().unwrap().len(), 4);
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 5);
    for f in ["run.json", "masks/mask_0.1000.png", "masks/mask_0.1000.ft1"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn png_images_are_accepted() {
    let ws = Workspace::new();
    let m = ws.synth(&["region", "--size", "24", "--box", "6,6,8,8"], "m");
    let png = ws.path("x.png");
    let image = load_image(m.join("image.ft1")).unwrap();
    save_image_png(&image.map(|v| v.min(1.0)), &png).unwrap();
    let o = extremal(&[
        "attribute",
        "--model",
        s(&m.join("model.json")),
        "--image",
        s(&png),
        "--iterations",
        "20",
        "--areas",
        "0.2",
        "--out",
        s(&ws.path("run")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn missing_model_is_an_input_error_naming_the_path() {
    let ws = Workspace::new();
    let missing = ws.path("absent.json");
    let o = extremal(&[
        "attribute",
        "--model",
        s(&missing),
        "--image",
        "x.ft1",
        "--out",
        s(&ws.path("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
    assert!(!ws.path("o").exists());
}

#[test]
fn empty_area_grid_is_an_input_error() {
    let ws = Workspace::new();
    let m = ws.synth(&["region", "--size", "24", "--box", "6,6,8,8"], "m");
    for areas in ["", "0.1,1.5"] {
        let o = extremal(&[
            "attribute",
            "--model",
            s(&m.join("model.json")),
            "--image",
            s(&m.join("image.ft1")),
            "--areas",
            areas,
            "--out",
            s(&ws.path("o")),
        ]);
        assert_eq!(o.status.code(), Some(2), "{areas:?}: {}", stderr(&o));
    }
}

#[test]
fn mismatched_image_is_an_input_error() {
    let ws = Workspace::new();
    let m = ws.synth(&["region", "--size", "24", "--box", "6,6,8,8"], "m");
    let other = ws.synth(&["region", "--size", "32", "--box", "6,6,8,8"], "other");
    let o = extremal(&[
        "attribute",
        "--model",
        s(&m.join("model.json")),
        "--image",
        s(&other.join("image.ft1")),
        "--out",
        s(&ws.path("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("shape"), "{}", stderr(&o));
}

#[test]
fn overflowing_score_is_a_numerical_abort() {
    let ws = Workspace::new();
    let m = ws.synth(
        &["region", "--size", "16", "--box", "4,4,6,6", "--weight", "1e308"],
        "m",
    );
    let bright = ws.path("bright.ft1");
    Tensor::full(&[3, 16, 16], 10.0).save_ft1(&bright).unwrap();
    let o = extremal(&[
        "attribute",
        "--model",
        s(&m.join("model.json")),
        "--image",
        s(&bright),
        "--out",
        s(&ws.path("o")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn channels_recover_the_planted_set() {
    let ws = Workspace::new();
    let m = ws.synth(&["channels"], "m");
    let out = ws.path("c");
    let o = extremal(&[
        "channels",
        "--model",
        s(&m.join("model.json")),
        "--image",
        s(&m.join("image.ft1")),
        "--counts",
        "1,3,5,8,16",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["a_star"], 3);
    assert_eq!(summary["selected_channels"], serde_json::json!([2, 7, 11]));
    let weights = std::fs::read_to_string(out.join("channel_mask.csv")).unwrap();
    assert_eq!(weights.lines().count(), 17);
    assert!(out.join("overlay.ft1").exists() && out.join("overlay.png").exists());
}

#[test]
fn channel_input_errors() {
    let ws = Workspace::new();
    let region = ws.synth(&["region", "--size", "16", "--box", "4,4,6,6"], "r");
    let ch = ws.synth(&["channels"], "c");
    let out = ws.path("o");
    let run = |model: &Path, image: &Path, extra: &[&str]| {
        let mut args = vec!["channels", "--model", s(model), "--image", s(image), "--out", s(&out)];
        args.extend_from_slice(extra);
        extremal(&args)
    };
    let unsplittable = run(&region.join("model.json"), &region.join("image.ft1"), &[]);
    assert_eq!(unsplittable.status.code(), Some(2));
    assert!(stderr(&unsplittable).contains("split"));
    let bad_split = run(&ch.join("model.json"), &ch.join("image.ft1"), &["--split", "9"]);
    assert_eq!(bad_split.status.code(), Some(2), "{}", stderr(&bad_split));
    let too_many = run(&ch.join("model.json"), &ch.join("image.ft1"), &["--counts", "1,17"]);
    assert_eq!(too_many.status.code(), Some(2), "{}", stderr(&too_many));
}

#[test]
fn invert_writes_an_image_and_trace() {
    let ws = Workspace::new();
    let m = ws.synth(&["channels"], "m");
    let out = ws.path("inv");
    let o = extremal(&[
        "invert",
        "--model",
        s(&m.join("model.json")),
        "--image",
        s(&m.join("image.ft1")),
        "--channels",
        "2,7",
        "--steps",
        "30",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let image = Tensor::load_ft1(out.join("inversion.ft1")).unwrap();
    assert_eq!(image.shape(), &[3, 16, 16]);
    assert_eq!(
        std::fs::read_to_string(out.join("trace.csv")).unwrap().lines().count(),
        32
    );
}

#[test]
fn pointing_reports_accuracy() {
    let ws = Workspace::new();
    let data = ws.synth(&["pointing", "--items", "3", "--seed", "2"], "d");
    let out = ws.path("p");
    let o = extremal(&[
        "pointing",
        "--manifest",
        s(&data.join("manifest.json")),
        "--perturbation",
        "fade",
        "--iterations",
        "200",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("pointing.json")).unwrap()).unwrap();
    assert_eq!(summary["all"]["accuracy"], 1.0);
    let log = std::fs::read_to_string(out.join("pointing.csv")).unwrap();
    assert!(log.starts_with("item,class,hit"));
}

#[test]
fn pointing_names_an_item_with_a_missing_image() {
    let ws = Workspace::new();
    let data = ws.synth(&["pointing", "--items", "2"], "d");
    std::fs::remove_file(data.join("item001.ft1")).unwrap();
    let o = extremal(&[
        "pointing",
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(&ws.path("p")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("item001"), "{}", stderr(&o));
}

#[test]
fn rerun_reproduces_outputs_bitwise() {
    let ws = Workspace::new();
    let m = ws.synth(&["conv", "--size", "16", "--width", "4", "--pool", "4"], "m");
    let first = ws.path("first");
    let o = extremal(&[
        "attribute",
        "--model",
        s(&m.join("model.json")),
        "--image",
        s(&m.join("image.ft1")),
        "--iterations",
        "40",
        "--areas",
        "0.1,0.3",
        "--out",
        s(&first),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second = ws.path("second");
    let o = extremal(&["rerun", "--config", s(&first.join("run.json")), "--out", s(&second)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "curve.csv",
        "sweep.json",
        "masks/mask_0.1000.ft1",
        "masks/mask_0.3000.png",
    ] {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
    let record: serde_json::Value = serde_json::from_slice(&std::fs::read(second.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["out"], s(&second));
}

#[test]
fn selftest_passes() {
    let o = extremal(&["selftest", "--trials", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(extremal(&["attribute"]).status.code(), Some(2));
    assert_eq!(extremal(&["frobnicate"]).status.code(), Some(2));
}
