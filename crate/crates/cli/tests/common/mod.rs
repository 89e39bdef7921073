#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geomatch"))
}

/// Runs the binary and returns its output; `env` is applied on top of the
/// inherited environment with `GEOMATCH_THREADS` cleared.
pub fn run(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = bin();
    c.args(args).env_remove("GEOMATCH_THREADS");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("spawn geomatch")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args, &[]);
    assert!(
        out.status.success(),
        "geomatch {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

/// Validates `doc` against `schemas/<name>.schema.json`.
pub fn assert_valid(name: &str, doc: &Value) {
    let schema = read_json(&schema_dir().join(format!("{name}.schema.json")));
    let v = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}");
}

/// A generated corpus on disk: `annotations.json`, `features/`, `schemas/`.
pub struct SynthFixture {
    pub dir: tempfile::TempDir,
}

impl SynthFixture {
    pub fn new(images: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        ok(&[
            "synth",
            "--out",
            s(dir.path()),
            "--images",
            &images.to_string(),
            "--seed",
            &seed.to_string(),
        ]);
        Self { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn dataset(&self) -> PathBuf {
        self.path().join("annotations.json")
    }

    pub fn features(&self) -> PathBuf {
        self.path().join("features")
    }

    pub fn schemas(&self) -> PathBuf {
        self.path().join("schemas")
    }

    /// `--dataset ... --features ... --schemas ...`
    pub fn inputs(&self) -> Vec<String> {
        vec![
            "--dataset".into(),
            s(&self.dataset()).into(),
            "--features".into(),
            s(&self.features()).into(),
            "--schemas".into(),
            s(&self.schemas()).into(),
        ]
    }
}

/// Runs `geomatch <args> <fixture inputs>`.
pub fn ok_with(args: &[&str], fx: &SynthFixture) -> Output {
    let inputs = fx.inputs();
    let mut all: Vec<&str> = args.to_vec();
    all.extend(inputs.iter().map(String::as_str));
    ok(&all)
}

/// One-category COCO file with the given keypoints (all visible) per image.
pub fn coco(width: usize, height: usize, images: &[(u64, Vec<(f64, f64)>)]) -> Value {
    let imgs: Vec<Value> = images
        .iter()
        .map(|(id, _)| json!({"id": id, "width": width, "height": height}))
        .collect();
    let anns: Vec<Value> = images
        .iter()
        .enumerate()
        .map(|(i, (id, kps))| {
            let flat: Vec<f64> = kps.iter().flat_map(|&(x, y)| [x, y, 2.0]).collect();
            json!({
                "id": i + 1,
                "image_id": id,
                "category_id": 1,
                "keypoints": flat,
                "bbox": [0.0, 0.0, width as f64 - 1.0, height as f64 - 1.0],
            })
        })
        .collect();
    json!({
        "images": imgs,
        "annotations": anns,
        "categories": [{"id": 1, "name": "cat", "supercategory": "felidae"}],
    })
}
