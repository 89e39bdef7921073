mod common;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use common::*;
use geomatch::benchgen::{AnnotationCorpus, PairManifest};
use geomatch::geoware::{AnnotatedPair, SubgroupSchema};
use geomatch::matcher::{match_keypoints, InferenceConfig};
use geomatch::metrics::{evaluate, EvalConfig, PairPredictions};
use geomatch::tensor::{grid_to_image, image_to_grid};
use geomatch::{npy, FeatureMap, ViewTransform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const SMALL_BENCH: &str = "[benchmark]\nn_val = 3\nn_test = 4\nholdout_below = 6\ntrain_pair_factor = 2\n";

fn small_bench(fx: &SynthFixture) -> std::path::PathBuf {
    let cfg = fx.path().join("bench.toml");
    fs::write(&cfg, SMALL_BENCH).unwrap();
    let out = fx.path().join("bench");
    ok_with(&["build-benchmark", "--out", s(&out), "--config", s(&cfg)], fx);
    out
}

fn body(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("stamp");
    v
}

fn random_features(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0f32..1.0))
        .unwrap()
        .l2_normalize()
        .unwrap()
}

/// An 8x8-pixel dataset on an 8x8 grid (pixels and cells coincide), with
/// random distinct descriptors and keypoints on pixel centres.
fn tiny_dataset(dir: &Path, images: u64, kps: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fdir = dir.join("features");
    fs::create_dir_all(&fdir).unwrap();
    let mut anns = Vec::new();
    for id in 1..=images {
        let pts: Vec<(f64, f64)> = (0..kps)
            .map(|_| (rng.random_range(0..8) as f64, rng.random_range(0..8) as f64))
            .collect();
        anns.push((id, pts));
        for v in [ViewTransform::Identity, ViewTransform::Hflip] {
            npy::write_feature_map(&fdir.join(format!("{id}__{}.npy", v.name())), &random_features(8, 8, 6, &mut rng))
                .unwrap();
        }
    }
    fs::write(dir.join("annotations.json"), coco(8, 8, &anns).to_string()).unwrap();
    let manifest = json!({
        "grid_height": 8, "grid_width": 8, "channels": 6,
        "variants": ["identity", "hflip"], "images": (1..=images).collect::<Vec<_>>(),
    });
    fs::write(fdir.join("manifest.json"), manifest.to_string()).unwrap();
}

fn pair_manifest(path: &Path, pairs: &[(u64, u64, Vec<usize>)]) {
    let m = json!({
        "setting": "intra", "part": "test", "seed": 0,
        "pairs": pairs.iter().map(|(a, b, k)| json!({"src_id": a, "tgt_id": b, "mutual_visible": k})).collect::<Vec<_>>(),
    });
    fs::write(path, m.to_string()).unwrap();
}

#[test]
fn outputs_validate_against_shipped_schemas() {
    let fx = SynthFixture::new(90, 1);
    assert_valid("annotations", &read_json(&fx.dataset()));
    assert_valid("feature-manifest", &read_json(&fx.features().join("manifest.json")));
    assert_valid("subgroup", &read_json(&fx.schemas().join("ap10k.json")));
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/schemas/ap10k.json");
    assert_valid("subgroup", &read_json(&shipped));

    let bench = small_bench(&fx);
    for f in fs::read_dir(&bench).unwrap() {
        let p = f.unwrap().path();
        let name = match p.file_stem().unwrap().to_str().unwrap() {
            "split" => "split",
            "stats" => "stats",
            _ => "pair-manifest",
        };
        assert_valid(name, &read_json(&p));
    }

    let test = bench.join("intra_test.json");
    let out = fx.path().join("out");
    let preds = out.join("preds.json");
    ok_with(&["match", s(&test), "--out", s(&preds), "--align"], &fx);
    assert_valid("predictions", &read_json(&preds));
    ok_with(&["align", s(&test), "--out", s(&out.join("align.json"))], &fx);
    assert_valid("alignments", &read_json(&out.join("align.json")));
    ok_with(&["evaluate", s(&test), "--preds", s(&preds), "--out", s(&out.join("report.json"))], &fx);
    assert_valid("report", &read_json(&out.join("report.json")));

    let cfg = fx.path().join("train.toml");
    fs::write(&cfg, "[train]\nsteps = 6\nhidden = 4\ncheckpoint_every = 3\n").unwrap();
    let model = out.join("model");
    ok_with(&["train", s(&bench.join("intra_train.json")), "--out", s(&model), "--config", s(&cfg)], &fx);
    assert_valid("train", &read_json(&model.join("train.json")));

    let templates = out.join("templates");
    for set in ["a", "b"] {
        fs::create_dir_all(templates.join(set)).unwrap();
        for (label, v) in [("right", ViewTransform::Identity), ("left", ViewTransform::Hflip)] {
            fs::copy(
                fx.features().join(format!("7__{}.npy", v.name())),
                templates.join(set).join(format!("{label}.npy")),
            )
            .unwrap();
        }
    }
    let pose = out.join("pose.json");
    ok_with(&["predict-pose", "7", "--templates", s(&templates), "--out", s(&pose)], &fx);
    let p = read_json(&pose);
    assert_valid("pose", &p);
    assert_eq!(p["label"], "right");
    assert_eq!(p["votes"]["right"], 2);
}

#[test]
fn self_pairs_under_argmax_recover_annotations() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), 3, 5, 11);
    let m = dir.path().join("self.json");
    pair_manifest(&m, &[(1, 1, vec![0, 1, 2, 3, 4]), (2, 2, vec![0, 2, 4]), (3, 3, vec![1, 3])]);
    let preds = dir.path().join("preds.json");
    ok(&[
        "match", s(&m), "--mode", "argmax", "--out", s(&preds),
        "--dataset", s(&dir.path().join("annotations.json")), "--features", s(&dir.path().join("features")),
    ]);
    let coco = read_json(&dir.path().join("annotations.json"));
    let p = read_json(&preds);
    for (pair, ann) in p["pairs"].as_array().unwrap().iter().zip(coco["annotations"].as_array().unwrap()) {
        let flat = ann["keypoints"].as_array().unwrap();
        for (k, pt) in pair["keypoints"].as_object().unwrap() {
            let k: usize = k.parse().unwrap();
            assert_eq!(pt["x"], flat[3 * k], "pair {} kp {k}", pair["id"]);
            assert_eq!(pt["y"], flat[3 * k + 1], "pair {} kp {k}", pair["id"]);
        }
    }
}

#[test]
fn window_of_one_equals_argmax() {
    let fx = SynthFixture::new(60, 2);
    let bench = small_bench(&fx);
    let test = bench.join("intra_test.json");
    let (a, b) = (fx.path().join("a.json"), fx.path().join("b.json"));
    ok_with(&["match", s(&test), "--mode", "argmax", "--out", s(&a)], &fx);
    ok_with(&["match", s(&test), "--mode", "window", "--window", "1", "--out", s(&b)], &fx);
    let (a, b) = (read_json(&a), read_json(&b));
    assert!(!a["pairs"].as_array().unwrap().is_empty());
    assert_eq!(a["pairs"], b["pairs"]);
}

#[test]
fn match_equals_library_composition() {
    let fx = SynthFixture::new(60, 3);
    let bench = small_bench(&fx);
    let test = bench.join("intra_test.json");
    let preds = fx.path().join("p.json");
    ok_with(&["match", s(&test), "--out", s(&preds)], &fx);

    let corpus = AnnotationCorpus::from_coco(&fs::read_to_string(fx.dataset()).unwrap()).unwrap();
    let manifest: PairManifest = serde_json::from_value(read_json(&test)).unwrap();
    let cfg = InferenceConfig::default();
    let load = |id: u64| {
        npy::read_feature_map(&fx.features().join(format!("{id}__identity.npy")))
            .unwrap()
            .l2_normalize()
            .unwrap()
    };
    let file = read_json(&preds);
    for (r, got) in manifest.pairs.iter().zip(file["pairs"].as_array().unwrap()) {
        let (src, tgt) = (load(r.src_id), load(r.tgt_id));
        let sk = &corpus.get(r.src_id).unwrap().keypoints;
        let tk = &corpus.get(r.tgt_id).unwrap().keypoints;
        let q: Vec<_> = r
            .mutual_visible
            .iter()
            .map(|&k| image_to_grid(sk.points[k], sk.image_width, sk.image_height, src.width(), src.height()))
            .collect();
        let pred = match_keypoints(&src, &tgt, &q, &cfg).unwrap();
        let expect: BTreeMap<String, Value> = r
            .mutual_visible
            .iter()
            .zip(pred)
            .map(|(k, g)| {
                let p = grid_to_image(g, tgt.width(), tgt.height(), tk.image_width, tk.image_height);
                (k.to_string(), json!({"x": p.x, "y": p.y}))
            })
            .collect();
        assert_eq!(got["keypoints"], serde_json::to_value(expect).unwrap());
    }
}

#[test]
fn ground_truth_predictions_score_one() {
    let fx = SynthFixture::new(60, 4);
    let bench = small_bench(&fx);
    let test = bench.join("intra_test.json");
    let corpus = AnnotationCorpus::from_coco(&fs::read_to_string(fx.dataset()).unwrap()).unwrap();
    let manifest: PairManifest = serde_json::from_value(read_json(&test)).unwrap();
    let pairs: Vec<Value> = manifest
        .pairs
        .iter()
        .map(|r| {
            let t = &corpus.get(r.tgt_id).unwrap().keypoints;
            let kps: BTreeMap<String, Value> = r
                .mutual_visible
                .iter()
                .map(|&k| (k.to_string(), json!({"x": t.points[k].x, "y": t.points[k].y})))
                .collect();
            json!({"id": format!("{}-{}", r.src_id, r.tgt_id), "src_id": r.src_id, "tgt_id": r.tgt_id, "keypoints": kps})
        })
        .collect();
    let preds = fx.path().join("gt.json");
    fs::write(&preds, json!({"inference": InferenceConfig::default(), "pairs": pairs}).to_string()).unwrap();
    let report = fx.path().join("r.json");
    ok_with(
        &["evaluate", s(&test), "--preds", s(&preds), "--alpha", "0.01,0.05,0.10", "--out", s(&report)],
        &fx,
    );
    let r = read_json(&report);
    let scores = r["pck"].as_array().unwrap();
    assert_eq!(scores.len(), 3);
    for sc in scores {
        assert_eq!(sc["per_point"], 1.0);
        assert_eq!(sc["per_image"], 1.0);
    }
    assert_eq!(r["breakdown"]["correct"], 1.0);
}

#[test]
fn build_benchmark_is_byte_identical() {
    let fx = SynthFixture::new(120, 5);
    let run = |name: &str| {
        let out = fx.path().join(name);
        ok(&["build-benchmark", "--dataset", s(&fx.dataset()), "--seed", "9", "--out", s(&out)]);
        let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
            .iter()
            .map(|p| (p.file_name().unwrap().to_owned(), fs::read(p).unwrap()))
            .collect::<Vec<_>>()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.len(), 9);
    assert_eq!(a, b);
    let other = fx.path().join("c");
    ok(&["build-benchmark", "--dataset", s(&fx.dataset()), "--seed", "10", "--out", s(&other)]);
    assert_ne!(fs::read(other.join("intra_test.json")).unwrap(), a.iter().find(|f| f.0 == "intra_test.json").unwrap().1);
}

#[test]
fn report_equals_hand_composed_evaluation() {
    let fx = SynthFixture::new(60, 6);
    let bench = small_bench(&fx);
    let test = bench.join("intra_test.json");
    let preds = fx.path().join("p.json");
    let report = fx.path().join("r.json");
    ok_with(&["match", s(&test), "--out", s(&preds)], &fx);
    ok_with(&["evaluate", s(&test), "--preds", s(&preds), "--out", s(&report)], &fx);

    let corpus = AnnotationCorpus::from_coco(&fs::read_to_string(fx.dataset()).unwrap()).unwrap();
    let manifest: PairManifest = serde_json::from_value(read_json(&test)).unwrap();
    let file = read_json(&preds);
    let pairs: Vec<AnnotatedPair> = manifest
        .pairs
        .iter()
        .map(|r| {
            let (a, b) = (corpus.get(r.src_id).unwrap(), corpus.get(r.tgt_id).unwrap());
            AnnotatedPair {
                id: format!("{}-{}", r.src_id, r.tgt_id),
                category: a.species.clone(),
                source: a.keypoints.clone(),
                target: b.keypoints.clone(),
                mutual_visible: r.mutual_visible.clone(),
                azimuth_difference: None,
            }
        })
        .collect();
    let points: Vec<Vec<geomatch::ImagePoint>> = file["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .zip(&pairs)
        .map(|(p, pair)| {
            pair.mutual_visible
                .iter()
                .map(|k| serde_json::from_value(p["keypoints"][k.to_string()].clone()).unwrap())
                .collect()
        })
        .collect();
    let masks: Vec<_> = manifest
        .pairs
        .iter()
        .map(|r| npy::read_mask(&fx.features().join(format!("{}__mask.npy", r.tgt_id))).unwrap())
        .collect();
    let items: Vec<PairPredictions> = pairs
        .iter()
        .zip(&points)
        .zip(&masks)
        .map(|((pair, preds), m)| PairPredictions { pair, preds, mask: Some(m) })
        .collect();
    let schemas: HashMap<String, SubgroupSchema> =
        pairs.iter().map(|p| (p.category.clone(), SubgroupSchema::ap10k())).collect();
    let expect = evaluate(&items, &EvalConfig::default(), &schemas).unwrap();
    assert_eq!(body(read_json(&report)), serde_json::to_value(expect).unwrap());
}

#[test]
fn missing_feature_file_exits_2_naming_it() {
    let fx = SynthFixture::new(60, 7);
    fs::remove_file(fx.features().join("3__identity.npy")).unwrap();
    let m = fx.path().join("m.json");
    pair_manifest(&m, &[(3, 4, vec![0])]);
    let inputs = fx.inputs();
    let mut args = vec!["match", s(&m), "--out", "unused.json"];
    args.extend(inputs.iter().map(String::as_str));
    let out = run(&args, &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("3__identity.npy"), "{err}");
}

#[test]
fn malformed_documents_report_json_pointers() {
    let fx = SynthFixture::new(30, 8);
    let m = fx.path().join("m.json");
    fs::write(&m, r#"{"setting": "intra", "part": "test", "seed": 0, "pairs": [{"src_id": 1, "tgt_id": "two", "mutual_visible": []}]}"#).unwrap();
    let inputs = fx.inputs();
    let mut args = vec!["match", s(&m), "--out", "unused.json"];
    args.extend(inputs.iter().map(String::as_str));
    let out = run(&args, &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`/pairs/0/tgt_id`"), "{err}");

    let cfg = fx.path().join("c.toml");
    fs::write(&cfg, "[inference]\nwindow_size = -3\n").unwrap();
    let out = run(&["build-benchmark", "--out", "x", "--config", s(&cfg)], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`/inference/window_size`"));
}

#[test]
fn degenerate_features_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), 2, 3, 12);
    let zero = FeatureMap::new(8, 8, 6, vec![0.0; 8 * 8 * 6]).unwrap();
    npy::write_feature_map(&dir.path().join("features/2__identity.npy"), &zero).unwrap();
    let m = dir.path().join("m.json");
    pair_manifest(&m, &[(1, 2, vec![0, 1])]);
    let out = run(
        &[
            "match", s(&m), "--out", s(&dir.path().join("p.json")),
            "--dataset", s(&dir.path().join("annotations.json")), "--features", s(&dir.path().join("features")),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn thread_cap_is_validated_and_does_not_change_output() {
    let fx = SynthFixture::new(60, 9);
    let bench = small_bench(&fx);
    let test = bench.join("intra_test.json");
    let inputs = fx.inputs();
    let outputs: Vec<Vec<u8>> = ["1", "3"]
        .iter()
        .map(|t| {
            let p = fx.path().join(format!("p{t}.json"));
            let mut args = vec!["match", s(&test), "--out", s(&p)];
            args.extend(inputs.iter().map(String::as_str));
            let out = run(&args, &[("GEOMATCH_THREADS", t)]);
            assert!(out.status.success());
            fs::read(&p).unwrap()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    let out = run(&["synth", "--out", s(&fx.path().join("z"))], &[("GEOMATCH_THREADS", "zero")]);
    assert_eq!(out.status.code(), Some(2));
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.to_string_lossy().into_owned(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn inputs_are_never_modified() {
    let fx = SynthFixture::new(60, 10);
    let bench = small_bench(&fx);
    let before = (snapshot(fx.path()), snapshot(&bench));
    let out = tempfile::tempdir().unwrap();
    let test = bench.join("intra_test.json");
    let preds = out.path().join("p.json");
    ok_with(&["match", s(&test), "--out", s(&preds), "--align"], &fx);
    ok_with(&["evaluate", s(&test), "--preds", s(&preds), "--out", s(&out.path().join("r.json"))], &fx);
    ok_with(&["align", s(&test), "--out", s(&out.path().join("a.json"))], &fx);
    assert_eq!(before, (snapshot(fx.path()), snapshot(&bench)));
}

/// Header bytes as `numpy.save` writes them for a little-endian float32 array.
fn numpy_style(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    let tuple = if dims.len() == 1 { format!("({},)", dims[0]) } else { format!("({})", dims.join(", ")) };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {tuple}, }}");
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(' ');
    }
    header.push('\n');
    let mut out = b"\x93NUMPY\x01\x00".to_vec();
    out.extend((header.len() as u16).to_le_bytes());
    out.extend(header.as_bytes());
    for v in data {
        out.extend(v.to_le_bytes());
    }
    out
}

#[test]
fn reads_exporter_style_feature_directories() {
    let dir = tempfile::tempdir().unwrap();
    let fdir = dir.path().join("features");
    fs::create_dir_all(&fdir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for id in [1u64, 2] {
        for v in ["identity", "hflip"] {
            let data: Vec<f32> = (0..4 * 4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
            fs::write(fdir.join(format!("{id}__{v}.npy")), numpy_style(&[4, 4, 5], &data)).unwrap();
        }
    }
    fs::write(
        fdir.join("manifest.json"),
        r#"{"extractor": "dinov2_vitb14", "grid_height": 4, "grid_width": 4, "channels": 5,
            "variants": ["identity", "hflip"], "images": [1, 2]}"#,
    )
    .unwrap();
    assert_valid("feature-manifest", &read_json(&fdir.join("manifest.json")));
    fs::write(dir.path().join("annotations.json"), coco(16, 16, &[(1, vec![(2.0, 3.0), (9.0, 9.0)]), (2, vec![(4.0, 4.0), (12.0, 1.0)])]).to_string()).unwrap();
    let m = dir.path().join("m.json");
    pair_manifest(&m, &[(1, 2, vec![0, 1])]);
    let preds = dir.path().join("p.json");
    ok(&[
        "match", s(&m), "--align", "--out", s(&preds),
        "--dataset", s(&dir.path().join("annotations.json")), "--features", s(&fdir),
    ]);
    assert_eq!(read_json(&preds)["pairs"][0]["keypoints"].as_object().unwrap().len(), 2);

    // a file whose shape disagrees with the manifest is an input error
    fs::write(fdir.join("2__identity.npy"), numpy_style(&[4, 4, 3], &[0.5; 48])).unwrap();
    let out = run(
        &[
            "match", s(&m), "--out", s(&preds),
            "--dataset", s(&dir.path().join("annotations.json")), "--features", s(&fdir),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match manifest"));
}

#[test]
fn trained_model_is_used_by_match() {
    let fx = SynthFixture::new(90, 11);
    let bench = small_bench(&fx);
    let cfg = fx.path().join("t.toml");
    fs::write(&cfg, "[train]\nsteps = 8\nhidden = 4\nlearning_rate = 0.05\n").unwrap();
    let model = fx.path().join("model");
    ok_with(&["train", s(&bench.join("intra_train.json")), "--out", s(&model), "--config", s(&cfg)], &fx);
    let csv = fs::read_to_string(model.join("loss.csv")).unwrap();
    assert!(csv.starts_with("# geomatch"));
    assert_eq!(csv.lines().count(), 2 + 8);
    assert!(fs::read_to_string(model.join("loss.svg")).unwrap().contains("<polyline"));

    let test = bench.join("intra_test.json");
    let (plain, refined) = (fx.path().join("a.json"), fx.path().join("b.json"));
    ok_with(&["match", s(&test), "--out", s(&plain)], &fx);
    ok_with(&["match", s(&test), "--out", s(&refined), "--model", s(&model.join("model.gmck"))], &fx);
    let (a, b) = (read_json(&plain), read_json(&refined));
    assert_ne!(a["stamp"]["config_hash"], b["stamp"]["config_hash"]);
    assert_ne!(a["pairs"], b["pairs"]);
}
