//! One function per subcommand. Each takes parsed inputs and returns the
//! payload that `main` writes, so library users get the same results.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use geomatch::benchgen::{build_benchmark, AnnotationCorpus, Benchmark, PairManifest, PairRecord};
use geomatch::geoware::{AnnotatedPair, KeypointSet, SubgroupSchema};
use geomatch::matcher::{match_keypoints, InferenceConfig};
use geomatch::metrics::{evaluate, EvalReport, PairPredictions};
use geomatch::pose::{adaptive_align, predict_pose, AlignMetric, Alignment, PosePrediction, PoseVariant, TemplateSet};
use geomatch::synth::SynthCorpus;
use geomatch::tensor::{grid_to_image, image_to_grid};
use geomatch::trainer::{train, PairBatch, PostProcessor, TrainOutcome};
use geomatch::{npy, par, FeatureMap, GridPoint, ImagePoint, InstanceMask, ViewTransform};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::store::{
    feature_file, mask_file, to_json_bytes, write_bytes, FeatureManifest, FeatureStore, SchemaBook, Stamp,
    FEATURE_MANIFEST,
};

/// A finalized configuration with its stamp.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub stamp: Stamp,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self> {
        let config = config.finalize()?;
        let stamp = Stamp::new(config.hash(), config.seed);
        Ok(Self { config, stamp })
    }

    pub fn corpus(&self) -> Result<AnnotationCorpus> {
        crate::store::load_corpus(self.config.dataset()?)
    }

    pub fn store(&self) -> Result<FeatureStore> {
        FeatureStore::open(self.config.features()?)
    }

    pub fn schemas(&self, store: Option<&FeatureStore>) -> Result<SchemaBook> {
        let fallback = store.and_then(|s| s.manifest.schema.as_deref());
        SchemaBook::new(self.config.schemas.as_deref(), fallback)
    }

    pub fn model(&self) -> Result<Option<PostProcessor>> {
        self.config
            .model
            .as_deref()
            .map(|p| PostProcessor::load(p).map_err(CliError::from))
            .transpose()
    }
}

pub fn pair_id(r: &PairRecord) -> String {
    format!("{}-{}", r.src_id, r.tgt_id)
}

fn image<'a>(corpus: &'a AnnotationCorpus, id: u64) -> Result<&'a geomatch::benchgen::CorpusImage> {
    corpus
        .get(id)
        .ok_or_else(|| CliError::Input(format!("image {id} is not in the dataset")))
}

/// Writes a synthetic dataset: `annotations.json`, `features/` and
/// `schemas/ap10k.json` under `out`.
pub fn synth(ctx: &Context, out: &Path) -> Result<SynthCorpus> {
    let corpus = SynthCorpus::generate(&ctx.config.synth)?;
    let mut coco = corpus.to_coco();
    coco["stamp"] = serde_json::to_value(&ctx.stamp).expect("stamp serializes");
    write_bytes(&out.join("annotations.json"), &to_json_bytes(&coco))?;

    let fdir = out.join("features");
    let variants = [ViewTransform::Identity, ViewTransform::Hflip];
    let ids: Vec<u64> = corpus.corpus.images.iter().map(|im| im.id).collect();
    fs::create_dir_all(&fdir).map_err(|e| CliError::io(&fdir, e))?;
    let written = par::map(&ids, |&id| -> Result<()> {
        for v in variants {
            let path = feature_file(&fdir, id, v);
            npy::write_feature_map(&path, &corpus.features(id, v)?)?;
        }
        Ok(npy::write_mask(&mask_file(&fdir, id), &corpus.mask(id)?)?)
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;
    let cfg = &ctx.config.synth;
    let manifest = FeatureManifest {
        schema: Some("ap10k".into()),
        extractor: "synthetic".into(),
        grid_height: cfg.grid,
        grid_width: cfg.grid,
        channels: cfg.channels,
        variants: variants.to_vec(),
        images: ids,
        masks: true,
        stamp: Some(ctx.stamp.clone()),
    };
    write_bytes(&fdir.join(FEATURE_MANIFEST), &to_json_bytes(&manifest))?;
    write_bytes(&out.join("schemas").join("ap10k.json"), &to_json_bytes(&corpus.schema))?;
    Ok(corpus)
}

pub fn benchmark(ctx: &Context) -> Result<Benchmark> {
    Ok(build_benchmark(&ctx.corpus()?, &ctx.config.benchmark)?)
}

/// Writes one file per manifest plus `split.json` and `stats.json`.
pub fn write_benchmark(ctx: &Context, bench: &Benchmark, out: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for m in &bench.manifests {
        let p = out.join(format!("{}.json", m.file_stem()));
        crate::store::write_stamped(&p, &ctx.stamp, m)?;
        paths.push(p);
    }
    crate::store::write_stamped(&out.join("split.json"), &ctx.stamp, &bench.split)?;
    crate::store::write_stamped(&out.join("stats.json"), &ctx.stamp, &bench.stats)?;
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub id: String,
    pub src_id: u64,
    pub tgt_id: u64,
    /// Source variant matched from, when alignment ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<ViewTransform>,
    /// Keypoint index to predicted target location in image pixels.
    pub keypoints: BTreeMap<usize, ImagePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub inference: InferenceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align_metric: Option<AlignMetric>,
    pub pairs: Vec<PairPrediction>,
}

fn to_grid(p: ImagePoint, kps: &KeypointSet, f: &FeatureMap) -> GridPoint {
    image_to_grid(p, kps.image_width, kps.image_height, f.width(), f.height())
}

fn features_for(store: &FeatureStore, model: Option<&PostProcessor>, id: u64, v: ViewTransform) -> Result<FeatureMap> {
    let f = store.features(id, v)?;
    match model {
        Some(m) => Ok(m.postprocess(&f)?),
        None => Ok(f),
    }
}

fn source_variants(ctx: &Context, store: &FeatureStore, model: Option<&PostProcessor>, id: u64) -> Result<Vec<PoseVariant>> {
    let mask = store.mask(id)?;
    ctx.config
        .alignment
        .variants
        .iter()
        .map(|&v| Ok(PoseVariant::from_identity_mask(v, features_for(store, model, id, v)?, &mask)?))
        .collect()
}

/// Predicts every mutually visible keypoint of every pair, in manifest order.
pub fn predict(ctx: &Context, manifest: &PairManifest) -> Result<Predictions> {
    let corpus = ctx.corpus()?;
    let store = ctx.store()?;
    let model = ctx.model()?;
    let cfg = &ctx.config;
    let align = cfg.alignment.enabled;
    let results = par::map(&manifest.pairs, |r| -> Result<PairPrediction> {
        let (si, ti) = (image(&corpus, r.src_id)?, image(&corpus, r.tgt_id)?);
        let tgt = features_for(&store, model.as_ref(), r.tgt_id, ViewTransform::Identity)?;
        let (src, variant) = if align {
            let vars = source_variants(ctx, &store, model.as_ref(), r.src_id)?;
            let a = adaptive_align(&vars, &tgt, cfg.alignment.metric)?;
            let v = vars.into_iter().nth(a.chosen_index).expect("chosen variant");
            (v.features, Some(a.chosen))
        } else {
            (features_for(&store, model.as_ref(), r.src_id, ViewTransform::Identity)?, None)
        };
        // the source keypoint's grid location in the identity frame, moved into the chosen view
        let (gw, gh) = (store.manifest.grid_width, store.manifest.grid_height);
        let queries: Vec<GridPoint> = r
            .mutual_visible
            .iter()
            .map(|&k| {
                let g = image_to_grid(si.keypoints.points[k], si.keypoints.image_width, si.keypoints.image_height, gw, gh);
                variant.unwrap_or(ViewTransform::Identity).apply_grid_point(g, gw, gh)
            })
            .collect();
        let preds = match_keypoints(&src, &tgt, &queries, &cfg.inference)?;
        let tk = &ti.keypoints;
        Ok(PairPrediction {
            id: pair_id(r),
            src_id: r.src_id,
            tgt_id: r.tgt_id,
            variant,
            keypoints: r
                .mutual_visible
                .iter()
                .zip(preds)
                .map(|(&k, p)| (k, grid_to_image(p, tgt.width(), tgt.height(), tk.image_width, tk.image_height)))
                .collect(),
        })
    });
    Ok(Predictions {
        inference: cfg.inference,
        align_metric: align.then_some(cfg.alignment.metric),
        pairs: results.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAlignment {
    pub id: String,
    #[serde(flatten)]
    pub alignment: Alignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignments {
    pub metric: AlignMetric,
    pub variants: Vec<ViewTransform>,
    pub pairs: Vec<PairAlignment>,
}

pub fn align(ctx: &Context, manifest: &PairManifest) -> Result<Alignments> {
    let store = ctx.store()?;
    let model = ctx.model()?;
    let cfg = &ctx.config.alignment;
    let pairs = par::map(&manifest.pairs, |r| -> Result<PairAlignment> {
        let tgt = features_for(&store, model.as_ref(), r.tgt_id, ViewTransform::Identity)?;
        let vars = source_variants(ctx, &store, model.as_ref(), r.src_id)?;
        Ok(PairAlignment {
            id: pair_id(r),
            alignment: adaptive_align(&vars, &tgt, cfg.metric)?,
        })
    });
    Ok(Alignments {
        metric: cfg.metric,
        variants: cfg.variants.clone(),
        pairs: pairs.into_iter().collect::<Result<_>>()?,
    })
}

/// Annotated pairs for a manifest; the category is the source species.
pub fn annotated_pairs(corpus: &AnnotationCorpus, manifest: &PairManifest) -> Result<Vec<AnnotatedPair>> {
    manifest
        .pairs
        .iter()
        .map(|r| {
            let (s, t) = (image(corpus, r.src_id)?, image(corpus, r.tgt_id)?);
            let pair = AnnotatedPair {
                id: pair_id(r),
                category: s.species.clone(),
                source: s.keypoints.clone(),
                target: t.keypoints.clone(),
                mutual_visible: r.mutual_visible.clone(),
                azimuth_difference: None,
            };
            pair.validate()
                .map_err(|e| CliError::Input(format!("pair {}: {e}", pair.id)))?;
            Ok(pair)
        })
        .collect()
}

/// Evaluates predictions against a manifest. `geo_split` overrides the
/// config; without an override the split is reported whenever every
/// category has a schema.
pub fn evaluate_predictions(
    ctx: &Context,
    manifest: &PairManifest,
    preds: &Predictions,
    geo_split: Option<bool>,
) -> Result<EvalReport> {
    let corpus = ctx.corpus()?;
    let store = ctx.config.features.is_some().then(|| ctx.store()).transpose()?;
    let pairs = annotated_pairs(&corpus, manifest)?;
    let by_id: HashMap<&str, &PairPrediction> = preds.pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let points = pairs
        .iter()
        .map(|pair| {
            let p = by_id
                .get(pair.id.as_str())
                .ok_or_else(|| CliError::Input(format!("no predictions for pair {}", pair.id)))?;
            pair.mutual_visible
                .iter()
                .map(|k| {
                    p.keypoints
                        .get(k)
                        .copied()
                        .ok_or_else(|| CliError::Input(format!("pair {}: no prediction for keypoint {k}", pair.id)))
                })
                .collect::<Result<Vec<ImagePoint>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<Option<InstanceMask>> = manifest
        .pairs
        .iter()
        .map(|r| match &store {
            Some(s) if s.has_mask(r.tgt_id) => s.mask(r.tgt_id).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;

    let book = ctx.schemas(store.as_ref())?;
    let schemas = book.resolve_all(pairs.iter().map(|p| p.category.as_str()))?;
    let mut cfg = ctx.config.eval.clone();
    if let Some(g) = geo_split {
        cfg.geo_split = g;
    }
    let schemas: HashMap<String, SubgroupSchema> = match schemas {
        Some(s) => s,
        None if geo_split == Some(true) => {
            let missing = pairs
                .iter()
                .find(|p| book.resolve(&p.category).ok().flatten().is_none())
                .map(|p| p.category.clone())
                .unwrap_or_default();
            return Err(geomatch::Error::MissingSchema(missing).into());
        }
        None => {
            cfg.geo_split = false;
            HashMap::new()
        }
    };
    let items: Vec<PairPredictions<'_>> = pairs
        .iter()
        .zip(&points)
        .zip(&masks)
        .map(|((pair, preds), mask)| PairPredictions {
            pair,
            preds,
            mask: mask.as_ref(),
        })
        .collect();
    Ok(evaluate(&items, &cfg, &schemas)?)
}

/// Training pairs on identity features (and hflip features when
/// augmenting), keypoints mapped onto the feature grid.
pub fn training_pairs(ctx: &Context, manifest: &PairManifest) -> Result<Vec<PairBatch>> {
    let corpus = ctx.corpus()?;
    let store = ctx.store()?;
    let book = ctx.schemas(Some(&store))?;
    let augment = ctx.config.train.augment;
    let mut flip_maps: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut out = Vec::with_capacity(manifest.pairs.len());
    for r in &manifest.pairs {
        let (s, t) = (image(&corpus, r.src_id)?, image(&corpus, r.tgt_id)?);
        let n = s.keypoints.len();
        let flip_map = match flip_maps.get(&s.species) {
            Some(m) => m.clone(),
            None => {
                let m = match book.resolve(&s.species)? {
                    Some(schema) => schema.flip_map,
                    None if augment => return Err(geomatch::Error::MissingSchema(s.species.clone()).into()),
                    None => (0..n).collect(),
                };
                flip_maps.insert(s.species.clone(), m.clone());
                m
            }
        };
        let src = store.features(r.src_id, ViewTransform::Identity)?;
        let tgt = store.features(r.tgt_id, ViewTransform::Identity)?;
        let flipped = |id| -> Result<Option<FeatureMap>> {
            if augment {
                store.features(id, ViewTransform::Hflip).map(Some)
            } else {
                Ok(None)
            }
        };
        // keypoints outside the mutual set stay unmatched
        let grid_kps = |kps: &KeypointSet, f: &FeatureMap| -> Vec<Option<GridPoint>> {
            (0..n)
                .map(|k| r.mutual_visible.contains(&k).then(|| to_grid(kps.points[k], kps, f)))
                .collect()
        };
        out.push(PairBatch {
            id: pair_id(r),
            src_kps: grid_kps(&s.keypoints, &src),
            tgt_kps: grid_kps(&t.keypoints, &tgt),
            src_flipped: flipped(r.src_id)?,
            tgt_flipped: flipped(r.tgt_id)?,
            src,
            tgt,
            flip_map,
        });
    }
    Ok(out)
}

pub fn train_model(ctx: &Context, pairs: &[PairBatch], checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    Ok(train(pairs, &ctx.config.train, checkpoint_dir)?)
}

/// Template sets from `dir/<set>/<label>.npy`, sets and labels in name order.
pub fn load_templates(dir: &Path) -> Result<Vec<TemplateSet>> {
    let mut sets = Vec::new();
    for set_dir in sorted_entries(dir)? {
        if !set_dir.is_dir() {
            continue;
        }
        let mut templates = BTreeMap::new();
        for f in sorted_entries(&set_dir)? {
            if f.extension().is_some_and(|e| e == "npy") {
                let label = f.file_stem().expect("npy file stem").to_string_lossy().into_owned();
                let map = npy::read_feature_map(&f).map_err(|e| CliError::Input(format!("{}: {e}", f.display())))?;
                templates.insert(label, map.l2_normalize()?);
            }
        }
        let name = set_dir.file_name().expect("set dir name").to_string_lossy().into_owned();
        sets.push(TemplateSet::new(name, templates)?);
    }
    if sets.is_empty() {
        return Err(CliError::Input(format!("{}: no template sets", dir.display())));
    }
    Ok(sets)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

pub fn pose(ctx: &Context, id: u64, sets: &[TemplateSet]) -> Result<PosePrediction> {
    let store = ctx.store()?;
    let model = ctx.model()?;
    let q = features_for(&store, model.as_ref(), id, ViewTransform::Identity)?;
    Ok(predict_pose(&q, &store.mask(id)?, sets)?)
}
