//! Synthetic data: a planted training task with a known solution, and an
//! annotated quadruped corpus with matching feature grids and masks.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::benchgen::{AnnotationCorpus, CorpusImage};
use crate::error::{Error, Result};
use crate::geoware::{BBox, KeypointSet, SubgroupSchema, AP10K_KEYPOINTS};
use crate::matcher::{match_keypoints, InferenceConfig};
use crate::metrics::{aggregate, pck, Grouping, PckConfig, PckReference};
use crate::tensor::{grid_to_image, image_to_grid, FeatureMap, GridPoint, ImagePoint, InstanceMask, ViewTransform};
use crate::trainer::{PairBatch, PostProcessor, TrainConfig};

fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | index);
    rng
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
}

fn random_unit(c: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    unit(&mut v);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub grid: usize,
    pub channels: usize,
    pub image_size: usize,
    pub keypoints: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Apply a random cyclic shift of up to this many cells to each target.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            grid: 12,
            channels: 16,
            image_size: 96,
            keypoints: 10,
            train_pairs: 32,
            test_pairs: 8,
            max_shift: 0,
            seed: 0,
        }
    }
}

/// Pairs whose target is the source with adjacent channels swapped (and
/// optionally cyclically shifted). Raw descriptors do not match across the
/// swap; a network that symmetrizes the swapped channels does.
#[derive(Clone, Debug)]
pub struct PlantedTask {
    pub permutation: Vec<usize>,
    pub train: Vec<PairBatch>,
    pub test: Vec<PairBatch>,
}

/// `(0 1)(2 3)...`; an odd last channel maps to itself.
pub fn channel_swap(channels: usize) -> Vec<usize> {
    (0..channels)
        .map(|c| if c % 2 == 0 { (c + 1).min(channels - 1) } else { c - 1 })
        .collect()
}

impl PlantedConfig {
    /// A training setup sized for this task: a narrow post-processor, a
    /// higher learning rate and no input noise.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: 2000,
            learning_rate: 5e-3,
            dropout: 0.0,
            perturb_std: 0.0,
            augment: false,
            hidden: 16,
            blocks: 2,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

pub fn planted_task(cfg: &PlantedConfig) -> Result<PlantedTask> {
    let g = cfg.grid;
    if g < 2 || cfg.channels < 2 || cfg.keypoints < 2 || cfg.keypoints > g * g {
        return Err(Error::InvalidArgument("planted task needs grid >= 2, channels >= 2 and 2..=grid^2 keypoints".into()));
    }
    let perm = channel_swap(cfg.channels);
    let make = |i: usize| -> Result<PairBatch> {
        let mut rng = stream(cfg.seed, 1, i as u64);
        let src = FeatureMap::from_fn(g, g, cfg.channels, |_, _, _| rng.random_range(-1.0f32..1.0))?
            .l2_normalize()?;
        let m = cfg.max_shift.min(g - 1) + 1;
        let (dx, dy) = (rng.random_range(0..m), rng.random_range(0..m));
        let tgt = FeatureMap::from_fn(g, g, cfg.channels, |y, x, c| {
            let sy = (y + g - dy) % g;
            let sx = (x + g - dx) % g;
            src.at(sy, sx)[perm[c]]
        })?
        .assume_normalized(1e-4)?;
        let cells = sample(&mut rng, g * g, cfg.keypoints).into_vec();
        let src_kps: Vec<Option<GridPoint>> = cells
            .iter()
            .map(|&i| Some(GridPoint::new((i % g) as f64, (i / g) as f64)))
            .collect();
        let tgt_kps = cells
            .iter()
            .map(|&i| Some(GridPoint::new(((i % g + dx) % g) as f64, ((i / g + dy) % g) as f64)))
            .collect();
        Ok(PairBatch {
            id: format!("planted_{i:03}"),
            src_flipped: Some(src.flip_horizontal()),
            tgt_flipped: Some(tgt.flip_horizontal()),
            src,
            tgt,
            src_kps,
            tgt_kps,
            flip_map: (0..cfg.keypoints).collect(),
        })
    };
    let n = cfg.train_pairs + cfg.test_pairs;
    let mut all = (0..n).map(make).collect::<Result<Vec<_>>>()?;
    let test = all.split_off(cfg.train_pairs);
    Ok(PlantedTask {
        permutation: perm,
        train: all,
        test,
    })
}

/// Per-point PCK of matching every keypoint of `pairs` on a square image of
/// side `image_size`, optionally after running `model` on both maps.
pub fn planted_pck(
    model: Option<&PostProcessor>,
    pairs: &[PairBatch],
    image_size: usize,
    inference: &InferenceConfig,
    alpha: f64,
) -> Result<f64> {
    let cfg = PckConfig::new(alpha, PckReference::Image)?;
    let mut per_pair = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (src, tgt) = match model {
            Some(m) => (m.postprocess(&p.src)?, m.postprocess(&p.tgt)?),
            None => (p.src.clone(), p.tgt.clone()),
        };
        let (ks, kt): (Vec<GridPoint>, Vec<GridPoint>) = p
            .src_kps
            .iter()
            .zip(&p.tgt_kps)
            .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
            .unzip();
        let pred = match_keypoints(&src, &tgt, &ks, inference)?;
        let (gw, gh) = (tgt.width(), tgt.height());
        let to_img = |g: GridPoint| grid_to_image(g, gw, gh, image_size, image_size);
        let gts = KeypointSet {
            image_width: image_size,
            image_height: image_size,
            points: kt.iter().map(|&g| to_img(g)).collect(),
            visible: vec![true; kt.len()],
            bbox: None,
        };
        let preds: Vec<ImagePoint> = pred.into_iter().map(to_img).collect();
        let idx: Vec<usize> = (0..kt.len()).collect();
        per_pair.push(pck(&preds, &gts, &idx, &cfg)?.correct);
    }
    aggregate(&per_pair, Grouping::PerPoint)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub images: usize,
    pub image_size: usize,
    pub grid: usize,
    pub channels: usize,
    /// Probability that a keypoint is annotated as visible.
    pub visibility: f64,
    /// Probability that an image holds two instances.
    pub multi_instance: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            images: 500,
            image_size: 96,
            grid: 12,
            channels: 16,
            visibility: 0.85,
            multi_instance: 0.05,
            seed: 0,
        }
    }
}

const FAMILIES: [(&str, [&str; 3]); 3] = [
    ("canidae", ["dog", "fox", "wolf"]),
    ("felidae", ["cat", "lion", "tiger"]),
    ("bovidae", ["antelope", "cow", "sheep"]),
];

/// Keypoint positions of a right-facing animal, relative to its bbox.
const TEMPLATE: [(f64, f64); 17] = [
    (0.84, 0.14),
    (0.92, 0.18),
    (0.97, 0.30),
    (0.74, 0.34),
    (0.06, 0.34),
    (0.66, 0.48),
    (0.64, 0.70),
    (0.62, 0.94),
    (0.80, 0.50),
    (0.82, 0.72),
    (0.84, 0.96),
    (0.16, 0.46),
    (0.14, 0.70),
    (0.12, 0.94),
    (0.30, 0.48),
    (0.32, 0.72),
    (0.34, 0.96),
];

/// A synthetic quadruped corpus with feature grids derived from the
/// annotations: each keypoint cell carries a noisy prototype of its part
/// (left/right partners share most of their prototype), the rest of the box
/// carries a body descriptor and the background is random.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: CorpusConfig,
    pub corpus: AnnotationCorpus,
    pub schema: SubgroupSchema,
    prototypes: Vec<Vec<f64>>,
    body: Vec<f64>,
}

impl SynthCorpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        if cfg.images == 0 || cfg.grid < 2 || cfg.channels < 2 || cfg.image_size < cfg.grid {
            return Err(Error::InvalidArgument("degenerate synthetic corpus config".into()));
        }
        if !(0.0..=1.0).contains(&cfg.visibility) || !(0.0..=1.0).contains(&cfg.multi_instance) {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        let schema = SubgroupSchema::ap10k();
        let mut rng = stream(cfg.seed, 10, 0);
        let shared: Vec<Vec<f64>> = (0..17).map(|_| random_unit(cfg.channels, &mut rng)).collect();
        let prototypes = (0..17)
            .map(|k| {
                let part = k.min(schema.flip_map[k]);
                let own = random_unit(cfg.channels, &mut rng);
                let mut v: Vec<f64> = shared[part].iter().zip(&own).map(|(a, b)| a + 0.7 * b).collect();
                unit(&mut v);
                v
            })
            .collect();
        let body = random_unit(cfg.channels, &mut rng);

        // uneven species sizes so that some species fall below the holdout cut
        let species: Vec<(&str, &str)> = FAMILIES
            .iter()
            .flat_map(|(f, ss)| ss.iter().map(move |s| (*f, *s)))
            .collect();
        let weights: Vec<usize> = (0..species.len()).map(|i| 1 + i % 3).collect();
        let wsum: usize = weights.iter().sum();
        let mut counts: Vec<usize> = weights.iter().map(|w| cfg.images * w / wsum).collect();
        let short = cfg.images - counts.iter().sum::<usize>();
        for c in counts.iter_mut().take(short) {
            *c += 1;
        }

        let size = cfg.image_size as f64;
        let mut images = Vec::with_capacity(cfg.images);
        let mut id = 0u64;
        for ((family, name), &count) in species.iter().zip(&counts) {
            for _ in 0..count {
                id += 1;
                let mut r = stream(cfg.seed, 11, id);
                let w = r.random_range(0.45..0.85) * size;
                let h = w * r.random_range(0.6..0.8);
                let x0 = r.random_range(0.0..(size - w).max(1.0));
                let y0 = r.random_range(0.0..(size - h).max(1.0));
                let points = TEMPLATE
                    .iter()
                    .map(|&(tx, ty)| {
                        let px = x0 + tx * w + r.random_range(-1.5..1.5);
                        let py = y0 + ty * h + r.random_range(-1.5..1.5);
                        ImagePoint::new(px.clamp(0.0, size - 1.0), py.clamp(0.0, size - 1.0))
                    })
                    .collect();
                let visible = (0..17).map(|_| r.random::<f64>() < cfg.visibility).collect();
                let mut kps = KeypointSet {
                    image_width: cfg.image_size,
                    image_height: cfg.image_size,
                    points,
                    visible,
                    bbox: Some(BBox { x: x0, y: y0, w, h }),
                };
                if r.random::<bool>() {
                    kps = kps.flipped(&schema.flip_map);
                }
                let instances = if r.random::<f64>() < cfg.multi_instance { 2 } else { 1 };
                images.push(CorpusImage {
                    id,
                    species: name.to_string(),
                    family: family.to_string(),
                    instances,
                    keypoints: kps,
                });
            }
        }
        Ok(Self {
            config: cfg.clone(),
            corpus: AnnotationCorpus::new(images)?,
            schema,
            prototypes,
            body,
        })
    }

    fn image(&self, id: u64) -> Result<&CorpusImage> {
        self.corpus
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown image id {id}")))
    }

    /// Annotations of the image as seen under `variant` (identity or hflip).
    pub fn view_keypoints(&self, id: u64, variant: ViewTransform) -> Result<KeypointSet> {
        let kps = &self.image(id)?.keypoints;
        match variant {
            ViewTransform::Identity => Ok(kps.clone()),
            ViewTransform::Hflip => Ok(kps.flipped(&self.schema.flip_map)),
            v => Err(Error::InvalidArgument(format!(
                "synthetic features support identity and hflip, not {}",
                v.name()
            ))),
        }
    }

    /// Feature grid of the image rendered under `variant`. The flipped
    /// rendering uses its own noise, so it is not a mirrored copy.
    pub fn features(&self, id: u64, variant: ViewTransform) -> Result<FeatureMap> {
        let kps = self.view_keypoints(id, variant)?;
        let cfg = &self.config;
        let g = cfg.grid;
        let c = cfg.channels;
        let stream_index = id * 8 + variant as u64;
        let mut rng = stream(cfg.seed, 12, stream_index);
        let bbox = kps.bbox.ok_or(Error::MissingBbox)?;
        let mut cells: Vec<Vec<f64>> = (0..g * g)
            .map(|i| {
                let centre = grid_to_image(
                    GridPoint::new((i % g) as f64, (i / g) as f64),
                    g,
                    g,
                    cfg.image_size,
                    cfg.image_size,
                );
                let noise = random_unit(c, &mut rng);
                if bbox.contains(centre) {
                    self.body.iter().zip(&noise).map(|(a, b)| a + 0.8 * b).collect()
                } else {
                    noise
                }
            })
            .collect();
        for k in kps.visible_indices() {
            let gp = image_to_grid(kps.points[k], cfg.image_size, cfg.image_size, g, g);
            let (x, y) = (gp.x.round() as usize, gp.y.round() as usize);
            let noise = random_unit(c, &mut rng);
            cells[y.min(g - 1) * g + x.min(g - 1)] = self.prototypes[k]
                .iter()
                .zip(&noise)
                .map(|(a, b)| a + 0.25 * b)
                .collect();
        }
        let mut data = Vec::with_capacity(g * g * c);
        for mut v in cells {
            unit(&mut v);
            data.extend(v.into_iter().map(|a| a as f32));
        }
        FeatureMap::new(g, g, c, data)?.assume_normalized(1e-4)
    }

    /// Foreground mask on the feature grid: cells whose centre lies in the bbox.
    pub fn mask(&self, id: u64) -> Result<InstanceMask> {
        let kps = &self.image(id)?.keypoints;
        let bbox = kps.bbox.ok_or(Error::MissingBbox)?;
        let g = self.config.grid;
        let s = self.config.image_size;
        let bits = (0..g * g)
            .map(|i| bbox.contains(grid_to_image(GridPoint::new((i % g) as f64, (i / g) as f64), g, g, s, s)))
            .collect();
        InstanceMask::new(g, g, bits)
    }

    /// The corpus in COCO keypoint format (one annotation per instance).
    pub fn to_coco(&self) -> serde_json::Value {
        let mut cat_ids: HashMap<&str, usize> = HashMap::new();
        let mut categories = Vec::new();
        for (family, ss) in FAMILIES {
            for s in ss {
                cat_ids.insert(s, categories.len() + 1);
                categories.push(json!({
                    "id": categories.len() + 1,
                    "name": s,
                    "supercategory": family,
                    "keypoints": AP10K_KEYPOINTS,
                }));
            }
        }
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        for im in &self.corpus.images {
            let k = &im.keypoints;
            images.push(json!({"id": im.id, "width": k.image_width, "height": k.image_height}));
            let flat: Vec<f64> = k
                .points
                .iter()
                .zip(&k.visible)
                .flat_map(|(p, &v)| if v { [p.x, p.y, 2.0] } else { [0.0, 0.0, 0.0] })
                .collect();
            let b = k.bbox.expect("synthetic images have boxes");
            for _ in 0..im.instances {
                annotations.push(json!({
                    "id": annotations.len() + 1,
                    "image_id": im.id,
                    "category_id": cat_ids[im.species.as_str()],
                    "keypoints": flat,
                    "bbox": [b.x, b.y, b.w, b.h],
                }));
            }
        }
        json!({"images": images, "annotations": annotations, "categories": categories})
    }
}
