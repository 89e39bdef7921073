//! Deterministic construction of correspondence benchmarks from pose
//! annotation corpora (AP-10K style).
//!
//! Pipeline: [`filter_images`] -> [`split_species`] -> [`sample_intra_pairs`]
//! and [`sample_cross_pairs`]. All randomness comes from ChaCha20 streams
//! derived from one seed; each (purpose, species or family index) pair gets
//! its own stream, and species/families are visited in sorted-name order with
//! images in sorted-id order, so output is identical on every platform and
//! for every thread count.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geoware::{mutual_visible, BBox, KeypointSet};
use crate::par;
use crate::tensor::ImagePoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusImage {
    pub id: u64,
    pub species: String,
    pub family: String,
    /// Number of annotated instances of the image's category.
    pub instances: usize,
    pub keypoints: KeypointSet,
}

impl CorpusImage {
    pub fn visible_count(&self) -> usize {
        self.keypoints.visible.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationCorpus {
    pub images: Vec<CorpusImage>,
}

impl AnnotationCorpus {
    pub fn new(images: Vec<CorpusImage>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut family_of: HashMap<&str, &str> = HashMap::new();
        for im in &images {
            if !ids.insert(im.id) {
                return Err(Error::InvalidArgument(format!("duplicate image id {}", im.id)));
            }
            if let Some(&f) = family_of.get(im.species.as_str()) {
                if f != im.family {
                    return Err(Error::InvalidArgument(format!(
                        "species `{}` listed under families `{f}` and `{}`",
                        im.species, im.family
                    )));
                }
            } else {
                family_of.insert(&im.species, &im.family);
            }
        }
        Ok(Self { images })
    }

    /// Reads COCO-style keypoint annotations. Categories supply the species
    /// (`name`) and family (`supercategory`). A keypoint counts as visible
    /// when its flag is positive.
    pub fn from_coco(json: &str) -> Result<Self> {
        let coco: CocoFile = serde_json::from_str(json)?;
        let cats: HashMap<u64, &CocoCategory> = coco.categories.iter().map(|c| (c.id, c)).collect();
        let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
        for a in &coco.annotations {
            by_image.entry(a.image_id).or_default().push(a);
        }
        let mut images = Vec::new();
        for im in &coco.images {
            let Some(anns) = by_image.get(&im.id) else {
                continue;
            };
            let first = anns[0];
            let cat = cats.get(&first.category_id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "annotation for image {} references unknown category {}",
                    im.id, first.category_id
                ))
            })?;
            if first.keypoints.len() % 3 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "image {}: keypoint array length {} is not a multiple of 3",
                    im.id,
                    first.keypoints.len()
                )));
            }
            let instances = anns.iter().filter(|a| a.category_id == first.category_id).count();
            let (points, visible) = first
                .keypoints
                .chunks_exact(3)
                .map(|k| (ImagePoint::new(k[0], k[1]), k[2] > 0.0))
                .unzip();
            let bbox = first.bbox.map(|b| BBox {
                x: b[0],
                y: b[1],
                w: b[2],
                h: b[3],
            });
            images.push(CorpusImage {
                id: im.id,
                species: cat.name.clone(),
                family: cat.supercategory.clone(),
                instances,
                keypoints: KeypointSet {
                    image_width: im.width,
                    image_height: im.height,
                    points,
                    visible,
                    bbox,
                },
            });
        }
        Self::new(images)
    }

    pub fn get(&self, id: u64) -> Option<&CorpusImage> {
        self.images.iter().find(|im| im.id == id)
    }

    fn index(&self) -> HashMap<u64, &CorpusImage> {
        self.images.iter().map(|im| (im.id, im)).collect()
    }
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    keypoints: Vec<f64>,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    #[serde(default)]
    supercategory: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_val: usize,
    pub n_test: usize,
    /// Species with fewer filtered images than this are held out of training.
    pub holdout_below: usize,
    /// Training pairs per species are capped at `train_pair_factor * N_train`.
    pub train_pair_factor: usize,
    pub min_mutual_visible: usize,
    pub min_visible: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_val: 20,
            n_test: 30,
            holdout_below: 50,
            train_pair_factor: 50,
            min_mutual_visible: 3,
            min_visible: 3,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument("n_val and n_test must be positive".into()));
        }
        Ok(())
    }
}

// RNG stream purposes
const STREAM_SPLIT: u64 = 1;
const STREAM_TRAIN_PAIRS: u64 = 2;
const STREAM_CROSS_FAMILY_VAL: u64 = 3;
const STREAM_CROSS_FAMILY_TEST: u64 = 4;

fn stream(seed: u64, purpose: u64, index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | index as u64);
    rng
}

/// Keeps single-instance images with at least `min_visible` visible keypoints.
pub fn filter_images(corpus: &AnnotationCorpus, min_visible: usize) -> AnnotationCorpus {
    AnnotationCorpus {
        images: corpus
            .images
            .iter()
            .filter(|im| im.instances == 1 && im.visible_count() >= min_visible)
            .cloned()
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSplit {
    pub species: String,
    pub family: String,
    pub holdout: bool,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSplit {
    pub seed: u64,
    /// Sorted by species name.
    pub species: Vec<SpeciesSplit>,
    pub holdout: Vec<String>,
}

impl BenchmarkSplit {
    fn families(&self) -> BTreeMap<&str, Vec<&SpeciesSplit>> {
        let mut out: BTreeMap<&str, Vec<&SpeciesSplit>> = BTreeMap::new();
        for s in &self.species {
            out.entry(s.family.as_str()).or_default().push(s);
        }
        out
    }
}

/// Assigns each species' images to train/val/test.
///
/// Regular species get exactly `n_val` validation and `n_test` test images
/// (fewer only if the species is too small) and the rest go to train.
/// Species below `holdout_below` never contribute training images: if they
/// still have `n_val + n_test` images they are split like the others with the
/// remainder dropped, otherwise every image goes to test.
pub fn split_species(filtered: &AnnotationCorpus, cfg: &BenchConfig) -> Result<BenchmarkSplit> {
    cfg.validate()?;
    let mut groups: BTreeMap<&str, (&str, Vec<u64>)> = BTreeMap::new();
    for im in &filtered.images {
        groups
            .entry(&im.species)
            .or_insert_with(|| (&im.family, Vec::new()))
            .1
            .push(im.id);
    }
    let groups: Vec<(&str, &str, Vec<u64>)> = groups
        .into_iter()
        .map(|(s, (f, mut ids))| {
            ids.sort_unstable();
            (s, f, ids)
        })
        .collect();

    let species = par::map_range(groups.len(), |i| {
        let (name, family, ids) = &groups[i];
        let n = ids.len();
        let holdout = n < cfg.holdout_below;
        let mut shuffled = ids.clone();
        let mut rng = stream(cfg.seed, STREAM_SPLIT, i);
        let (val, test, train) = if holdout && n < cfg.n_val + cfg.n_test {
            (Vec::new(), shuffled, Vec::new())
        } else {
            let n_val = cfg.n_val.min(n);
            let n_test = cfg.n_test.min(n - n_val);
            partial_shuffle(&mut shuffled, n_val + n_test, &mut rng);
            let mut val = shuffled[..n_val].to_vec();
            let mut test = shuffled[n_val..n_val + n_test].to_vec();
            let mut train = if holdout {
                Vec::new()
            } else {
                shuffled[n_val + n_test..].to_vec()
            };
            val.sort_unstable();
            test.sort_unstable();
            train.sort_unstable();
            (val, test, train)
        };
        SpeciesSplit {
            species: name.to_string(),
            family: family.to_string(),
            holdout,
            train,
            val,
            test,
        }
    });
    let holdout = species
        .iter()
        .filter(|s| s.holdout)
        .map(|s| s.species.clone())
        .collect();
    Ok(BenchmarkSplit {
        seed: cfg.seed,
        species,
        holdout,
    })
}

/// Fisher-Yates over the first `k` slots.
fn partial_shuffle<T>(v: &mut [T], k: usize, rng: &mut impl Rng) {
    let n = v.len() as u64;
    for i in 0..k.min(v.len()) {
        let j = rng.random_range(i as u64..n) as usize;
        v.swap(i, j);
    }
}

/// Floyd's algorithm: `k` distinct values from `0..n`, ascending.
fn sample_distinct(n: u64, k: u64, rng: &mut impl Rng) -> Vec<u64> {
    let k = k.min(n);
    let mut chosen = BTreeSet::new();
    for j in n - k..n {
        let t = rng.random_range(0..=j);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    chosen.into_iter().collect()
}

pub fn choose2(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Decodes ascending linear indices into `(i, j)` with `i < j < n`,
/// enumerating row by row.
fn decode_pairs(n: usize, sorted: &[u64]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(sorted.len());
    let (mut row, mut row_start) = (0usize, 0u64);
    for &idx in sorted {
        while idx >= row_start + (n - 1 - row) as u64 {
            row_start += (n - 1 - row) as u64;
            row += 1;
        }
        out.push((row, row + 1 + (idx - row_start) as usize));
    }
    out
}

fn all_pairs(ids: &[u64]) -> Vec<(u64, u64)> {
    let mut out = Vec::with_capacity(choose2(ids.len()));
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            out.push((ids[i], ids[j]));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Intra,
    CrossSpecies,
    CrossFamily,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub src_id: u64,
    pub tgt_id: u64,
    pub mutual_visible: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub setting: Setting,
    pub part: Part,
    pub seed: u64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub pairs: Vec<PairRecord>,
}

impl PairManifest {
    pub fn file_stem(&self) -> String {
        let s = match self.setting {
            Setting::Intra => "intra",
            Setting::CrossSpecies => "cross_species",
            Setting::CrossFamily => "cross_family",
        };
        let p = match self.part {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        };
        format!("{s}_{p}")
    }
}

/// Candidate pairs of one (setting, part), grouped by the unit they were
/// sampled for (species, species pair, or family pair).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampledPairs {
    pub groups: Vec<(String, Vec<(u64, u64)>)>,
}

impl SampledPairs {
    pub fn count(&self) -> usize {
        self.groups.iter().map(|g| g.1.len()).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntraPairs {
    pub train: SampledPairs,
    pub val: SampledPairs,
    pub test: SampledPairs,
}

/// Intra-species candidates before visibility filtering. Validation and test
/// use every unordered pair; training samples
/// `min(factor * N_train, C(N_train, 2))` distinct pairs per species.
pub fn sample_intra_pairs(split: &BenchmarkSplit, cfg: &BenchConfig) -> IntraPairs {
    let train = par::map_range(split.species.len(), |i| {
        let s = &split.species[i];
        let n = s.train.len();
        let total = choose2(n);
        let cap = (cfg.train_pair_factor * n).min(total);
        let pairs = if cap == total {
            all_pairs(&s.train)
        } else {
            let mut rng = stream(cfg.seed, STREAM_TRAIN_PAIRS, i);
            let picks = sample_distinct(total as u64, cap as u64, &mut rng);
            decode_pairs(n, &picks)
                .into_iter()
                .map(|(a, b)| (s.train[a], s.train[b]))
                .collect()
        };
        (s.species.clone(), pairs)
    });
    let every = |sel: fn(&SpeciesSplit) -> &Vec<u64>| SampledPairs {
        groups: split
            .species
            .iter()
            .map(|s| (s.species.clone(), all_pairs(sel(s))))
            .collect(),
    };
    IntraPairs {
        train: SampledPairs { groups: train },
        val: every(|s| &s.val),
        test: every(|s| &s.test),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CrossPairs {
    pub species_val: SampledPairs,
    pub species_test: SampledPairs,
    pub family_val: SampledPairs,
    pub family_test: SampledPairs,
}

/// Cross-species candidates enumerate every species pair inside each family
/// (source from the alphabetically first species). Cross-family candidates
/// draw `n_val` / `n_test` distinct pairs per unordered family pair from the
/// families' pooled validation / test images.
pub fn sample_cross_pairs(split: &BenchmarkSplit, cfg: &BenchConfig) -> CrossPairs {
    let families = split.families();
    let mut out = CrossPairs::default();
    for members in families.values() {
        for a in 0..members.len() {
            for b in a + 1..members.len() {
                let (sa, sb) = (members[a], members[b]);
                let label = format!("{}|{}", sa.species, sb.species);
                out.species_val
                    .groups
                    .push((label.clone(), product(&sa.val, &sb.val)));
                out.species_test
                    .groups
                    .push((label, product(&sa.test, &sb.test)));
            }
        }
    }

    let pools: Vec<(&str, Vec<u64>, Vec<u64>)> = families
        .iter()
        .map(|(f, members)| {
            let mut val: Vec<u64> = members.iter().flat_map(|s| s.val.iter().copied()).collect();
            let mut test: Vec<u64> = members.iter().flat_map(|s| s.test.iter().copied()).collect();
            val.sort_unstable();
            test.sort_unstable();
            (*f, val, test)
        })
        .collect();
    let mut family_pairs = Vec::new();
    for a in 0..pools.len() {
        for b in a + 1..pools.len() {
            family_pairs.push((a, b));
        }
    }
    let sampled = par::map_range(family_pairs.len(), |k| {
        let (a, b) = family_pairs[k];
        let label = format!("{}|{}", pools[a].0, pools[b].0);
        let mut rv = stream(cfg.seed, STREAM_CROSS_FAMILY_VAL, k);
        let mut rt = stream(cfg.seed, STREAM_CROSS_FAMILY_TEST, k);
        let val = sample_product(&pools[a].1, &pools[b].1, cfg.n_val, &mut rv);
        let test = sample_product(&pools[a].2, &pools[b].2, cfg.n_test, &mut rt);
        ((label.clone(), val), (label, test))
    });
    for (v, t) in sampled {
        out.family_val.groups.push(v);
        out.family_test.groups.push(t);
    }
    out
}

fn product(a: &[u64], b: &[u64]) -> Vec<(u64, u64)> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| (x, y))).collect()
}

fn sample_product(a: &[u64], b: &[u64], k: usize, rng: &mut impl Rng) -> Vec<(u64, u64)> {
    let total = (a.len() * b.len()) as u64;
    if total == 0 {
        return Vec::new();
    }
    sample_distinct(total, k as u64, rng)
        .into_iter()
        .map(|idx| {
            let i = (idx / b.len() as u64) as usize;
            let j = (idx % b.len() as u64) as usize;
            (a[i], b[j])
        })
        .collect()
}

/// Keeps pairs with at least `min_mutual` mutually visible keypoints.
pub fn filter_pairs(
    corpus: &AnnotationCorpus,
    candidates: &SampledPairs,
    min_mutual: usize,
) -> Result<Vec<PairRecord>> {
    let index = corpus.index();
    let flat: Vec<(u64, u64)> = candidates
        .groups
        .iter()
        .flat_map(|g| g.1.iter().copied())
        .collect();
    let records = par::map(&flat, |&(s, t)| -> Result<Option<PairRecord>> {
        let lookup = |id: u64| {
            index
                .get(&id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown image id {id}")))
        };
        let mv = mutual_visible(&lookup(s)?.keypoints, &lookup(t)?.keypoints);
        Ok((mv.len() >= min_mutual).then_some(PairRecord {
            src_id: s,
            tgt_id: t,
            mutual_visible: mv,
        }))
    });
    Ok(records
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeciesStats {
    pub family: String,
    pub images: usize,
    pub holdout: bool,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub train_pairs_sampled: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub seed: u64,
    pub input_images: usize,
    pub filtered_images: usize,
    pub species: BTreeMap<String, SpeciesStats>,
    pub pair_counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub filtered: AnnotationCorpus,
    pub split: BenchmarkSplit,
    pub manifests: Vec<PairManifest>,
    pub stats: BenchStats,
}

/// Runs the full pipeline.
pub fn build_benchmark(corpus: &AnnotationCorpus, cfg: &BenchConfig) -> Result<Benchmark> {
    let filtered = filter_images(corpus, cfg.min_visible);
    let split = split_species(&filtered, cfg)?;
    let intra = sample_intra_pairs(&split, cfg);
    let cross = sample_cross_pairs(&split, cfg);

    let mut meta = BTreeMap::new();
    meta.insert("min_mutual_visible".to_string(), cfg.min_mutual_visible.to_string());
    let mut cross_meta = meta.clone();
    cross_meta.insert(
        "cross_species_enumeration".to_string(),
        "all_species_pairs_within_family".to_string(),
    );

    let jobs: [(Setting, Part, &SampledPairs, &BTreeMap<String, String>); 7] = [
        (Setting::Intra, Part::Train, &intra.train, &meta),
        (Setting::Intra, Part::Val, &intra.val, &meta),
        (Setting::Intra, Part::Test, &intra.test, &meta),
        (Setting::CrossSpecies, Part::Val, &cross.species_val, &cross_meta),
        (Setting::CrossSpecies, Part::Test, &cross.species_test, &cross_meta),
        (Setting::CrossFamily, Part::Val, &cross.family_val, &meta),
        (Setting::CrossFamily, Part::Test, &cross.family_test, &meta),
    ];
    let mut manifests = Vec::with_capacity(jobs.len());
    for (setting, part, cands, metadata) in jobs {
        manifests.push(PairManifest {
            setting,
            part,
            seed: cfg.seed,
            metadata: metadata.clone(),
            pairs: filter_pairs(&filtered, cands, cfg.min_mutual_visible)?,
        });
    }

    let species_of: HashMap<u64, &str> = filtered
        .images
        .iter()
        .map(|im| (im.id, im.species.as_str()))
        .collect();
    let mut species = BTreeMap::new();
    for s in &split.species {
        let sampled = intra
            .train
            .groups
            .iter()
            .find(|g| g.0 == s.species)
            .map_or(0, |g| g.1.len());
        species.insert(
            s.species.clone(),
            SpeciesStats {
                family: s.family.clone(),
                images: s.train.len() + s.val.len() + s.test.len(),
                holdout: s.holdout,
                train_images: s.train.len(),
                val_images: s.val.len(),
                test_images: s.test.len(),
                train_pairs_sampled: sampled,
                ..Default::default()
            },
        );
    }
    for m in manifests.iter().filter(|m| m.setting == Setting::Intra) {
        for p in &m.pairs {
            let st = species.get_mut(species_of[&p.src_id]).expect("species of split image");
            match m.part {
                Part::Train => st.train_pairs += 1,
                Part::Val => st.val_pairs += 1,
                Part::Test => st.test_pairs += 1,
            }
        }
    }
    let pair_counts = manifests
        .iter()
        .map(|m| (m.file_stem(), m.pairs.len()))
        .collect();
    let stats = BenchStats {
        seed: cfg.seed,
        input_images: corpus.images.len(),
        filtered_images: filtered.images.len(),
        species,
        pair_counts,
    };
    Ok(Benchmark {
        filtered,
        split,
        manifests,
        stats,
    })
}
