//! PCK scoring, aggregation, azimuth sensitivity, and the error breakdown.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geoware::{split_geo_standard, AnnotatedPair, KeypointSet, SubgroupSchema};
use crate::tensor::{image_to_grid, ImagePoint, InstanceMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PckReference {
    #[default]
    Bbox,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckConfig {
    pub alpha: f64,
    pub reference: PckReference,
}

impl PckConfig {
    pub fn new(alpha: f64, reference: PckReference) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha, reference })
    }

    /// Pixel radius `alpha * max(h, w)` of the configured reference.
    pub fn threshold(&self, gts: &KeypointSet) -> Result<f64> {
        let extent = match self.reference {
            PckReference::Bbox => {
                let b = gts.bbox.ok_or(Error::MissingBbox)?;
                b.w.max(b.h)
            }
            PckReference::Image => gts.image_width.max(gts.image_height) as f64,
        };
        Ok(self.alpha * extent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub correct: Vec<bool>,
    pub score: f64,
}

/// Scores `preds[i]` against ground-truth keypoint `indices[i]`.
pub fn pck(
    preds: &[ImagePoint],
    gts: &KeypointSet,
    indices: &[usize],
    cfg: &PckConfig,
) -> Result<PckResult> {
    if preds.len() != indices.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} keypoints",
            preds.len(),
            indices.len()
        )));
    }
    let thr = cfg.threshold(gts)?;
    let correct: Vec<bool> = preds
        .iter()
        .zip(indices)
        .map(|(p, &k)| p.distance(&gts.points[k]) <= thr)
        .collect();
    let score = if correct.is_empty() {
        0.0
    } else {
        correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64
    };
    Ok(PckResult { correct, score })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PerPoint,
    PerImage,
}

/// Combines per-image correctness lists into one PCK value. Images with no
/// evaluated keypoints are skipped.
pub fn aggregate(per_image: &[Vec<bool>], grouping: Grouping) -> Result<f64> {
    let images: Vec<&Vec<bool>> = per_image.iter().filter(|v| !v.is_empty()).collect();
    if images.is_empty() {
        return Err(Error::Empty("PCK results"));
    }
    let hits = |v: &[bool]| v.iter().filter(|&&c| c).count();
    Ok(match grouping {
        Grouping::PerPoint => {
            let total: usize = images.iter().map(|v| v.len()).sum();
            images.iter().map(|v| hits(v)).sum::<usize>() as f64 / total as f64
        }
        Grouping::PerImage => {
            images
                .iter()
                .map(|v| hits(v) as f64 / v.len() as f64)
                .sum::<f64>()
                / images.len() as f64
        }
    })
}

/// Normalized spread `(max - min) / max` of PCK across azimuth bins.
pub fn azimuth_sensitivity(scores: &BTreeMap<u8, f64>) -> Result<f64> {
    let max = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::UndefinedSensitivity);
    }
    let min = scores.values().copied().fold(f64::INFINITY, f64::min);
    Ok((max - min) / max)
}

/// Where a prediction must land to count as foreground.
#[derive(Clone, Copy, Debug)]
pub enum Foreground<'a> {
    /// Instance mask on the target's feature grid.
    Mask(&'a InstanceMask),
    /// Fall back to the ground-truth bounding box.
    Bbox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Jitter,
    Miss,
    Swap,
    /// A swap onto another member of the ground truth's subgroup.
    SwapLr,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BreakdownCounts {
    pub total: usize,
    pub correct: usize,
    pub jitter: usize,
    pub miss: usize,
    /// Includes the `swap_lr` cases.
    pub swap: usize,
    pub swap_lr: usize,
}

impl BreakdownCounts {
    pub fn add(&mut self, o: Outcome) {
        self.total += 1;
        match o {
            Outcome::Correct => self.correct += 1,
            Outcome::Jitter => self.jitter += 1,
            Outcome::Miss => self.miss += 1,
            Outcome::Swap => self.swap += 1,
            Outcome::SwapLr => {
                self.swap += 1;
                self.swap_lr += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &BreakdownCounts) {
        self.total += other.total;
        self.correct += other.correct;
        self.jitter += other.jitter;
        self.miss += other.miss;
        self.swap += other.swap;
        self.swap_lr += other.swap_lr;
    }

    pub fn fractions(&self) -> Breakdown {
        let n = self.total.max(1) as f64;
        Breakdown {
            correct: self.correct as f64 / n,
            jitter: self.jitter as f64 / n,
            miss: self.miss as f64 / n,
            swap: self.swap as f64 / n,
            swap_lr: self.swap_lr as f64 / n,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub correct: f64,
    pub jitter: f64,
    pub miss: f64,
    pub swap: f64,
    pub swap_lr: f64,
}

/// Classifies a single prediction. `near_threshold` is the radius used for
/// "correct"; it defaults to the PCK threshold of the active alpha.
pub fn classify(
    pred: ImagePoint,
    kp: usize,
    gts: &KeypointSet,
    schema: &SubgroupSchema,
    fg: Foreground<'_>,
    near_threshold: f64,
) -> Result<Outcome> {
    let gt = gts.points[kp];
    if pred.distance(&gt) <= near_threshold {
        return Ok(Outcome::Correct);
    }
    let inside = match fg {
        Foreground::Mask(m) => {
            let g = image_to_grid(pred, gts.image_width, gts.image_height, m.width(), m.height());
            m.contains(g)
        }
        Foreground::Bbox => gts.bbox.ok_or(Error::MissingBbox)?.contains(pred),
    };
    if !inside {
        return Ok(Outcome::Miss);
    }
    // nearest annotated keypoint; the ground truth wins ties
    let mut nearest = kp;
    let mut best = pred.distance(&gt);
    for j in gts.visible_indices() {
        let d = pred.distance(&gts.points[j]);
        if d < best {
            best = d;
            nearest = j;
        }
    }
    Ok(if nearest == kp {
        Outcome::Jitter
    } else if schema.same_subgroup(kp, nearest) {
        Outcome::SwapLr
    } else {
        Outcome::Swap
    })
}

pub fn breakdown(
    preds: &[ImagePoint],
    gts: &KeypointSet,
    indices: &[usize],
    schema: &SubgroupSchema,
    fg: Foreground<'_>,
    cfg: &PckConfig,
) -> Result<BreakdownCounts> {
    if preds.len() != indices.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} keypoints",
            preds.len(),
            indices.len()
        )));
    }
    let thr = cfg.threshold(gts)?;
    let mut counts = BreakdownCounts::default();
    for (&p, &k) in preds.iter().zip(indices) {
        counts.add(classify(p, k, gts, schema, fg, thr)?);
    }
    Ok(counts)
}

/// PCK for one threshold, aggregated both ways.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub alpha: f64,
    pub per_point: f64,
    pub per_image: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_per_point: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_per_point: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub pairs: usize,
    pub keypoints: usize,
    pub pck: Vec<ThresholdScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<Breakdown>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub azimuth_pck: BTreeMap<u8, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth_sensitivity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub keypoints: usize,
    pub pck: Vec<ThresholdScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_keypoint_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<Breakdown>,
    pub categories: BTreeMap<String, CategoryReport>,
}

/// Predictions for one pair, ordered like `pair.mutual_visible`.
#[derive(Clone, Copy, Debug)]
pub struct PairPredictions<'a> {
    pub pair: &'a AnnotatedPair,
    pub preds: &'a [ImagePoint],
    /// Target instance mask for the breakdown; the target bbox is used otherwise.
    pub mask: Option<&'a InstanceMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
    pub reference: PckReference,
    /// Report geometry-aware and standard subsets separately.
    pub geo_split: bool,
    /// Alpha at which the error breakdown is computed, if any.
    pub breakdown_alpha: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.01, 0.05, 0.10],
            reference: PckReference::Bbox,
            geo_split: true,
            breakdown_alpha: Some(0.10),
        }
    }
}

fn fraction(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| hits as f64 / n as f64)
}

struct Scored {
    /// Per pair, per evaluated keypoint: correct?
    correct: Vec<Vec<bool>>,
}

fn threshold_score(alpha: f64, scored: &Scored, subset: &[usize], geo: Option<&[Vec<bool>]>) -> Result<ThresholdScore> {
    let per_pair: Vec<Vec<bool>> = subset.iter().map(|&i| scored.correct[i].clone()).collect();
    let per_point = aggregate(&per_pair, Grouping::PerPoint)?;
    let per_image = aggregate(&per_pair, Grouping::PerImage)?;
    let (mut geo_split, mut std_split) = (None, None);
    if let Some(labels) = geo {
        let (mut gh, mut gn, mut sh, mut sn) = (0, 0, 0, 0);
        for &i in subset {
            for (&c, &g) in scored.correct[i].iter().zip(&labels[i]) {
                if g {
                    gn += 1;
                    gh += c as usize;
                } else {
                    sn += 1;
                    sh += c as usize;
                }
            }
        }
        geo_split = fraction(gh, gn);
        std_split = fraction(sh, sn);
    }
    Ok(ThresholdScore {
        alpha,
        per_point,
        per_image,
        geo_per_point: geo_split,
        standard_per_point: std_split,
    })
}

/// PCK at every alpha (overall and per category), the optional
/// geometry-aware split, the error breakdown and per-azimuth PCK.
pub fn evaluate(
    items: &[PairPredictions<'_>],
    cfg: &EvalConfig,
    schemas: &HashMap<String, SubgroupSchema>,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    if cfg.alphas.is_empty() {
        return Err(Error::InvalidArgument("at least one alpha is required".into()));
    }
    for it in items {
        if it.preds.len() != it.pair.mutual_visible.len() {
            return Err(Error::Shape(format!(
                "pair `{}`: {} predictions for {} keypoints",
                it.pair.id,
                it.preds.len(),
                it.pair.mutual_visible.len()
            )));
        }
    }
    let geo = if cfg.geo_split {
        let pairs: Vec<AnnotatedPair> = items.iter().map(|it| it.pair.clone()).collect();
        let split = split_geo_standard(&pairs, schemas)?;
        Some(split)
    } else {
        None
    };
    let geo_labels: Option<Vec<Vec<bool>>> = geo
        .as_ref()
        .map(|g| g.labels.iter().map(|l| l.iter().map(|x| x.1).collect()).collect());

    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_category.entry(it.pair.category.as_str()).or_default().push(i);
    }
    let all: Vec<usize> = (0..items.len()).collect();

    let mut report = EvalReport {
        pairs: items.len(),
        keypoints: items.iter().map(|it| it.preds.len()).sum(),
        geo_keypoint_fraction: geo.as_ref().map(|g| g.keypoint_fraction),
        ..Default::default()
    };
    for (cat, idx) in &by_category {
        report.categories.insert(
            cat.to_string(),
            CategoryReport {
                pairs: idx.len(),
                keypoints: idx.iter().map(|&i| items[i].preds.len()).sum(),
                ..Default::default()
            },
        );
    }

    let score_at = |alpha: f64| -> Result<Scored> {
        let cfg = PckConfig::new(alpha, cfg.reference)?;
        let correct = items
            .iter()
            .map(|it| Ok(pck(it.preds, &it.pair.target, &it.pair.mutual_visible, &cfg)?.correct))
            .collect::<Result<Vec<_>>>()?;
        Ok(Scored { correct })
    };

    for &alpha in &cfg.alphas {
        let scored = score_at(alpha)?;
        let labels = geo_labels.as_deref();
        if items.iter().all(|it| it.preds.is_empty()) {
            return Err(Error::Empty("evaluated keypoints"));
        }
        report.pck.push(threshold_score(alpha, &scored, &all, labels)?);
        for (cat, idx) in &by_category {
            if idx.iter().all(|&i| items[i].preds.is_empty()) {
                continue;
            }
            let s = threshold_score(alpha, &scored, idx, labels)?;
            report.categories.get_mut(*cat).expect("category").pck.push(s);
        }
    }

    if let Some(alpha) = cfg.breakdown_alpha {
        let pck_cfg = PckConfig::new(alpha, cfg.reference)?;
        let mut total = BreakdownCounts::default();
        for (cat, idx) in &by_category {
            let fallback = SubgroupSchema::empty(*cat, 0);
            let schema = schemas.get(*cat).unwrap_or(&fallback);
            let mut counts = BreakdownCounts::default();
            for &i in idx {
                let it = &items[i];
                let fg = it.mask.map_or(Foreground::Bbox, Foreground::Mask);
                let c = breakdown(it.preds, &it.pair.target, &it.pair.mutual_visible, schema, fg, &pck_cfg)?;
                counts.merge(&c);
            }
            total.merge(&counts);
            report.categories.get_mut(*cat).expect("category").breakdown = Some(counts.fractions());
        }
        report.breakdown = Some(total.fractions());
    }

    // per-azimuth PCK at the largest requested alpha
    let az_alpha = cfg.alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scored = score_at(az_alpha)?;
    for (cat, idx) in &by_category {
        let mut bins: BTreeMap<u8, Vec<Vec<bool>>> = BTreeMap::new();
        for &i in idx {
            if let Some(d) = items[i].pair.azimuth_difference {
                bins.entry(d).or_default().push(scored.correct[i].clone());
            }
        }
        let mut az = BTreeMap::new();
        for (d, v) in bins {
            if let Ok(p) = aggregate(&v, Grouping::PerPoint) {
                az.insert(d, p);
            }
        }
        let rep = report.categories.get_mut(*cat).expect("category");
        if az.len() >= 2 {
            rep.azimuth_sensitivity = azimuth_sensitivity(&az).ok();
        }
        rep.azimuth_pck = az;
    }
    Ok(report)
}
