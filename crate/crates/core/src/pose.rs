//! Instance matching distance and the pose decisions built on it.
//!
//! IMD sums, over the masked cells of a source map, the L2 feature distance
//! from each cell to its nearest neighbour in the target map. Lower is a
//! closer instance-level match. Test-time alignment picks the source
//! viewpoint variant with the lowest score against the target; template
//! voting picks a coarse pose label from sets of rendered templates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{mutual_nn_pairs, nearest_cell};
use crate::par;
use crate::tensor::{FeatureMap, InstanceMask, ViewTransform};

fn check_inputs(src: &FeatureMap, tgt: &FeatureMap, mask: &InstanceMask) -> Result<()> {
    if src.channels() != tgt.channels() {
        return Err(Error::Shape(format!(
            "source has {} channels, target has {}",
            src.channels(),
            tgt.channels()
        )));
    }
    if !mask.matches(src) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match source grid {}x{}",
            mask.height(),
            mask.width(),
            src.height(),
            src.width()
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

fn masked_distances(src: &FeatureMap, tgt: &FeatureMap, mask: &InstanceMask) -> Result<Vec<f64>> {
    check_inputs(src, tgt, mask)?;
    let cells: Vec<usize> = mask.set_cells().collect();
    Ok(par::map(&cells, |&i| nearest_cell(src.cell(i), tgt).1))
}

/// Instance matching distance: the sum over masked source cells.
pub fn imd(src: &FeatureMap, tgt: &FeatureMap, mask: &InstanceMask) -> Result<f64> {
    Ok(masked_distances(src, tgt, mask)?.iter().sum())
}

/// IMD divided by the number of masked cells.
pub fn imd_mean(src: &FeatureMap, tgt: &FeatureMap, mask: &InstanceMask) -> Result<f64> {
    let d = masked_distances(src, tgt, mask)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean distance over mutual nearest-neighbour pairs; `+inf` when there are none.
pub fn mutual_nn_distance(src: &FeatureMap, tgt: &FeatureMap) -> Result<f64> {
    let pairs = mutual_nn_pairs(src, tgt)?;
    if pairs.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMetric {
    /// Literal IMD sum.
    Imd,
    /// IMD normalized by mask size.
    #[default]
    ImdMean,
    /// Mask-free mean mutual-NN distance.
    MutualNn,
}

impl AlignMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "imd" => Ok(Self::Imd),
            "imd_mean" | "imd-mean" => Ok(Self::ImdMean),
            "mutual_nn" | "mutual-nn" => Ok(Self::MutualNn),
            _ => Err(Error::InvalidArgument(format!("unknown alignment metric `{s}`"))),
        }
    }

    pub fn score(self, src: &FeatureMap, mask: &InstanceMask, tgt: &FeatureMap) -> Result<f64> {
        match self {
            AlignMetric::Imd => imd(src, tgt, mask),
            AlignMetric::ImdMean => imd_mean(src, tgt, mask),
            AlignMetric::MutualNn => mutual_nn_distance(src, tgt),
        }
    }
}

/// One viewpoint of the source image with its features and mask.
#[derive(Clone, Debug)]
pub struct PoseVariant {
    pub transform: ViewTransform,
    pub features: FeatureMap,
    pub mask: InstanceMask,
}

impl PoseVariant {
    pub fn new(transform: ViewTransform, features: FeatureMap, mask: InstanceMask) -> Result<Self> {
        if !mask.matches(&features) {
            return Err(Error::Shape(format!(
                "{} variant: mask {}x{} vs features {}x{}",
                transform.name(),
                mask.height(),
                mask.width(),
                features.height(),
                features.width()
            )));
        }
        Ok(Self {
            transform,
            features,
            mask,
        })
    }

    /// Builds a variant from the features of the transformed image, deriving
    /// its mask from the identity mask.
    pub fn from_identity_mask(
        transform: ViewTransform,
        features: FeatureMap,
        identity_mask: &InstanceMask,
    ) -> Result<Self> {
        Self::new(transform, features, identity_mask.transform(transform))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub variant: ViewTransform,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub chosen: ViewTransform,
    pub chosen_index: usize,
    pub scores: Vec<VariantScore>,
}

impl Alignment {
    pub fn chosen_score(&self) -> f64 {
        self.scores[self.chosen_index].score
    }
}

/// Picks the source variant closest to the target. Ties keep the earlier
/// variant, and the identity variant must come first.
pub fn adaptive_align(
    variants: &[PoseVariant],
    tgt: &FeatureMap,
    metric: AlignMetric,
) -> Result<Alignment> {
    match variants.first() {
        None => return Err(Error::Empty("pose variants")),
        Some(v) if v.transform != ViewTransform::Identity => {
            return Err(Error::InvalidArgument(
                "the identity variant must be listed first".into(),
            ))
        }
        _ => {}
    }
    let scores = par::map(variants, |v| metric.score(&v.features, &v.mask, tgt))
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let mut chosen_index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[chosen_index] {
            chosen_index = i;
        }
    }
    Ok(Alignment {
        chosen: variants[chosen_index].transform,
        chosen_index,
        scores: variants
            .iter()
            .zip(scores)
            .map(|(v, score)| VariantScore {
                variant: v.transform,
                score,
            })
            .collect(),
    })
}

/// One rendered template per pose label.
#[derive(Clone, Debug)]
pub struct TemplateSet {
    pub name: String,
    pub templates: BTreeMap<String, FeatureMap>,
}

impl TemplateSet {
    pub fn new(name: impl Into<String>, templates: BTreeMap<String, FeatureMap>) -> Result<Self> {
        let name = name.into();
        if templates.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "template set `{name}` needs at least two labels"
            )));
        }
        let mut channels = templates.values().map(FeatureMap::channels);
        let first = channels.next().unwrap_or(0);
        if channels.any(|c| c != first) {
            return Err(Error::Shape(format!(
                "template set `{name}` mixes channel counts"
            )));
        }
        Ok(Self { name, templates })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    pub label: String,
    /// Label chosen by each set, in input order.
    pub per_set: Vec<String>,
    pub votes: BTreeMap<String, usize>,
    /// IMD of the query against each label, summed over sets.
    pub total_imd: BTreeMap<String, f64>,
}

/// Per set, the label with the smallest IMD wins; sets then vote. Vote ties
/// go to the smaller total IMD, then to the lexicographically first label.
pub fn predict_pose(
    query: &FeatureMap,
    query_mask: &InstanceMask,
    sets: &[TemplateSet],
) -> Result<PosePrediction> {
    if sets.is_empty() {
        return Err(Error::Empty("template sets"));
    }
    let mut votes: BTreeMap<String, usize> = BTreeMap::new();
    let mut total_imd: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_set = Vec::with_capacity(sets.len());
    for set in sets {
        let labels: Vec<(&String, &FeatureMap)> = set.templates.iter().collect();
        let scores = par::map(&labels, |(_, t)| imd(query, t, query_mask))
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
        let mut best = 0;
        for (i, (&(label, _), &s)) in labels.iter().zip(&scores).enumerate() {
            *total_imd.entry(label.clone()).or_default() += s;
            if s < scores[best] {
                best = i;
            }
        }
        let winner = labels[best].0.clone();
        *votes.entry(winner.clone()).or_default() += 1;
        per_set.push(winner);
    }
    let label = votes
        .iter()
        .max_by(|a, b| {
            a.1.cmp(b.1)
                .then_with(|| total_imd[b.0].total_cmp(&total_imd[a.0]))
                .then_with(|| b.0.cmp(a.0))
        })
        .map(|(l, _)| l.clone())
        .expect("at least one vote");
    Ok(PosePrediction {
        label,
        per_set,
        votes,
        total_imd,
    })
}
