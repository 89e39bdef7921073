//! Training pairs, flip-based pose-variant augmentation and input dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::Grid;
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, GridPoint};

/// One annotated training pair on raw (pre-network) features.
///
/// Keypoint lists are indexed by keypoint id; `None` marks a keypoint that is
/// not visible in that image. The flipped maps are features extracted from
/// the mirrored images, not mirrored feature tensors.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub id: String,
    pub src: FeatureMap,
    pub tgt: FeatureMap,
    pub src_flipped: Option<FeatureMap>,
    pub tgt_flipped: Option<FeatureMap>,
    pub src_kps: Vec<Option<GridPoint>>,
    pub tgt_kps: Vec<Option<GridPoint>>,
    pub flip_map: Vec<usize>,
}

impl PairBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.src_kps.len();
        if self.tgt_kps.len() != n || self.flip_map.len() != n {
            return Err(Error::Shape(format!(
                "pair `{}`: keypoint lists and flip map differ in length",
                self.id
            )));
        }
        if self.src.channels() != self.tgt.channels() {
            return Err(Error::Shape(format!("pair `{}`: channel mismatch", self.id)));
        }
        for (flipped, orig) in [(&self.src_flipped, &self.src), (&self.tgt_flipped, &self.tgt)] {
            if let Some(f) = flipped {
                if (f.height(), f.width(), f.channels()) != (orig.height(), orig.width(), orig.channels()) {
                    return Err(Error::Shape(format!(
                        "pair `{}`: flipped features differ in shape",
                        self.id
                    )));
                }
            }
        }
        for (kps, f) in [(&self.src_kps, &self.src), (&self.tgt_kps, &self.tgt)] {
            for p in kps.iter().flatten() {
                if !p.in_bounds(f.width(), f.height()) {
                    return Err(Error::OutOfBounds {
                        x: p.x,
                        y: p.y,
                        width: f.width(),
                        height: f.height(),
                    });
                }
            }
        }
        check_involution(&self.flip_map)
    }

    pub fn image(&self, role: ImageRole) -> Option<&FeatureMap> {
        match role {
            ImageRole::Source => Some(&self.src),
            ImageRole::Target => Some(&self.tgt),
            ImageRole::SourceFlipped => self.src_flipped.as_ref(),
            ImageRole::TargetFlipped => self.tgt_flipped.as_ref(),
        }
    }
}

pub(crate) fn check_involution(flip_map: &[usize]) -> Result<()> {
    for (k, &m) in flip_map.iter().enumerate() {
        if m >= flip_map.len() || flip_map[m] != k {
            return Err(Error::InvalidArgument(format!(
                "flip map is not an involution at keypoint {k}"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Source,
    Target,
    SourceFlipped,
    TargetFlipped,
}

impl ImageRole {
    pub const ALL: [ImageRole; 4] = [
        ImageRole::Source,
        ImageRole::Target,
        ImageRole::SourceFlipped,
        ImageRole::TargetFlipped,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    DoubleFlip,
    SingleFlip,
    SelfFlip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentWeights {
    pub original: f64,
    pub double_flip: f64,
    pub single_flip: f64,
    pub self_flip: f64,
}

impl Default for AugmentWeights {
    fn default() -> Self {
        Self {
            original: 1.0,
            double_flip: 1.0,
            single_flip: 1.0,
            self_flip: 0.25,
        }
    }
}

impl AugmentWeights {
    pub fn weight(&self, v: Variant) -> f64 {
        match v {
            Variant::Original => self.original,
            Variant::DoubleFlip => self.double_flip,
            Variant::SingleFlip => self.single_flip,
            Variant::SelfFlip => self.self_flip,
        }
    }
}

/// A training view of a pair: which images to match and the aligned
/// keypoints, with the loss weight of that view.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedPair {
    pub variant: Variant,
    pub weight: f64,
    pub source: ImageRole,
    pub target: ImageRole,
    pub src_kps: Vec<Option<GridPoint>>,
    pub tgt_kps: Vec<Option<GridPoint>>,
}

impl WeightedPair {
    /// Keypoints present on both sides, as aligned lists.
    pub fn matched(&self) -> (Vec<GridPoint>, Vec<GridPoint>) {
        self.src_kps
            .iter()
            .zip(&self.tgt_kps)
            .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
            .unzip()
    }
}

/// Keypoints of the mirrored image: keypoint `k` there is the mirror of
/// keypoint `flip_map[k]` here.
pub fn flip_keypoints(kps: &[Option<GridPoint>], flip_map: &[usize], grid_width: usize) -> Vec<Option<GridPoint>> {
    let w1 = grid_width as f64 - 1.0;
    flip_map
        .iter()
        .map(|&k| kps[k].map(|p| GridPoint::new(w1 - p.x, p.y)))
        .collect()
}

/// The original pair followed by its double-, single- and self-flip views.
pub fn augment_pair(batch: &PairBatch, weights: &AugmentWeights) -> Result<Vec<WeightedPair>> {
    batch.validate()?;
    if batch.src_flipped.is_none() || batch.tgt_flipped.is_none() {
        return Err(Error::MissingFlippedFeatures(batch.id.clone()));
    }
    let s = &batch.src_kps;
    let t = &batch.tgt_kps;
    let sf = flip_keypoints(s, &batch.flip_map, batch.src.width());
    let tf = flip_keypoints(t, &batch.flip_map, batch.tgt.width());
    let view = |variant, source, target, a: &Vec<Option<GridPoint>>, b: &Vec<Option<GridPoint>>| WeightedPair {
        variant,
        weight: weights.weight(variant),
        source,
        target,
        src_kps: a.clone(),
        tgt_kps: b.clone(),
    };
    Ok(vec![
        view(Variant::Original, ImageRole::Source, ImageRole::Target, s, t),
        view(
            Variant::DoubleFlip,
            ImageRole::SourceFlipped,
            ImageRole::TargetFlipped,
            &sf,
            &tf,
        ),
        view(Variant::SingleFlip, ImageRole::SourceFlipped, ImageRole::Target, &sf, t),
        view(Variant::SelfFlip, ImageRole::Source, ImageRole::SourceFlipped, s, &sf),
    ])
}

/// Only the original view, for training without augmentation.
pub fn original_only(batch: &PairBatch, weights: &AugmentWeights) -> Result<Vec<WeightedPair>> {
    batch.validate()?;
    Ok(vec![WeightedPair {
        variant: Variant::Original,
        weight: weights.original,
        source: ImageRole::Source,
        target: ImageRole::Target,
        src_kps: batch.src_kps.clone(),
        tgt_kps: batch.tgt_kps.clone(),
    }])
}

fn dropout_mask(channels: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; channels]);
    }
    let keep = 1.0 / (1.0 - rate);
    // a mask that drops every channel would leave nothing to normalize; redraw it
    loop {
        let mask: Vec<f64> = (0..channels)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        if mask.iter().any(|&m| m != 0.0) {
            return Ok(mask);
        }
    }
}

/// Channel-wise dropout: each channel is zeroed with probability `rate` and
/// survivors are scaled by `1 / (1 - rate)`. At least one channel survives.
pub fn apply_dropout(f: &FeatureMap, rate: f64, rng: &mut impl Rng) -> Result<FeatureMap> {
    let mask = dropout_mask(f.channels(), rate, rng)?;
    let c = f.channels();
    let data = f
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 * mask[i % c]) as f32)
        .collect();
    FeatureMap::new(f.height(), f.width(), c, data)
}

pub(crate) fn dropout_grid(g: &mut Grid, rate: f64, rng: &mut impl Rng) -> Result<()> {
    let mask = dropout_mask(g.channels, rate, rng)?;
    if rate == 0.0 {
        return Ok(());
    }
    let c = g.channels;
    g.data.iter_mut().enumerate().for_each(|(i, v)| *v *= mask[i % c]);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(w: usize, seed: f32) -> FeatureMap {
        FeatureMap::from_fn(3, w, 2, |y, x, c| seed + (y * 10 + x + c) as f32).unwrap()
    }

    fn batch(flip_map: Vec<usize>) -> PairBatch {
        let n = flip_map.len();
        PairBatch {
            id: "p".into(),
            src: fm(5, 0.0),
            tgt: fm(5, 1.0),
            src_flipped: Some(fm(5, 2.0)),
            tgt_flipped: Some(fm(5, 3.0)),
            src_kps: (0..n).map(|k| Some(GridPoint::new(k as f64, 1.0))).collect(),
            tgt_kps: (0..n).map(|k| Some(GridPoint::new(k as f64 * 0.5, 2.0))).collect(),
            flip_map,
        }
    }

    #[test]
    fn identity_flip_map_mirrors_coordinates() {
        let b = batch(vec![0, 1, 2]);
        let views = augment_pair(&b, &AugmentWeights::default()).unwrap();
        let single = &views[2];
        assert_eq!(single.variant, Variant::SingleFlip);
        for k in 0..3 {
            assert_eq!(single.src_kps[k], Some(GridPoint::new(4.0 - k as f64, 1.0)));
            assert_eq!(single.tgt_kps[k], b.tgt_kps[k]);
        }
        let w: Vec<f64> = views.iter().map(|v| v.weight).collect();
        assert_eq!(w, vec![1.0, 1.0, 1.0, 0.25]);
    }

    #[test]
    fn self_flip_pairs_left_with_right_location() {
        // keypoints 0/1 are a left/right pair
        let b = batch(vec![1, 0, 2]);
        let views = augment_pair(&b, &AugmentWeights::default()).unwrap();
        let selfv = &views[3];
        assert_eq!((selfv.source, selfv.target), (ImageRole::Source, ImageRole::SourceFlipped));
        // left keypoint 0 of the source pairs with the mirrored location of keypoint 1
        assert_eq!(selfv.src_kps[0], Some(GridPoint::new(0.0, 1.0)));
        assert_eq!(selfv.tgt_kps[0], Some(GridPoint::new(3.0, 1.0)));
    }

    #[test]
    fn missing_flipped_features() {
        let mut b = batch(vec![0, 1]);
        b.tgt_flipped = None;
        assert!(matches!(
            augment_pair(&b, &AugmentWeights::default()),
            Err(Error::MissingFlippedFeatures(id)) if id == "p"
        ));
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let f = fm(4, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_dropout(&f, 0.0, &mut rng).unwrap(), f);
        assert!(apply_dropout(&f, 1.0, &mut rng).is_err());
    }
}
