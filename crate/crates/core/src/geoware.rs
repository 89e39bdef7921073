//! Keypoint subgroups and the geometry-aware correspondence predicate.
//!
//! A correspondence for keypoint `k` is geometry-aware when `k` belongs to a
//! subgroup of semantically identical parts (e.g. the four paws) and at least
//! one other member of that subgroup is visible in the target image. Such
//! matches can only be disambiguated by understanding orientation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImagePoint;

pub const AP10K_KEYPOINTS: [&str; 17] = [
    "left_eye",
    "right_eye",
    "nose",
    "neck",
    "root_of_tail",
    "left_shoulder",
    "left_elbow",
    "left_front_paw",
    "right_shoulder",
    "right_elbow",
    "right_front_paw",
    "left_hip",
    "left_knee",
    "left_back_paw",
    "right_hip",
    "right_knee",
    "right_back_paw",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupSchema {
    pub category: String,
    pub subgroups: BTreeMap<String, Vec<usize>>,
    /// Left/right index permutation; must be an involution.
    pub flip_map: Vec<usize>,
}

impl SubgroupSchema {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidSchema {
            category: self.category.clone(),
            reason,
        };
        let n = self.flip_map.len();
        for (i, &j) in self.flip_map.iter().enumerate() {
            if j >= n {
                return Err(fail(format!("flip_map[{i}] = {j} out of range")));
            }
            if self.flip_map[j] != i {
                return Err(fail(format!("flip_map is not an involution at {i}")));
            }
        }
        let mut owner = vec![None::<&str>; n];
        for (name, members) in &self.subgroups {
            if members.len() < 2 {
                return Err(fail(format!("subgroup `{name}` has fewer than two members")));
            }
            for &k in members {
                if k >= n {
                    return Err(fail(format!("subgroup `{name}` index {k} >= {n} keypoints")));
                }
                if let Some(other) = owner[k] {
                    return Err(fail(format!("keypoint {k} in both `{other}` and `{name}`")));
                }
                owner[k] = Some(name);
            }
            if members.iter().any(|&k| !members.contains(&self.flip_map[k])) {
                return Err(fail(format!("subgroup `{name}` is not closed under flip_map")));
            }
        }
        Ok(())
    }

    pub fn num_keypoints(&self) -> usize {
        self.flip_map.len()
    }

    /// Name and members of the subgroup containing `kp`.
    pub fn subgroup_of(&self, kp: usize) -> Option<(&str, &[usize])> {
        self.subgroups
            .iter()
            .find(|(_, m)| m.contains(&kp))
            .map(|(n, m)| (n.as_str(), m.as_slice()))
    }

    pub fn same_subgroup(&self, a: usize, b: usize) -> bool {
        self.subgroup_of(a).is_some_and(|(_, m)| m.contains(&b))
    }

    /// The 17-keypoint quadruped layout (see [`AP10K_KEYPOINTS`]).
    pub fn ap10k() -> Self {
        let subgroups = [
            ("shoulder", vec![5, 8]),
            ("foot", vec![7, 10, 13, 16]),
            ("knee", vec![6, 9, 12, 15]),
            ("hip", vec![11, 14]),
        ]
        .into_iter()
        .map(|(n, m)| (n.to_string(), m))
        .collect();
        Self {
            category: "ap10k".into(),
            subgroups,
            flip_map: vec![1, 0, 2, 3, 4, 8, 9, 10, 5, 6, 7, 14, 15, 16, 11, 12, 13],
        }
    }

    /// A schema with no subgroups and an identity flip map.
    pub fn empty(category: impl Into<String>, num_keypoints: usize) -> Self {
        Self {
            category: category.into(),
            subgroups: BTreeMap::new(),
            flip_map: (0..num_keypoints).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn contains(&self, p: ImagePoint) -> bool {
        p.x >= self.x && p.x <= self.x + self.w && p.y >= self.y && p.y <= self.y + self.h
    }

    pub fn flipped(&self, image_width: usize) -> BBox {
        // pixel centers mirror as x -> W-1-x, so box edges (at x-0.5) mirror too
        BBox {
            x: image_width as f64 - 1.0 - (self.x + self.w),
            ..*self
        }
    }
}

/// Keypoint annotations of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointSet {
    pub image_width: usize,
    pub image_height: usize,
    pub points: Vec<ImagePoint>,
    pub visible: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

impl KeypointSet {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.visible.len() {
            return Err(Error::Shape(format!(
                "{} points but {} visibility flags",
                self.points.len(),
                self.visible.len()
            )));
        }
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        for (k, (p, &v)) in self.points.iter().zip(&self.visible).enumerate() {
            if v && !(p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h) {
                return Err(Error::InvalidArgument(format!(
                    "visible keypoint {k} at ({}, {}) outside {}x{} image",
                    p.x, p.y, self.image_width, self.image_height
                )));
            }
        }
        if let Some(b) = self.bbox {
            if b.w <= 0.0 || b.h <= 0.0 || b.x < -1.0 || b.y < -1.0 || b.x + b.w > w || b.y + b.h > h {
                return Err(Error::InvalidArgument(format!("bbox {b:?} outside image")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_visible(&self, k: usize) -> bool {
        self.visible.get(k).copied().unwrap_or(false)
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.visible[k]).collect()
    }

    /// Annotations of the horizontally flipped image: keypoint `k` of the
    /// flipped image is the mirror of keypoint `flip_map[k]`.
    pub fn flipped(&self, flip_map: &[usize]) -> KeypointSet {
        let w1 = self.image_width as f64 - 1.0;
        let points = flip_map
            .iter()
            .map(|&src| {
                let p = self.points[src];
                ImagePoint::new(w1 - p.x, p.y)
            })
            .collect();
        let visible = flip_map.iter().map(|&src| self.visible[src]).collect();
        KeypointSet {
            points,
            visible,
            bbox: self.bbox.map(|b| b.flipped(self.image_width)),
            ..*self
        }
    }
}

/// Indices visible in both annotation sets, ascending.
pub fn mutual_visible(a: &KeypointSet, b: &KeypointSet) -> Vec<usize> {
    (0..a.len().min(b.len()))
        .filter(|&k| a.is_visible(k) && b.is_visible(k))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPair {
    pub id: String,
    pub category: String,
    pub source: KeypointSet,
    pub target: KeypointSet,
    pub mutual_visible: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth_difference: Option<u8>,
}

impl AnnotatedPair {
    /// Builds a pair, deriving the mutually visible keypoints.
    pub fn new(
        id: impl Into<String>,
        category: impl Into<String>,
        source: KeypointSet,
        target: KeypointSet,
    ) -> Self {
        let mutual_visible = mutual_visible(&source, &target);
        Self {
            id: id.into(),
            category: category.into(),
            source,
            target,
            mutual_visible,
            azimuth_difference: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        if let Some(&k) = self
            .mutual_visible
            .iter()
            .find(|&&k| !(self.source.is_visible(k) && self.target.is_visible(k)))
        {
            return Err(Error::NotMutuallyVisible(k));
        }
        if self.azimuth_difference.is_some_and(|a| a > 4) {
            return Err(Error::InvalidArgument("azimuth difference must be in 0..=4".into()));
        }
        Ok(())
    }

    /// Both images flipped, with keypoint labels permuted by `flip_map`.
    pub fn flipped(&self, flip_map: &[usize]) -> AnnotatedPair {
        let mut mutual: Vec<usize> = self.mutual_visible.iter().map(|&k| flip_map[k]).collect();
        mutual.sort_unstable();
        AnnotatedPair {
            id: self.id.clone(),
            category: self.category.clone(),
            source: self.source.flipped(flip_map),
            target: self.target.flipped(flip_map),
            mutual_visible: mutual,
            azimuth_difference: self.azimuth_difference,
        }
    }
}

pub fn is_geometry_aware(pair: &AnnotatedPair, schema: &SubgroupSchema, kp: usize) -> Result<bool> {
    if !pair.mutual_visible.contains(&kp) {
        return Err(Error::NotMutuallyVisible(kp));
    }
    Ok(match schema.subgroup_of(kp) {
        None => false,
        Some((_, members)) => members
            .iter()
            .any(|&j| j != kp && pair.target.is_visible(j)),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeoSplit {
    /// Per pair, `(keypoint, is_geometry_aware)` for every mutually visible keypoint.
    pub labels: Vec<Vec<(usize, bool)>>,
    pub total_keypoints: usize,
    pub geo_keypoints: usize,
    pub pairs_with_geo: usize,
    pub keypoint_fraction: f64,
    pub pair_fraction: f64,
}

pub fn split_geo_standard(
    pairs: &[AnnotatedPair],
    schemas: &HashMap<String, SubgroupSchema>,
) -> Result<GeoSplit> {
    let mut out = GeoSplit::default();
    for pair in pairs {
        let schema = schemas
            .get(&pair.category)
            .ok_or_else(|| Error::MissingSchema(pair.category.clone()))?;
        let labels = pair
            .mutual_visible
            .iter()
            .map(|&k| Ok((k, is_geometry_aware(pair, schema, k)?)))
            .collect::<Result<Vec<_>>>()?;
        let geo = labels.iter().filter(|l| l.1).count();
        out.total_keypoints += labels.len();
        out.geo_keypoints += geo;
        out.pairs_with_geo += usize::from(geo > 0);
        out.labels.push(labels);
    }
    out.keypoint_fraction = if out.total_keypoints == 0 {
        0.0
    } else {
        out.geo_keypoints as f64 / out.total_keypoints as f64
    };
    out.pair_fraction = if pairs.is_empty() {
        0.0
    } else {
        out.pairs_with_geo as f64 / pairs.len() as f64
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cat-like layout: 0/1 ears, 2..=5 paws (FL, FR, RL, RR), 6 nose.
    pub(crate) fn cat_schema() -> SubgroupSchema {
        let mut subgroups = BTreeMap::new();
        subgroups.insert("ear".to_string(), vec![0, 1]);
        subgroups.insert("paw".to_string(), vec![2, 3, 4, 5]);
        SubgroupSchema {
            category: "cat".into(),
            subgroups,
            flip_map: vec![1, 0, 3, 2, 5, 4, 6],
        }
    }

    fn kps(visible: &[bool]) -> KeypointSet {
        KeypointSet {
            image_width: 100,
            image_height: 100,
            points: (0..visible.len())
                .map(|k| ImagePoint::new(10.0 + 10.0 * k as f64, 50.0))
                .collect(),
            visible: visible.to_vec(),
            bbox: Some(BBox {
                x: 0.0,
                y: 0.0,
                w: 99.0,
                h: 99.0,
            }),
        }
    }

    #[test]
    fn schema_validation() {
        cat_schema().validate().unwrap();
        let mut s = cat_schema();
        s.flip_map = vec![1, 1, 3, 2, 5, 4, 6];
        assert!(s.validate().is_err());
        let mut s = cat_schema();
        s.subgroups.insert("nose".into(), vec![6]);
        assert!(s.validate().is_err());
        let mut s = cat_schema();
        s.subgroups.insert("dup".into(), vec![0, 6]);
        assert!(s.validate().is_err());
        let mut s = cat_schema();
        s.subgroups.insert("front".into(), vec![2, 4]);
        s.subgroups.get_mut("paw").unwrap().retain(|&k| k == 3 || k == 5);
        // {2,4} maps to {3,5} under the flip, so neither subgroup is closed
        assert!(s.validate().is_err());
    }

    #[test]
    fn front_right_paw_with_sibling_visible() {
        let s = cat_schema();
        let all = [true; 7];
        let pair = AnnotatedPair::new("p", "cat", kps(&all), kps(&all));
        assert!(is_geometry_aware(&pair, &s, 3).unwrap());
        // nose has no subgroup
        assert!(!is_geometry_aware(&pair, &s, 6).unwrap());
    }

    #[test]
    fn sole_visible_member_is_standard() {
        let s = cat_schema();
        let src = kps(&[true; 7]);
        let tgt = kps(&[true, true, false, true, false, false, true]);
        let pair = AnnotatedPair::new("p", "cat", src, tgt);
        assert!(!is_geometry_aware(&pair, &s, 3).unwrap());
        assert!(is_geometry_aware(&pair, &s, 0).unwrap());
        assert!(matches!(
            is_geometry_aware(&pair, &s, 2),
            Err(Error::NotMutuallyVisible(2))
        ));
    }

    #[test]
    fn split_empty_schema_is_all_standard() {
        let mut schemas = HashMap::new();
        schemas.insert("cat".to_string(), SubgroupSchema::empty("cat", 7));
        let pair = AnnotatedPair::new("p", "cat", kps(&[true; 7]), kps(&[true; 7]));
        let split = split_geo_standard(&[pair.clone()], &schemas).unwrap();
        assert_eq!(split.keypoint_fraction, 0.0);
        assert_eq!(split.pair_fraction, 0.0);
        assert!(split_geo_standard(&[pair], &HashMap::new()).is_err());
    }

    #[test]
    fn flipped_keypoints_swap_labels() {
        let s = cat_schema();
        let set = kps(&[true, false, true, true, true, true, true]);
        let f = set.flipped(&s.flip_map);
        // keypoint 0 of the flipped image is the mirror of keypoint 1
        assert!(!f.visible[0]);
        assert!(f.visible[1]);
        assert_eq!(f.points[1].x, 99.0 - set.points[0].x);
        assert_eq!(f.flipped(&s.flip_map), set);
    }
}
