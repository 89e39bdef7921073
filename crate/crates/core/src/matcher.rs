//! Similarity maps, the four localization operators, and dense
//! nearest-neighbour search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{FeatureMap, GridPoint, Sampling};

/// Default softmax temperature for inference and the dense objective.
pub const DEFAULT_TEMPERATURE: f64 = 0.04;
/// Default window for supervised inference.
pub const DEFAULT_WINDOW: usize = 15;
/// Default window for zero-shot inference.
pub const ZERO_SHOT_WINDOW: usize = 11;

/// Cosine similarities of one query descriptor against every target cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SimilarityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "similarity map {height}x{width} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("similarity values must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Returns a copy with `c` added to every value.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v + c).collect(),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Argmax,
    Soft,
    #[default]
    Window,
    Kernel,
}

impl InferenceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Self::Argmax),
            "soft" => Ok(Self::Soft),
            "window" => Ok(Self::Window),
            "kernel" => Ok(Self::Kernel),
            _ => Err(Error::InvalidArgument(format!("unknown inference mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub window_size: usize,
    pub temperature: f64,
    pub kernel_sigma: f64,
    pub sampling: Sampling,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::Window,
            window_size: DEFAULT_WINDOW,
            temperature: DEFAULT_TEMPERATURE,
            kernel_sigma: 5.0,
            sampling: Sampling::Bilinear,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        check_window(self.window_size)?;
        check_positive("temperature", self.temperature)?;
        check_positive("kernel_sigma", self.kernel_sigma)
    }

    /// Applies the configured operator to one similarity map.
    pub fn localize(&self, s: &SimilarityMap) -> Result<GridPoint> {
        match self.mode {
            InferenceMode::Argmax => Ok(hard_argmax(s)),
            InferenceMode::Soft => soft_argmax(s, self.temperature),
            InferenceMode::Window => window_soft_argmax(s, self.window_size, self.temperature),
            InferenceMode::Kernel => kernel_soft_argmax(s, self.kernel_sigma, self.temperature),
        }
    }
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "window size must be odd and >= 1, got {window}"
        )));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn similarity_map(query: &[f32], target: &FeatureMap) -> Result<SimilarityMap> {
    if query.len() != target.channels() {
        return Err(Error::Shape(format!(
            "query has {} channels, target has {}",
            query.len(),
            target.channels()
        )));
    }
    let values = (0..target.cells()).map(|i| dot(query, target.cell(i))).collect();
    SimilarityMap::new(target.height(), target.width(), values)
}

/// Location of the maximum; ties go to the lowest row-major index.
pub fn hard_argmax(s: &SimilarityMap) -> GridPoint {
    let mut best = 0;
    for (i, &v) in s.values.iter().enumerate() {
        if v > s.values[best] {
            best = i;
        }
    }
    GridPoint::new((best % s.width) as f64, (best / s.width) as f64)
}

/// Softmax expectation of cell centers over `rows x cols` (inclusive bounds).
fn windowed_expectation(
    s: &SimilarityMap,
    rows: (usize, usize),
    cols: (usize, usize),
    temperature: f64,
) -> GridPoint {
    let mut peak = f64::NEG_INFINITY;
    for y in rows.0..=rows.1 {
        for x in cols.0..=cols.1 {
            peak = peak.max(s.get(y, x));
        }
    }
    let (mut z, mut ex, mut ey) = (0.0, 0.0, 0.0);
    for y in rows.0..=rows.1 {
        for x in cols.0..=cols.1 {
            let w = ((s.get(y, x) - peak) / temperature).exp();
            z += w;
            ex += w * x as f64;
            ey += w * y as f64;
        }
    }
    GridPoint::new(ex / z, ey / z)
}

pub fn soft_argmax(s: &SimilarityMap, temperature: f64) -> Result<GridPoint> {
    check_positive("temperature", temperature)?;
    Ok(windowed_expectation(
        s,
        (0, s.height - 1),
        (0, s.width - 1),
        temperature,
    ))
}

/// Soft-argmax restricted to a `window x window` box centered on the hard
/// argmax. The box is clipped at the borders without re-centering.
pub fn window_soft_argmax(s: &SimilarityMap, window: usize, temperature: f64) -> Result<GridPoint> {
    check_window(window)?;
    check_positive("temperature", temperature)?;
    let center = hard_argmax(s);
    let (cx, cy) = (center.x as usize, center.y as usize);
    let half = window / 2;
    let rows = (cy.saturating_sub(half), (cy + half).min(s.height - 1));
    let cols = (cx.saturating_sub(half), (cx + half).min(s.width - 1));
    Ok(windowed_expectation(s, rows, cols, temperature))
}

/// Soft-argmax after scaling the map by a Gaussian centered on the hard argmax.
pub fn kernel_soft_argmax(s: &SimilarityMap, sigma: f64, temperature: f64) -> Result<GridPoint> {
    check_positive("sigma", sigma)?;
    check_positive("temperature", temperature)?;
    let c = hard_argmax(s);
    let two_var = 2.0 * sigma * sigma;
    let values = s
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let dx = (i % s.width) as f64 - c.x;
            let dy = (i / s.width) as f64 - c.y;
            v * (-(dx * dx + dy * dy) / two_var).exp()
        })
        .collect();
    let scaled = SimilarityMap { values, ..*s };
    soft_argmax(&scaled, temperature)
}

/// Per-source-cell nearest neighbour in the target.
#[derive(Clone, Debug, PartialEq)]
pub struct NnField {
    pub width: usize,
    pub height: usize,
    /// Row-major target cell index for each source cell.
    pub indices: Vec<usize>,
    /// L2 feature distance from each source cell to its match.
    pub distances: Vec<f64>,
}

fn check_pair(src: &FeatureMap, tgt: &FeatureMap) -> Result<()> {
    if src.channels() != tgt.channels() {
        return Err(Error::Shape(format!(
            "source has {} channels, target has {}",
            src.channels(),
            tgt.channels()
        )));
    }
    Ok(())
}

/// Best target cell (max cosine, lowest index on ties) and its L2 distance.
pub fn nearest_cell(query: &[f32], tgt: &FeatureMap) -> (usize, f64) {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for j in 0..tgt.cells() {
        let s = dot(query, tgt.cell(j));
        if s > best_sim {
            best_sim = s;
            best = j;
        }
    }
    (best, l2(query, tgt.cell(best)))
}

pub fn nn_field(src: &FeatureMap, tgt: &FeatureMap) -> Result<NnField> {
    check_pair(src, tgt)?;
    let hits = par::map_range(src.cells(), |i| nearest_cell(src.cell(i), tgt));
    let (indices, distances) = hits.into_iter().unzip();
    Ok(NnField {
        width: src.width(),
        height: src.height(),
        indices,
        distances,
    })
}

/// `(source cell, target cell, distance)` for every reciprocal nearest pair.
pub fn mutual_nn_pairs(src: &FeatureMap, tgt: &FeatureMap) -> Result<Vec<(usize, usize, f64)>> {
    let fwd = nn_field(src, tgt)?;
    let back = nn_field(tgt, src)?;
    Ok(fwd
        .indices
        .iter()
        .zip(&fwd.distances)
        .enumerate()
        .filter(|&(i, (&j, _))| back.indices[j] == i)
        .map(|(i, (&j, &d))| (i, j, d))
        .collect())
}

/// Matches each source keypoint into the target grid.
pub fn match_keypoints(
    src: &FeatureMap,
    tgt: &FeatureMap,
    keypoints: &[GridPoint],
    cfg: &InferenceConfig,
) -> Result<Vec<GridPoint>> {
    check_pair(src, tgt)?;
    cfg.validate()?;
    par::map(keypoints, |&p| {
        let query = src.sample(p, cfg.sampling)?;
        let s = similarity_map(&query, tgt)?;
        cfg.localize(&s)
    })
    .into_iter()
    .collect()
}
