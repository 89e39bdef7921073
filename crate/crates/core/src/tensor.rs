//! Dense feature grids, instance masks, and the coordinate conventions shared
//! by every other module.
//!
//! Grids are stored row-major in `H -> W -> C` order. Cell `(y, x)` has its
//! center at continuous grid coordinate `(x, y)`, so the valid continuous
//! range is `[-0.5, W - 0.5] x [-0.5, H - 0.5]`. Image coordinates use the
//! same center-aligned convention: pixel `i` covers `[i - 0.5, i + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a descriptor is considered degenerate.
pub const MIN_DESCRIPTOR_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
}

impl GridPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.x >= -0.5
            && self.y >= -0.5
            && self.x <= width as f64 - 0.5
            && self.y <= height as f64 - 0.5
    }

    pub fn distance(&self, other: &GridPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub x: f64,
    pub y: f64,
}

impl ImagePoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &ImagePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Maps an image-pixel coordinate onto a `grid_w x grid_h` feature grid.
pub fn image_to_grid(
    p: ImagePoint,
    image_w: usize,
    image_h: usize,
    grid_w: usize,
    grid_h: usize,
) -> GridPoint {
    GridPoint {
        x: (p.x + 0.5) * grid_w as f64 / image_w as f64 - 0.5,
        y: (p.y + 0.5) * grid_h as f64 / image_h as f64 - 0.5,
    }
}

/// Inverse of [`image_to_grid`].
pub fn grid_to_image(
    g: GridPoint,
    grid_w: usize,
    grid_h: usize,
    image_w: usize,
    image_h: usize,
) -> ImagePoint {
    ImagePoint {
        x: (g.x + 0.5) * image_w as f64 / grid_w as f64 - 0.5,
        y: (g.y + 0.5) * image_h as f64 / grid_h as f64 - 0.5,
    }
}

/// A viewpoint transform applied to a whole image (and therefore to its grid).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTransform {
    Identity,
    Hflip,
    Rot90,
    Rot180,
    Rot270,
}

impl ViewTransform {
    pub const ALL: [ViewTransform; 5] = [
        ViewTransform::Identity,
        ViewTransform::Hflip,
        ViewTransform::Rot90,
        ViewTransform::Rot180,
        ViewTransform::Rot270,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ViewTransform::Identity => "identity",
            ViewTransform::Hflip => "hflip",
            ViewTransform::Rot90 => "rot90",
            ViewTransform::Rot180 => "rot180",
            ViewTransform::Rot270 => "rot270",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown view transform `{s}`")))
    }

    /// Counter-clockwise quarter turns, `None` for the flip.
    fn quarter_turns(self) -> Option<u8> {
        match self {
            ViewTransform::Identity => Some(0),
            ViewTransform::Rot90 => Some(1),
            ViewTransform::Rot180 => Some(2),
            ViewTransform::Rot270 => Some(3),
            ViewTransform::Hflip => None,
        }
    }

    pub fn inverse(self) -> Self {
        match self {
            ViewTransform::Rot90 => ViewTransform::Rot270,
            ViewTransform::Rot270 => ViewTransform::Rot90,
            other => other,
        }
    }

    /// Output `(width, height)` for an input of `(width, height)`.
    pub fn output_dims(self, width: usize, height: usize) -> (usize, usize) {
        match self {
            ViewTransform::Rot90 | ViewTransform::Rot270 => (height, width),
            _ => (width, height),
        }
    }

    /// Maps a continuous point on a `width x height` grid (or image) into the
    /// transformed frame.
    pub fn apply_point(self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let w1 = width as f64 - 1.0;
        let h1 = height as f64 - 1.0;
        match self {
            ViewTransform::Identity => (x, y),
            ViewTransform::Hflip => (w1 - x, y),
            ViewTransform::Rot90 => (y, w1 - x),
            ViewTransform::Rot180 => (w1 - x, h1 - y),
            ViewTransform::Rot270 => (h1 - y, x),
        }
    }

    pub fn apply_grid_point(self, p: GridPoint, width: usize, height: usize) -> GridPoint {
        let (x, y) = self.apply_point(p.x, p.y, width, height);
        GridPoint { x, y }
    }

    /// Source cell `(y, x)` that lands on output cell `(oy, ox)`.
    fn source_cell(self, oy: usize, ox: usize, width: usize, height: usize) -> (usize, usize) {
        match self {
            ViewTransform::Identity => (oy, ox),
            ViewTransform::Hflip => (oy, width - 1 - ox),
            // forward (x, y) -> (y, W-1-x): ox = y, oy = W-1-x
            ViewTransform::Rot90 => (ox, width - 1 - oy),
            ViewTransform::Rot180 => (height - 1 - oy, width - 1 - ox),
            // forward (x, y) -> (H-1-y, x): ox = H-1-y, oy = x
            ViewTransform::Rot270 => (height - 1 - ox, oy),
        }
    }
}

fn remap<T: Copy>(
    data: &[T],
    width: usize,
    height: usize,
    depth: usize,
    t: ViewTransform,
) -> (Vec<T>, usize, usize) {
    let (ow, oh) = t.output_dims(width, height);
    let mut out = Vec::with_capacity(data.len());
    for oy in 0..oh {
        for ox in 0..ow {
            let (sy, sx) = t.source_cell(oy, ox, width, height);
            let base = (sy * width + sx) * depth;
            out.extend_from_slice(&data[base..base + depth]);
        }
    }
    (out, ow, oh)
}

/// Dense `H x W x C` descriptor grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            normalized: false,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Descriptor at cell `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        self.cell(y * self.width + x)
    }

    /// Descriptor at row-major cell index.
    pub fn cell(&self, index: usize) -> &[f32] {
        let base = index * self.channels;
        &self.data[base..base + self.channels]
    }

    /// Unit-normalizes every location; fails on a zero-length descriptor.
    pub fn l2_normalize(&self) -> Result<FeatureMap> {
        let mut data = self.data.clone();
        for (i, v) in data.chunks_mut(self.channels).enumerate() {
            let norm = v.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt();
            if norm < MIN_DESCRIPTOR_NORM {
                return Err(Error::DegenerateDescriptor {
                    y: i / self.width,
                    x: i % self.width,
                });
            }
            for a in v.iter_mut() {
                *a = (*a as f64 / norm) as f32;
            }
        }
        Ok(FeatureMap {
            data,
            normalized: true,
            ..*self
        })
    }

    /// Marks a map as already normalized after checking it.
    pub fn assume_normalized(mut self, tolerance: f64) -> Result<Self> {
        for (i, v) in self.data.chunks(self.channels).enumerate() {
            let norm = v.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > tolerance {
                return Err(Error::InvalidArgument(format!(
                    "descriptor at (y={}, x={}) has norm {norm}",
                    i / self.width,
                    i % self.width
                )));
            }
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn transform(&self, t: ViewTransform) -> FeatureMap {
        let (data, width, height) = remap(&self.data, self.width, self.height, self.channels, t);
        FeatureMap {
            height,
            width,
            data,
            ..*self
        }
    }

    pub fn flip_horizontal(&self) -> FeatureMap {
        self.transform(ViewTransform::Hflip)
    }

    /// Counter-clockwise rotation by `quarter_turns * 90` degrees.
    pub fn rotate90(&self, quarter_turns: u8) -> Result<FeatureMap> {
        let t = match quarter_turns {
            0 => ViewTransform::Identity,
            1 => ViewTransform::Rot90,
            2 => ViewTransform::Rot180,
            3 => ViewTransform::Rot270,
            n => {
                return Err(Error::InvalidArgument(format!(
                    "quarter_turns must be in 0..=3, got {n}"
                )))
            }
        };
        debug_assert_eq!(t.quarter_turns(), Some(quarter_turns));
        Ok(self.transform(t))
    }

    /// Descriptor at a continuous grid point.
    pub fn sample(&self, p: GridPoint, mode: Sampling) -> Result<Vec<f32>> {
        if !p.in_bounds(self.width, self.height) || !p.x.is_finite() || !p.y.is_finite() {
            return Err(Error::OutOfBounds {
                x: p.x,
                y: p.y,
                width: self.width,
                height: self.height,
            });
        }
        match mode {
            Sampling::Nearest => {
                let x = (p.x.round().max(0.0) as usize).min(self.width - 1);
                let y = (p.y.round().max(0.0) as usize).min(self.height - 1);
                Ok(self.at(y, x).to_vec())
            }
            Sampling::Bilinear => Ok(self.sample_bilinear(p)),
        }
    }

    fn sample_bilinear(&self, p: GridPoint) -> Vec<f32> {
        let taps = bilinear_taps(p, self.width, self.height);
        let (idx, w) = taps[0];
        if w == 1.0 {
            return self.cell(idx).to_vec();
        }
        let mut acc = vec![0.0f64; self.channels];
        for (idx, w) in taps {
            if w == 0.0 {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(self.cell(idx)) {
                *a += w * v as f64;
            }
        }
        if self.normalized {
            let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm >= MIN_DESCRIPTOR_NORM {
                acc.iter_mut().for_each(|a| *a /= norm);
            }
        }
        acc.into_iter().map(|a| a as f32).collect()
    }
}

/// The four bilinear taps `(cell index, weight)` for a point, border-clamped.
/// The dominant tap comes first; an exact cell hit has weight 1.0 there.
pub fn bilinear_taps(p: GridPoint, width: usize, height: usize) -> [(usize, f64); 4] {
    let xc = p.x.clamp(0.0, (width - 1) as f64);
    let yc = p.y.clamp(0.0, (height - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

/// How keypoint descriptors are read off a grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    #[default]
    Bilinear,
    Nearest,
}

/// Binary foreground mask at feature-grid resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Row-major indices of set cells.
    pub fn set_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn transform(&self, t: ViewTransform) -> InstanceMask {
        let (bits, width, height) = remap(&self.bits, self.width, self.height, 1, t);
        InstanceMask {
            height,
            width,
            bits,
        }
    }

    pub fn matches(&self, f: &FeatureMap) -> bool {
        self.height == f.height() && self.width == f.width()
    }

    /// Whether the cell nearest to a continuous grid point is set.
    pub fn contains(&self, p: GridPoint) -> bool {
        let x = (p.x.round().max(0.0) as usize).min(self.width - 1);
        let y = (p.y.round().max(0.0) as usize).min(self.height - 1);
        self.get(y, x)
    }
}
