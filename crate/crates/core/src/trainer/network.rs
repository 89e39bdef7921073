//! The refinement network: a small stack of 1x1/3x3 convolutions, ReLUs and
//! residual adds over an `H x W x C` grid, with a hand-written backward pass.
//! Everything here runs in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{FeatureMap, MIN_DESCRIPTOR_NORM};

/// Dense `f64` grid in `H -> W -> C` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_feature_map(f: &FeatureMap) -> Self {
        Self {
            height: f.height(),
            width: f.width(),
            channels: f.channels(),
            data: f.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        FeatureMap::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[i * c..(i + 1) * c]
    }

    fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn add_assign(&mut self, other: &Grid, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv1x1 { cin: usize, cout: usize },
    Conv3x3 { cin: usize, cout: usize },
    Relu,
    /// Adds activation `from` (0 is the network input, `k` the output of layer `k - 1`).
    ResidualAdd { from: usize },
}

impl Layer {
    fn conv_shape(&self) -> Option<(usize, usize, usize)> {
        match *self {
            Layer::Conv1x1 { cin, cout } => Some((1, cin, cout)),
            Layer::Conv3x3 { cin, cout } => Some((3, cin, cout)),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv_shape()
            .map_or(0, |(k, cin, cout)| k * k * cin * cout + cout)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    in_channels: usize,
    out_channels: usize,
    offsets: Vec<usize>,
    num_params: usize,
}

impl Network {
    pub fn new(in_channels: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut chans = vec![in_channels];
        let mut offsets = Vec::with_capacity(layers.len());
        let mut num_params = 0;
        for (i, layer) in layers.iter().enumerate() {
            let cur = *chans.last().expect("non-empty");
            let next = match *layer {
                Layer::Conv1x1 { cin, cout } | Layer::Conv3x3 { cin, cout } => {
                    if cin != cur {
                        return Err(Error::Shape(format!(
                            "layer {i} expects {cin} channels but receives {cur}"
                        )));
                    }
                    cout
                }
                Layer::Relu => cur,
                Layer::ResidualAdd { from } => {
                    if from > i {
                        return Err(Error::Shape(format!(
                            "layer {i} adds activation {from}, which is not computed yet"
                        )));
                    }
                    if chans[from] != cur {
                        return Err(Error::Shape(format!(
                            "layer {i} adds {} channels to {cur}",
                            chans[from]
                        )));
                    }
                    cur
                }
            };
            offsets.push(num_params);
            num_params += layer.param_count();
            chans.push(next);
        }
        Ok(Self {
            layers,
            in_channels,
            out_channels: *chans.last().expect("non-empty"),
            offsets,
            num_params,
        })
    }

    /// `blocks` residual bottlenecks: 1x1 reduce, ReLU, 3x3, ReLU, 1x1 expand,
    /// then the skip connection.
    pub fn bottleneck(channels: usize, hidden: usize, blocks: usize) -> Result<Self> {
        let mut layers = Vec::new();
        for _ in 0..blocks {
            let start = layers.len();
            layers.extend([
                Layer::Conv1x1 { cin: channels, cout: hidden },
                Layer::Relu,
                Layer::Conv3x3 { cin: hidden, cout: hidden },
                Layer::Relu,
                Layer::Conv1x1 { cin: hidden, cout: channels },
                Layer::ResidualAdd { from: start },
            ]);
        }
        Self::new(channels, layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Fan-in scaled uniform init. Convolutions that feed a residual add
    /// start at zero so the initial network is the identity map.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params];
        for (i, layer) in self.layers.iter().enumerate() {
            let Some((k, cin, cout)) = layer.conv_shape() else {
                continue;
            };
            let feeds_residual = matches!(self.layers.get(i + 1), Some(Layer::ResidualAdd { .. }));
            if feeds_residual {
                continue;
            }
            let bound = 1.0 / ((k * k * cin) as f64).sqrt();
            let n = k * k * cin * cout;
            for w in &mut p[self.offsets[i]..self.offsets[i] + n] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    /// Uniform init of every weight and bias, for gradient checks.
    pub fn random_params(&self, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params];
        for (i, layer) in self.layers.iter().enumerate() {
            let Some((k, cin, _)) = layer.conv_shape() else {
                continue;
            };
            let bound = scale / ((k * k * cin) as f64).sqrt();
            for w in &mut p[self.offsets[i]..self.offsets[i] + layer.param_count()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    fn check(&self, params: &[f64], input: &Grid) -> Result<()> {
        if params.len() != self.num_params {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params,
                params.len()
            )));
        }
        if input.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        Ok(())
    }

    /// Forward pass, keeping what the backward pass needs. The output is
    /// unit-normalized per location.
    pub fn forward(&self, params: &[f64], input: &Grid) -> Result<Trace> {
        self.check(params, input)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = &acts[i];
            let y = match *layer {
                Layer::Conv1x1 { cout, .. } => conv_forward(x, &params[self.offsets[i]..], 1, cout),
                Layer::Conv3x3 { cout, .. } => conv_forward(x, &params[self.offsets[i]..], 3, cout),
                Layer::Relu => Grid {
                    data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                    ..*x
                },
                Layer::ResidualAdd { from } => {
                    let mut y = x.clone();
                    y.add_assign(&acts[from], 1.0);
                    y
                }
            };
            acts.push(y);
        }
        let raw = acts.last().expect("input activation");
        let mut output = raw.clone();
        let mut norms = Vec::with_capacity(raw.cells());
        for i in 0..raw.cells() {
            let v = output.cell_mut(i);
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n < MIN_DESCRIPTOR_NORM {
                return Err(Error::DegenerateDescriptor {
                    y: i / raw.width,
                    x: i % raw.width,
                });
            }
            v.iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        Ok(Trace {
            acts,
            output,
            norms,
        })
    }

    /// Backpropagates `d_output` (gradient wrt the normalized output) and
    /// adds the parameter gradient into `grad`.
    pub fn backward(&self, params: &[f64], trace: &Trace, d_output: &Grid, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.num_params);
        // through the per-location normalization: (g - y (y.g)) / |x|
        let mut d = d_output.clone();
        for i in 0..d.cells() {
            let y = trace.output.cell(i);
            let g = d.cell_mut(i);
            let proj: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            let n = trace.norms[i];
            for (gv, yv) in g.iter_mut().zip(y) {
                *gv = (*gv - yv * proj) / n;
            }
        }

        // pending gradients per activation index, for residual fan-out
        let mut pending: Vec<Option<Grid>> = vec![None; self.layers.len() + 1];
        pending[self.layers.len()] = Some(d);
        for i in (0..self.layers.len()).rev() {
            let Some(dy) = pending[i + 1].take() else {
                continue;
            };
            let x = &trace.acts[i];
            let dx = match self.layers[i] {
                Layer::Conv1x1 { .. } | Layer::Conv3x3 { .. } => {
                    let (k, cin, cout) = self.layers[i].conv_shape().expect("conv");
                    let off = self.offsets[i];
                    let n_w = k * k * cin * cout;
                    let (dw, db) = conv_param_grad(x, &dy, k);
                    for (g, v) in grad[off..off + n_w].iter_mut().zip(&dw) {
                        *g += v;
                    }
                    for (g, v) in grad[off + n_w..off + n_w + cout].iter_mut().zip(&db) {
                        *g += v;
                    }
                    conv_input_grad(&dy, &params[off..off + n_w], k, cin)
                }
                Layer::Relu => Grid {
                    data: dy
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                    ..dy
                },
                Layer::ResidualAdd { from } => {
                    accumulate(&mut pending[from], &dy);
                    dy
                }
            };
            accumulate(&mut pending[i], &dx);
        }
    }

    /// Hash of which units are active at every ReLU. Two parameter vectors
    /// with equal signatures lie in the same smooth piece of the network.
    pub fn activation_signature(&self, trace: &Trace) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if *layer == Layer::Relu {
                for v in &trace.acts[i].data {
                    (*v > 0.0).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Forward pass returning only the normalized output.
    pub fn apply(&self, params: &[f64], input: &Grid) -> Result<Grid> {
        Ok(self.forward(params, input)?.output)
    }
}

fn accumulate(slot: &mut Option<Grid>, g: &Grid) {
    match slot {
        Some(acc) => acc.add_assign(g, 1.0),
        None => *slot = Some(g.clone()),
    }
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    acts: Vec<Grid>,
    pub output: Grid,
    norms: Vec<f64>,
}

/// Weights are laid out as `[tap][cin][cout]` followed by `cout` biases,
/// where taps run row-major over the `k x k` kernel.
fn conv_forward(x: &Grid, params: &[f64], k: usize, cout: usize) -> Grid {
    let (h, w, cin) = (x.height, x.width, x.channels);
    let weights = &params[..k * k * cin * cout];
    let bias = &params[k * k * cin * cout..k * k * cin * cout + cout];
    let r = (k / 2) as isize;
    let mut out = Grid::zeros(h, w, cout);
    par::for_each_chunk_mut(&mut out.data, w * cout, |y, row| {
        for xo in 0..w {
            let o = &mut row[xo * cout..(xo + 1) * cout];
            o.copy_from_slice(bias);
            for (tap, (dy, dx)) in taps(r).enumerate() {
                let (sy, sx) = (y as isize + dy, xo as isize + dx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let src = x.cell(sy as usize * w + sx as usize);
                let wt = &weights[tap * cin * cout..(tap + 1) * cin * cout];
                for (i, &v) in src.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    for (acc, &wv) in o.iter_mut().zip(&wt[i * cout..(i + 1) * cout]) {
                        *acc += v * wv;
                    }
                }
            }
        }
    });
    out
}

fn taps(r: isize) -> impl Iterator<Item = (isize, isize)> {
    (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dy, dx)))
}

fn conv_input_grad(dy: &Grid, weights: &[f64], k: usize, cin: usize) -> Grid {
    let (h, w, cout) = (dy.height, dy.width, dy.channels);
    let r = (k / 2) as isize;
    let mut dx = Grid::zeros(h, w, cin);
    par::for_each_chunk_mut(&mut dx.data, w * cin, |y, row| {
        for xi in 0..w {
            let g = &mut row[xi * cin..(xi + 1) * cin];
            for (tap, (ty, tx)) in taps(r).enumerate() {
                // output cell that read this input through `tap`
                let (oy, ox) = (y as isize - ty, xi as isize - tx);
                if oy < 0 || ox < 0 || oy >= h as isize || ox >= w as isize {
                    continue;
                }
                let go = dy.cell(oy as usize * w + ox as usize);
                let wt = &weights[tap * cin * cout..(tap + 1) * cin * cout];
                for (i, gi) in g.iter_mut().enumerate() {
                    let wrow = &wt[i * cout..(i + 1) * cout];
                    *gi += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    });
    dx
}

/// Weight and bias gradients. Rows are reduced independently and then summed
/// in row order so the result does not depend on scheduling.
fn conv_param_grad(x: &Grid, dy: &Grid, k: usize) -> (Vec<f64>, Vec<f64>) {
    let (h, w, cin, cout) = (x.height, x.width, x.channels, dy.channels);
    let r = (k / 2) as isize;
    let n_w = k * k * cin * cout;
    let rows = par::map_range(h, |y| {
        let mut dw = vec![0.0; n_w];
        let mut db = vec![0.0; cout];
        for xo in 0..w {
            let go = dy.cell(y * w + xo);
            for (b, g) in db.iter_mut().zip(go) {
                *b += g;
            }
            for (tap, (ty, tx)) in taps(r).enumerate() {
                let (sy, sx) = (y as isize + ty, xo as isize + tx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let src = x.cell(sy as usize * w + sx as usize);
                let block = &mut dw[tap * cin * cout..(tap + 1) * cin * cout];
                for (i, &v) in src.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    for (acc, g) in block[i * cout..(i + 1) * cout].iter_mut().zip(go) {
                        *acc += v * g;
                    }
                }
            }
        }
        (dw, db)
    });
    let mut dw = vec![0.0; n_w];
    let mut db = vec![0.0; cout];
    for (rw, rb) in rows {
        dw.iter_mut().zip(&rw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&rb).for_each(|(a, b)| *a += b);
    }
    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Grid {
        Grid {
            height: h,
            width: w,
            channels: c,
            data: (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn shape_validation() {
        assert!(Network::new(4, vec![Layer::Conv1x1 { cin: 3, cout: 4 }]).is_err());
        assert!(Network::new(
            4,
            vec![Layer::Conv1x1 { cin: 4, cout: 2 }, Layer::ResidualAdd { from: 0 }]
        )
        .is_err());
        assert!(Network::new(4, vec![Layer::ResidualAdd { from: 2 }]).is_err());
        let n = Network::bottleneck(8, 16, 2).unwrap();
        assert_eq!(n.num_params(), 2 * ((8 * 16 + 16) + (9 * 16 * 16 + 16) + (16 * 8 + 8)));
    }

    #[test]
    fn identity_conv_normalizes_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::new(3, vec![Layer::Conv1x1 { cin: 3, cout: 3 }]).unwrap();
        let mut p = vec![0.0; net.num_params()];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        let x = random_grid(4, 4, 3, &mut rng);
        let y = net.apply(&p, &x).unwrap();
        let expect = Grid::from_feature_map(
            &x.to_feature_map().unwrap().l2_normalize().unwrap(),
        );
        for (a, b) in y.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_network_is_degenerate() {
        let net = Network::new(3, vec![Layer::Conv1x1 { cin: 3, cout: 3 }]).unwrap();
        let x = Grid {
            data: vec![1.0; 12],
            ..Grid::zeros(2, 2, 3)
        };
        assert!(matches!(
            net.apply(&vec![0.0; net.num_params()], &x),
            Err(Error::DegenerateDescriptor { .. })
        ));
    }

    #[test]
    fn bottleneck_starts_as_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::bottleneck(4, 8, 2).unwrap();
        let p = net.init_params(&mut rng);
        let x = random_grid(5, 5, 4, &mut rng);
        let y = net.apply(&p, &x).unwrap();
        let expect = Grid::from_feature_map(&x.to_feature_map().unwrap().l2_normalize().unwrap());
        for (a, b) in y.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv3x3_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cin, cout) = (2, 3);
        let net = Network::new(cin, vec![Layer::Conv3x3 { cin, cout }]).unwrap();
        let p = net.random_params(1.0, &mut rng);
        let x = random_grid(4, 5, cin, &mut rng);
        let raw = conv_forward(&x, &p, 3, cout);
        for y in 0..4i64 {
            for xo in 0..5i64 {
                for o in 0..cout {
                    let mut acc = p[9 * cin * cout + o];
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (y + ky - 1, xo + kx - 1);
                            if !(0..4).contains(&sy) || !(0..5).contains(&sx) {
                                continue;
                            }
                            for i in 0..cin {
                                let tap = (ky * 3 + kx) as usize;
                                acc += p[(tap * cin + i) * cout + o]
                                    * x.data[((sy * 5 + sx) as usize) * cin + i];
                            }
                        }
                    }
                    let got = raw.data[((y * 5 + xo) as usize) * cout + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::bottleneck(3, 4, 1).unwrap();
        let p = net.random_params(1.0, &mut rng);
        let x = random_grid(4, 4, 3, &mut rng);
        let probe = random_grid(4, 4, 3, &mut rng);
        let f = |p: &[f64]| -> f64 {
            let y = net.apply(p, &x).unwrap();
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let trace = net.forward(&p, &x).unwrap();
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &trace, &probe, &mut g);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            let err = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
            assert!(err < 1e-5, "param {i}: analytic {} numeric {num}", g[i]);
        }
    }
}
