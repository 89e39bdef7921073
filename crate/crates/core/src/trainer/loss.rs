//! Sparse contrastive and dense soft-argmax losses with gradients wrt the
//! normalized feature grids.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::network::Grid;
use crate::error::{Error, Result};
use crate::tensor::{bilinear_taps, GridPoint, MIN_DESCRIPTOR_NORM};

pub const CONTRASTIVE_TEMPERATURE: f64 = 0.07;

/// A loss value and its gradient wrt both feature grids.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub d_src: Grid,
    pub d_tgt: Grid,
}

impl LossGrad {
    fn zero(fs: &Grid, ft: &Grid) -> Self {
        Self {
            value: 0.0,
            d_src: Grid::zeros(fs.height, fs.width, fs.channels),
            d_tgt: Grid::zeros(ft.height, ft.width, ft.channels),
        }
    }
}

/// A bilinear descriptor, renormalized, plus what is needed to backprop it.
struct Sampled {
    taps: [(usize, f64); 4],
    norm: f64,
    desc: Vec<f64>,
}

fn sample(f: &Grid, p: GridPoint) -> Result<Sampled> {
    if !p.in_bounds(f.width, f.height) || !p.x.is_finite() || !p.y.is_finite() {
        return Err(Error::OutOfBounds {
            x: p.x,
            y: p.y,
            width: f.width,
            height: f.height,
        });
    }
    let taps = bilinear_taps(p, f.width, f.height);
    let mut u = vec![0.0; f.channels];
    for &(i, w) in &taps {
        if w != 0.0 {
            u.iter_mut().zip(f.cell(i)).for_each(|(a, b)| *a += w * b);
        }
    }
    let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < MIN_DESCRIPTOR_NORM {
        return Err(Error::DegenerateDescriptor {
            y: p.y.round() as usize,
            x: p.x.round() as usize,
        });
    }
    u.iter_mut().for_each(|a| *a /= norm);
    Ok(Sampled { taps, norm, desc: u })
}

fn sample_backward(s: &Sampled, d_desc: &[f64], grad: &mut Grid) {
    let proj: f64 = s.desc.iter().zip(d_desc).map(|(a, b)| a * b).sum();
    let du: Vec<f64> = s
        .desc
        .iter()
        .zip(d_desc)
        .map(|(d, g)| (g - d * proj) / s.norm)
        .collect();
    for &(i, w) in &s.taps {
        if w != 0.0 {
            grad.cell_mut(i).iter_mut().zip(&du).for_each(|(a, b)| *a += w * b);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_lists(a: &[GridPoint], b: &[GridPoint]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} source keypoints but {} target keypoints",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Symmetric cross-entropy over the cosine-similarity matrix of keypoint
/// descriptors, with the identity pairing as labels.
pub fn loss_sparse(
    fs: &Grid,
    ft: &Grid,
    kps_s: &[GridPoint],
    kps_t: &[GridPoint],
    temperature: f64,
) -> Result<LossGrad> {
    check_lists(kps_s, kps_t)?;
    let n = kps_s.len();
    if n < 2 {
        return Err(Error::TooFewPairs { needed: 2, got: n });
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let ds = kps_s.iter().map(|&p| sample(fs, p)).collect::<Result<Vec<_>>>()?;
    let dt = kps_t.iter().map(|&p| sample(ft, p)).collect::<Result<Vec<_>>>()?;
    let z: Vec<Vec<f64>> = ds
        .iter()
        .map(|a| dt.iter().map(|b| dot(&a.desc, &b.desc) / temperature).collect())
        .collect();

    let mut value = 0.0;
    let mut dz = vec![vec![0.0; n]; n];
    let scale = 0.5 / n as f64;
    for i in 0..n {
        let p = softmax(&z[i]);
        value -= scale * p[i].ln();
        for j in 0..n {
            dz[i][j] += scale * (p[j] - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| z[i][j]).collect();
        let p = softmax(&col);
        value -= scale * p[j].ln();
        for i in 0..n {
            dz[i][j] += scale * (p[i] - if i == j { 1.0 } else { 0.0 });
        }
    }

    let mut out = LossGrad::zero(fs, ft);
    out.value = value;
    let c = fs.channels;
    for i in 0..n {
        let mut g = vec![0.0; c];
        for j in 0..n {
            let k = dz[i][j] / temperature;
            g.iter_mut().zip(&dt[j].desc).for_each(|(a, b)| *a += k * b);
        }
        sample_backward(&ds[i], &g, &mut out.d_src);
    }
    for j in 0..n {
        let mut g = vec![0.0; c];
        for i in 0..n {
            let k = dz[i][j] / temperature;
            g.iter_mut().zip(&ds[i].desc).for_each(|(a, b)| *a += k * b);
        }
        sample_backward(&dt[j], &g, &mut out.d_tgt);
    }
    Ok(out)
}

/// Draws one Gaussian offset per keypoint (std in grid cells).
pub fn draw_perturbations(n: usize, std: f64, rng: &mut impl Rng) -> Result<Vec<GridPoint>> {
    if std == 0.0 {
        return Ok(vec![GridPoint::new(0.0, 0.0); n]);
    }
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::InvalidArgument(format!("perturbation std: {e}")))?;
    Ok((0..n)
        .map(|_| GridPoint::new(normal.sample(rng), normal.sample(rng)))
        .collect())
}

/// Dense loss with a freshly drawn GT perturbation.
pub fn loss_dense(
    fs: &Grid,
    ft: &Grid,
    kps_s: &[GridPoint],
    kps_t: &[GridPoint],
    temperature: f64,
    perturb_std: f64,
    rng: &mut impl Rng,
) -> Result<LossGrad> {
    let offsets = draw_perturbations(kps_s.len(), perturb_std, rng)?;
    loss_dense_with_offsets(fs, ft, kps_s, kps_t, temperature, &offsets)
}

/// Sum over keypoints of the distance between the global soft-argmax in the
/// target and the perturbed target keypoint `kps_t[i] + offsets[i]`.
pub fn loss_dense_with_offsets(
    fs: &Grid,
    ft: &Grid,
    kps_s: &[GridPoint],
    kps_t: &[GridPoint],
    temperature: f64,
    offsets: &[GridPoint],
) -> Result<LossGrad> {
    check_lists(kps_s, kps_t)?;
    if offsets.len() != kps_s.len() {
        return Err(Error::Shape("one offset per keypoint required".into()));
    }
    if kps_s.is_empty() {
        return Err(Error::TooFewPairs { needed: 1, got: 0 });
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let mut out = LossGrad::zero(fs, ft);
    let w = ft.width;
    for ((&ps, &pt), &eps) in kps_s.iter().zip(kps_t).zip(offsets) {
        let d = sample(fs, ps)?;
        let logits: Vec<f64> = (0..ft.cells())
            .map(|q| dot(ft.cell(q), &d.desc) / temperature)
            .collect();
        let prob = softmax(&logits);
        let (mut ex, mut ey) = (0.0, 0.0);
        for (q, &p) in prob.iter().enumerate() {
            ex += p * (q % w) as f64;
            ey += p * (q / w) as f64;
        }
        let (rx, ry) = (ex - (pt.x + eps.x), ey - (pt.y + eps.y));
        let dist = rx.hypot(ry);
        out.value += dist;
        if dist == 0.0 {
            continue;
        }
        let (gx, gy) = (rx / dist, ry / dist);
        let mut d_desc = vec![0.0; fs.channels];
        for (q, &p) in prob.iter().enumerate() {
            let ds = p * (((q % w) as f64 - ex) * gx + ((q / w) as f64 - ey) * gy) / temperature;
            if ds == 0.0 {
                continue;
            }
            out.d_tgt
                .cell_mut(q)
                .iter_mut()
                .zip(&d.desc)
                .for_each(|(a, b)| *a += ds * b);
            d_desc.iter_mut().zip(ft.cell(q)).for_each(|(a, b)| *a += ds * b);
        }
        sample_backward(&d, &d_desc, &mut out.d_src);
    }
    Ok(out)
}

/// Sparse, dense and summed losses with the summed gradient.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub sparse: f64,
    pub dense: f64,
    pub total: f64,
    pub d_src: Grid,
    pub d_tgt: Grid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub temperature: f64,
    pub contrastive_temperature: f64,
}

/// `L_dense + L_sparse`.
pub fn total_loss(
    fs: &Grid,
    ft: &Grid,
    kps_s: &[GridPoint],
    kps_t: &[GridPoint],
    settings: LossSettings,
    offsets: &[GridPoint],
) -> Result<TotalLoss> {
    let sparse = loss_sparse(fs, ft, kps_s, kps_t, settings.contrastive_temperature)?;
    let dense = loss_dense_with_offsets(fs, ft, kps_s, kps_t, settings.temperature, offsets)?;
    let mut d_src = sparse.d_src;
    d_src.add_assign(&dense.d_src, 1.0);
    let mut d_tgt = sparse.d_tgt;
    d_tgt.add_assign(&dense.d_tgt, 1.0);
    Ok(TotalLoss {
        sparse: sparse.value,
        dense: dense.value,
        total: sparse.value + dense.value,
        d_src,
        d_tgt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Grid {
        let mut g = Grid::zeros(h, w, c);
        g.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        for i in 0..g.cells() {
            let cell = g.cell_mut(i);
            let n = cell.iter().map(|a| a * a).sum::<f64>().sqrt();
            cell.iter_mut().for_each(|a| *a /= n);
        }
        g
    }

    fn onehot_grid(h: usize, w: usize, c: usize) -> Grid {
        let mut g = Grid::zeros(h, w, c);
        for i in 0..g.cells() {
            g.cell_mut(i)[i % c] = 1.0;
        }
        g
    }

    #[test]
    fn sparse_closed_form() {
        let g = onehot_grid(1, 2, 2);
        let kps = [GridPoint::new(0.0, 0.0), GridPoint::new(1.0, 0.0)];
        let tau = 0.07;
        let l = loss_sparse(&g, &g, &kps, &kps, tau).unwrap();
        let expect = (1.0 + (-1.0 / tau).exp()).ln();
        assert!((l.value - expect).abs() < 1e-12);
    }

    #[test]
    fn sparse_permutation_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fs = unit_grid(4, 4, 3, &mut rng);
        let ft = unit_grid(4, 4, 3, &mut rng);
        let s = [GridPoint::new(0.5, 1.0), GridPoint::new(2.0, 3.0)];
        let t = [GridPoint::new(1.0, 1.0), GridPoint::new(3.0, 0.25)];
        let a = loss_sparse(&fs, &ft, &s, &t, 0.07).unwrap().value;
        let b = loss_sparse(&fs, &ft, &[s[1], s[0]], &[t[1], t[0]], 0.07).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn sparse_needs_two_pairs() {
        let g = onehot_grid(2, 2, 2);
        let p = [GridPoint::new(0.0, 0.0)];
        assert!(matches!(
            loss_sparse(&g, &g, &p, &p, 0.07),
            Err(Error::TooFewPairs { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn dense_zero_when_expectation_hits_target() {
        // uniform similarity over a 1x2 grid puts the expectation at (0.5, 0)
        let mut g = Grid::zeros(1, 2, 2);
        for i in 0..2 {
            g.cell_mut(i)[0] = 1.0;
        }
        let kp = [GridPoint::new(0.5, 0.0)];
        let l = loss_dense_with_offsets(&g, &g, &kp, &kp, 0.04, &[GridPoint::new(0.0, 0.0)]).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.d_src.data.iter().chain(&l.d_tgt.data).all(|&v| v == 0.0));
    }

    #[test]
    fn dense_sharp_peak() {
        let g = onehot_grid(3, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kp = [GridPoint::new(2.0, 1.0)];
        let l = loss_dense(&g, &g, &kp, &kp, 1e-3, 0.0, &mut rng).unwrap();
        assert!(l.value < 1e-2);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fs = unit_grid(5, 5, 4, &mut rng);
        let ft = unit_grid(5, 5, 4, &mut rng);
        let s = [GridPoint::new(0.0, 1.0), GridPoint::new(2.5, 3.0), GridPoint::new(4.0, 4.0)];
        let t = [GridPoint::new(1.0, 1.0), GridPoint::new(3.0, 0.0), GridPoint::new(2.0, 2.2)];
        let off = draw_perturbations(3, 1.0, &mut rng).unwrap();
        let settings = LossSettings {
            temperature: 0.04,
            contrastive_temperature: 0.07,
        };
        let total = total_loss(&fs, &ft, &s, &t, settings, &off).unwrap();
        let a = loss_sparse(&fs, &ft, &s, &t, 0.07).unwrap();
        let b = loss_dense_with_offsets(&fs, &ft, &s, &t, 0.04, &off).unwrap();
        assert_eq!(total.total, a.value + b.value);
        for i in 0..fs.data.len() {
            assert!((total.d_src.data[i] - a.d_src.data[i] - b.d_src.data[i]).abs() < 1e-15);
        }
    }
}
