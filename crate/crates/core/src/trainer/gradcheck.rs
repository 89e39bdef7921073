//! Central finite-difference checks of the analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{total_loss, LossSettings};
use super::network::{Grid, Network};
use crate::error::Result;
use crate::par;
use crate::tensor::GridPoint;

/// A function value together with an identifier of the smooth piece it was
/// evaluated on (for piecewise-smooth functions such as ReLU networks).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub region: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Analytic and numeric derivative at `worst_index`.
    pub worst_pair: (f64, f64),
    pub checked: usize,
    /// Parameters whose stencil crossed a kink at the requested step and
    /// were retried with a smaller one.
    pub refined: usize,
    /// Parameters skipped because every tried stencil crossed a kink.
    pub skipped: usize,
    /// Rounding step of the numeric derivative, `ulp(|f|) / 2h`, at the
    /// requested `h`.
    pub quantum: f64,
    /// Largest relative error among parameters whose derivative exceeds
    /// `1e5` rounding steps at the step actually used, i.e. the ones a
    /// central difference resolves with a tenfold margin at four digits.
    pub resolved_max_rel_error: f64,
    pub resolved: usize,
}

fn ulp(x: f64) -> f64 {
    let x = x.abs();
    f64::from_bits(x.to_bits() + 1) - x
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

const REFINEMENTS: u32 = 3;

/// Compares `analytic[i]` against `(f(p + h e_i) - f(p - h e_i)) / 2h` for
/// each index. When a stencil leaves the region of `params`, `h` is shrunk
/// tenfold up to three times.
pub fn finite_diff_check<F>(
    f: F,
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<Probe> + Sync + Send,
{
    let base_probe = f(params)?;
    let base = base_probe.region;
    let results = par::map(indices, |&i| -> Result<Option<(f64, f64, f64)>> {
        let mut step = h;
        for _ in 0..=REFINEMENTS {
            let mut p = params.to_vec();
            p[i] = params[i] + step;
            let plus = f(&p)?;
            p[i] = params[i] - step;
            let minus = f(&p)?;
            if plus.region == base && minus.region == base {
                let numeric = (plus.value - minus.value) / (2.0 * step);
                return Ok(Some((relative_error(analytic[i], numeric), numeric, step)));
            }
            step /= 10.0;
        }
        Ok(None)
    });
    let quantum = ulp(base_probe.value) / (2.0 * h);
    let mut report = GradCheckReport {
        quantum,
        ..Default::default()
    };
    for (&i, r) in indices.iter().zip(results) {
        match r? {
            Some((err, numeric, step)) => {
                report.checked += 1;
                report.refined += (step < h) as usize;
                if err > report.max_rel_error || report.worst_index.is_none() {
                    report.max_rel_error = err;
                    report.worst_index = Some(i);
                    report.worst_pair = (analytic[i], numeric);
                }
                if analytic[i].abs().max(numeric.abs()) >= 1e5 * quantum * (h / step) {
                    report.resolved += 1;
                    report.resolved_max_rel_error = report.resolved_max_rel_error.max(err);
                }
            }
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

/// A fixed training instance: raw input grids, aligned keypoints and the
/// GT offsets of the dense loss.
#[derive(Clone, Debug)]
pub struct LossProblem {
    pub src: Grid,
    pub tgt: Grid,
    pub kps_s: Vec<GridPoint>,
    pub kps_t: Vec<GridPoint>,
    pub offsets: Vec<GridPoint>,
    pub settings: LossSettings,
}

impl LossProblem {
    pub fn evaluate(&self, net: &Network, params: &[f64]) -> Result<Probe> {
        let a = net.forward(params, &self.src)?;
        let b = net.forward(params, &self.tgt)?;
        let l = total_loss(&a.output, &b.output, &self.kps_s, &self.kps_t, self.settings, &self.offsets)?;
        let region = net.activation_signature(&a) ^ net.activation_signature(&b).rotate_left(1);
        Ok(Probe {
            value: l.total,
            region,
        })
    }

    pub fn gradient(&self, net: &Network, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let a = net.forward(params, &self.src)?;
        let b = net.forward(params, &self.tgt)?;
        let l = total_loss(&a.output, &b.output, &self.kps_s, &self.kps_t, self.settings, &self.offsets)?;
        let mut grad = vec![0.0; net.num_params()];
        net.backward(params, &a, &l.d_src, &mut grad);
        net.backward(params, &b, &l.d_tgt, &mut grad);
        Ok((l.total, grad))
    }
}

/// Checks the full parameter gradient of [`total_loss`] through the
/// network on up to `samples` randomly chosen parameters (all of them if
/// there are fewer).
pub fn check_network(
    net: &Network,
    params: &[f64],
    problem: &LossProblem,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grad) = problem.gradient(net, params)?;
    let n = params.len();
    let indices: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, n, samples).into_vec();
        v.sort_unstable();
        v
    };
    finite_diff_check(|p| problem.evaluate(net, p), params, &grad, &indices, h)
}
