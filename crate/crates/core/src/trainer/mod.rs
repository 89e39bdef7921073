//! Training the refinement network on annotated pairs of frozen features.
//!
//! One optimizer step uses one pair plus, when enabled, its flipped views.
//! Each distinct image is forwarded once per step; gradients from all views
//! are accumulated before a single backward pass per image.

pub mod augment;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::DEFAULT_TEMPERATURE;
use crate::par;
use crate::tensor::FeatureMap;

pub use augment::{
    apply_dropout, augment_pair, flip_keypoints, AugmentWeights, ImageRole, PairBatch, Variant,
    WeightedPair,
};
pub use gradcheck::{finite_diff_check, GradCheckReport, LossProblem, Probe};
pub use loss::{
    loss_dense, loss_dense_with_offsets, loss_sparse, total_loss, LossGrad, LossSettings, TotalLoss,
    CONTRASTIVE_TEMPERATURE,
};
pub use network::{Grid, Layer, Network, Trace};
pub use optim::{AdamW, OneCycle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub pct_start: f64,
    pub dropout: f64,
    /// Std of the GT perturbation, in grid cells.
    pub perturb_std: f64,
    pub temperature: f64,
    pub contrastive_temperature: f64,
    pub augment: bool,
    pub weights: AugmentWeights,
    pub hidden: usize,
    pub blocks: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1.25e-3,
            weight_decay: 1e-3,
            pct_start: 0.3,
            dropout: 0.2,
            perturb_std: 1.0,
            temperature: DEFAULT_TEMPERATURE,
            contrastive_temperature: CONTRASTIVE_TEMPERATURE,
            augment: true,
            weights: AugmentWeights::default(),
            hidden: 64,
            blocks: 2,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("temperature", self.temperature),
            ("contrastive_temperature", self.contrastive_temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.perturb_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate, weight_decay and perturb_std must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must be in [0, 1)".into()));
        }
        if self.hidden == 0 || self.blocks == 0 {
            return Err(Error::InvalidArgument("hidden and blocks must be positive".into()));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<OneCycle> {
        OneCycle::new(self.learning_rate, self.steps, self.pct_start)
    }

    fn loss_settings(&self) -> LossSettings {
        LossSettings {
            temperature: self.temperature,
            contrastive_temperature: self.contrastive_temperature,
        }
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PostProcessor {
    pub network: Network,
    pub params: Vec<f64>,
}

impl PostProcessor {
    pub fn new(network: Network, params: Vec<f64>) -> Result<Self> {
        if params.len() != network.num_params() {
            return Err(Error::Shape(format!(
                "network has {} parameters, got {}",
                network.num_params(),
                params.len()
            )));
        }
        Ok(Self { network, params })
    }

    /// Runs the network on raw features; the output is unit-normalized per cell.
    pub fn postprocess(&self, f: &FeatureMap) -> Result<FeatureMap> {
        self.network
            .apply(&self.params, &Grid::from_feature_map(f))?
            .to_feature_map()?
            .assume_normalized(1e-4)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.network, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (network, params) = checkpoint::load(path)?;
        Self::new(network, params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub l_sparse: f64,
    pub l_dense: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PostProcessor,
    pub trace: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn write_trace_csv(trace: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,lr,l_sparse,l_dense,total")?;
    for r in trace {
        writeln!(out, "{},{:e},{},{},{}", r.step, r.lr, r.l_sparse, r.l_dense, r.total)?;
    }
    Ok(())
}

/// Means of consecutive non-overlapping windows of `window` steps.
pub fn window_means(trace: &[LossRecord], window: usize) -> Vec<f64> {
    trace
        .chunks_exact(window.max(1))
        .map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64)
        .collect()
}

// RNG streams
const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_NOISE: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Trains a fresh bottleneck network. Checkpoints go to `checkpoint_dir`
/// (as `step_<n>.gmck`) when `checkpoint_every > 0`.
pub fn train(pairs: &[PairBatch], cfg: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = pairs.first().ok_or(Error::Empty("training pairs"))?;
    let net = Network::bottleneck(first.src.channels(), cfg.hidden, cfg.blocks)?;
    let params = net.init_params(&mut rng(cfg.seed, STREAM_INIT));
    train_from(PostProcessor::new(net, params)?, pairs, cfg, checkpoint_dir)
}

/// Continues training `model`.
pub fn train_from(
    mut model: PostProcessor,
    pairs: &[PairBatch],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    let views = pairs
        .iter()
        .map(|b| {
            if b.src.channels() != model.network.in_channels() {
                return Err(Error::Shape(format!(
                    "pair `{}` has {} channels, network expects {}",
                    b.id,
                    b.src.channels(),
                    model.network.in_channels()
                )));
            }
            if cfg.augment {
                augment_pair(b, &cfg.weights)
            } else {
                augment::original_only(b, &cfg.weights)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let schedule = cfg.schedule()?;
    let mut opt = AdamW::new(model.network.num_params(), cfg.weight_decay);
    let mut order_rng = rng(cfg.seed, STREAM_ORDER);
    let mut noise = rng(cfg.seed, STREAM_NOISE);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();

    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..pairs.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled");
        let lr = schedule.lr(step);
        let (record, grad) = step_gradient(&model, &pairs[idx], &views[idx], cfg, &mut noise)?;
        if !record.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                pair: pairs[idx].id.clone(),
            });
        }
        opt.step(&mut model.params, &grad, lr);
        trace.push(LossRecord { step, lr, ..record });

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = checkpoint_dir {
                let path = dir.join(format!("step_{}.gmck", step + 1));
                model.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome {
        model,
        trace,
        checkpoints,
    })
}

/// Weighted loss over all usable views of one pair and its parameter
/// gradient. Views with fewer than two matched keypoints are skipped.
fn step_gradient(
    model: &PostProcessor,
    batch: &PairBatch,
    views: &[WeightedPair],
    cfg: &TrainConfig,
    noise: &mut ChaCha20Rng,
) -> Result<(LossRecord, Vec<f64>)> {
    let mut usable = Vec::new();
    for v in views {
        let (s, t) = v.matched();
        if s.len() >= 2 && v.weight != 0.0 {
            usable.push((v, s, t));
        }
    }
    let mut roles: BTreeMap<ImageRole, usize> = BTreeMap::new();
    for (v, _, _) in &usable {
        let n = roles.len();
        roles.entry(v.source).or_insert(n);
        let n = roles.len();
        roles.entry(v.target).or_insert(n);
    }
    let mut by_slot: Vec<ImageRole> = vec![ImageRole::Source; roles.len()];
    for (&r, &i) in &roles {
        by_slot[i] = r;
    }

    // all random draws happen here, in a fixed order
    let mut inputs = Vec::with_capacity(by_slot.len());
    for &role in &by_slot {
        let f = batch
            .image(role)
            .ok_or_else(|| Error::MissingFlippedFeatures(batch.id.clone()))?;
        let mut g = Grid::from_feature_map(f);
        augment::dropout_grid(&mut g, cfg.dropout, noise)?;
        inputs.push(g);
    }
    let offsets = usable
        .iter()
        .map(|(_, s, _)| loss::draw_perturbations(s.len(), cfg.perturb_std, noise))
        .collect::<Result<Vec<_>>>()?;

    let net = &model.network;
    let params = &model.params;
    let traces = par::map(&inputs, |g| net.forward(params, g))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut d_out: Vec<Grid> = traces
        .iter()
        .map(|t| Grid::zeros(t.output.height, t.output.width, t.output.channels))
        .collect();

    let mut record = LossRecord {
        step: 0,
        lr: 0.0,
        l_sparse: 0.0,
        l_dense: 0.0,
        total: 0.0,
    };
    for ((v, s, t), off) in usable.iter().zip(&offsets) {
        let (a, b) = (roles[&v.source], roles[&v.target]);
        let l = total_loss(&traces[a].output, &traces[b].output, s, t, cfg.loss_settings(), off)?;
        record.l_sparse += v.weight * l.sparse;
        record.l_dense += v.weight * l.dense;
        record.total += v.weight * l.total;
        d_out[a].add_assign(&l.d_src, v.weight);
        d_out[b].add_assign(&l.d_tgt, v.weight);
    }

    let slots: Vec<usize> = (0..traces.len()).collect();
    let grads = par::map(&slots, |&i| {
        let mut g = vec![0.0; net.num_params()];
        net.backward(params, &traces[i], &d_out[i], &mut g);
        g
    });
    let mut grad = vec![0.0; net.num_params()];
    for g in grads {
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((record, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GridPoint;
    use rand::Rng;

    fn toy_pair(seed: u64) -> PairBatch {
        let mut r = rng(seed, 9);
        let mut f = || {
            FeatureMap::from_fn(6, 6, 4, |_, _, _| r.random_range(-1.0..1.0))
                .unwrap()
                .l2_normalize()
                .unwrap()
        };
        let (src, tgt, sf, tf) = (f(), f(), f(), f());
        let kps: Vec<Option<GridPoint>> = (0..4)
            .map(|k| Some(GridPoint::new(k as f64, (5 - k) as f64)))
            .collect();
        PairBatch {
            id: format!("pair{seed}"),
            src,
            tgt,
            src_flipped: Some(sf),
            tgt_flipped: Some(tf),
            src_kps: kps.clone(),
            tgt_kps: kps,
            flip_map: vec![1, 0, 2, 3],
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            steps: 6,
            hidden: 4,
            blocks: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_zero_decay_is_a_noop() {
        let pairs = vec![toy_pair(1)];
        let cfg = TrainConfig {
            steps: 1,
            learning_rate: 0.0,
            weight_decay: 0.0,
            ..small_cfg()
        };
        let net = Network::bottleneck(4, 4, 1).unwrap();
        let params = net.random_params(1.0, &mut rng(3, 0));
        let model = PostProcessor::new(net, params.clone()).unwrap();
        let out = train_from(model, &pairs, &cfg, None).unwrap();
        assert_eq!(out.model.params, params);
    }

    #[test]
    fn same_seed_same_parameters() {
        let pairs = vec![toy_pair(1), toy_pair(2)];
        let a = train(&pairs, &small_cfg(), None).unwrap();
        let b = train(&pairs, &small_cfg(), None).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.trace, b.trace);
        let c = train(&pairs, &TrainConfig { seed: 1, ..small_cfg() }, None).unwrap();
        assert_ne!(a.model.params, c.model.params);
    }

    #[test]
    fn checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 3,
            ..small_cfg()
        };
        let out = train(&[toy_pair(4)], &cfg, Some(dir.path())).unwrap();
        assert_eq!(out.checkpoints.len(), 2);
        let back = PostProcessor::load(&out.checkpoints[1]).unwrap();
        for (a, b) in back.params.iter().zip(&out.model.params) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn nan_features_abort_with_pair_id() {
        let mut p = toy_pair(5);
        let mut data = p.src.data().to_vec();
        data[0] = f32::NAN;
        p.src = FeatureMap::new(6, 6, 4, data).unwrap();
        let err = train(&[p], &small_cfg(), None).unwrap_err();
        assert!(
            matches!(&err, Error::NonFiniteLoss { step: 0, pair } if pair == "pair5"),
            "{err}"
        );
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace_csv(
            &[LossRecord {
                step: 0,
                lr: 1e-3,
                l_sparse: 1.0,
                l_dense: 2.0,
                total: 3.0,
            }],
            &mut buf,
        )
        .unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("step,lr,l_sparse,l_dense,total\n0,"));
    }
}
