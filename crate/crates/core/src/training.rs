//! Training loop: planner forward pass, spline and task loss on the costmap,
//! loss gradients injected into the network, SGD with momentum, step-decay
//! learning rate, and early stopping on the validation loss.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::costmap::{CostMap, HeightMap};
use crate::datagen::TrainingSample;
use crate::losses::{total_loss, LossBreakdown, LossContext, LossError, LossWeights};
use crate::planner::{plan, PlannerError, PlannerParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at sample {index}: {breakdown}")]
    NonFinite { index: usize, breakdown: String },
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("config I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub patience: usize,
    /// Minimum validation improvement that resets the patience counter.
    pub min_improvement: f64,
    pub weights: LossWeights,
    pub w_r: f64,
    pub h_r: f64,
    pub delta_mu: f64,
    pub obstacle_threshold: f64,
    pub samples_per_segment: usize,
    pub val_fraction: f64,
    /// Global L2 norm the averaged batch gradient is rescaled to; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 100,
            lr_decay: 0.5,
            lr_step: 20,
            patience: 10,
            min_improvement: 1e-4,
            weights: LossWeights::default(),
            w_r: 0.5,
            h_r: 0.5,
            delta_mu: 0.5,
            obstacle_threshold: 1.75,
            samples_per_segment: 10,
            val_fraction: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let problems: Vec<&str> = [
            (self.lr >= 0.0 && self.lr.is_finite(), "lr must be >= 0"),
            ((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.lr_step >= 1, "lr_step must be >= 1"),
            (self.lr_decay > 0.0, "lr_decay must be > 0"),
            ((0.0..1.0).contains(&self.val_fraction), "val_fraction must be in [0, 1)"),
            (self.samples_per_segment >= 1, "samples_per_segment must be >= 1"),
            (self.grad_clip >= 0.0, "grad_clip must be >= 0"),
        ]
        .into_iter()
        .filter(|(ok, _)| !ok)
        .map(|(_, msg)| msg)
        .collect();
        if !problems.is_empty() {
            return Err(TrainError::Config(problems.join("; ")));
        }
        self.weights.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn loss_context<'a>(&self, maps: &TrainMaps<'a>) -> LossContext<'a> {
        LossContext {
            cost: maps.cost,
            height: maps.height,
            weights: self.weights,
            w_r: self.w_r,
            h_r: self.h_r,
            obstacle_threshold: self.obstacle_threshold,
            samples_per_segment: self.samples_per_segment,
        }
    }
}

/// Maps the task loss is evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct TrainMaps<'a> {
    pub cost: &'a CostMap,
    pub height: &'a HeightMap,
}

/// Mean loss terms over a set of samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanLoss {
    pub total: f64,
    pub traversability: f64,
    pub goal: f64,
    pub motion: f64,
    pub height: f64,
    pub collision: f64,
}

impl MeanLoss {
    fn from_breakdowns<'b>(items: impl IntoIterator<Item = &'b LossBreakdown>) -> Self {
        let mut m = MeanLoss::default();
        let mut n = 0usize;
        for b in items {
            m.total += b.total;
            m.traversability += b.traversability;
            m.goal += b.goal;
            m.motion += b.motion;
            m.height += b.height;
            m.collision += b.collision;
            n += 1;
        }
        if n > 0 {
            let k = 1.0 / n as f64;
            for v in [&mut m.total, &mut m.traversability, &mut m.goal, &mut m.motion, &mut m.height, &mut m.collision] {
                *v *= k;
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: MeanLoss,
    pub val: MeanLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Epoch 0 holds the losses of the initial parameters.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// CSV with columns `epoch,lr,train_total,val_total,T_trav,T_goal,T_motion,T_height,C`;
    /// the component columns are training-split means.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_total,val_total,T_trav,T_goal,T_motion,T_height,C\n");
        for e in &self.epochs {
            let t = &e.train;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch, e.lr, t.total, e.val.total, t.traversability, t.goal, t.motion, t.height, t.collision
            );
        }
        s
    }
}

/// Scans and robot-frame goal fed to the network for one sample.
fn forward_loss<'p>(
    params: &'p PlannerParams,
    sample: &TrainingSample,
    ctx: &LossContext<'_>,
) -> Result<(LossBreakdown, crate::planner::Forward<'p>), TrainError> {
    let goal_robot = ctx.goal_in_robot_frame(&sample.pose, sample.goal);
    let (out, fwd) = plan(&sample.depth, &sample.semantic, goal_robot, params)?;
    let b = total_loss(ctx, &sample.pose, &out.keypoints, out.logit, sample.goal)?;
    Ok((b, fwd))
}

/// Loss of one sample and the gradient of its total w.r.t. every parameter block.
pub fn sample_gradient(
    params: &PlannerParams,
    sample: &TrainingSample,
    ctx: &LossContext<'_>,
) -> Result<(LossBreakdown, Vec<Tensor>), TrainError> {
    let (b, fwd) = forward_loss(params, sample, ctx)?;
    let grads = fwd.backward(params, &b.grad_keypoints, b.grad_logit)?;
    Ok((b, grads))
}

pub fn sample_loss(params: &PlannerParams, sample: &TrainingSample, ctx: &LossContext<'_>) -> Result<LossBreakdown, TrainError> {
    Ok(forward_loss(params, sample, ctx)?.0)
}

fn check_finite(b: &LossBreakdown, index: usize) -> Result<(), TrainError> {
    if b.total.is_finite() && b.grad_keypoints.iter().flatten().all(|v| v.is_finite()) && b.grad_logit.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite {
            index,
            breakdown: b.to_string(),
        })
    }
}

/// Mean losses of `params` over `split`; no parameter updates.
pub fn validate(params: &PlannerParams, split: &[TrainingSample], maps: &TrainMaps<'_>, cfg: &TrainConfig) -> Result<MeanLoss, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let ctx = cfg.loss_context(maps);
    let losses: Vec<LossBreakdown> = split
        .par_iter()
        .map(|s| sample_loss(params, s, &ctx))
        .collect::<Result<_, _>>()?;
    Ok(MeanLoss::from_breakdowns(&losses))
}

/// Deterministic train/validation split: a seeded shuffle, with the first
/// `round(val_fraction * n)` indices held out. A split that would leave
/// validation empty validates on the training samples.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
    let n_val = ((val_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    if val.is_empty() {
        (train.clone(), train)
    } else {
        (train, val)
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
    }
    norm
}

/// Applies one SGD-with-momentum step: `v = momentum * v + g; theta -= lr * v`.
pub fn sgd_step(params: &mut PlannerParams, velocity: &mut [Tensor], grads: &[Tensor], lr: f64, momentum: f64) {
    for ((p, v), g) in params.tensors_mut().iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
}

/// Averaged batch gradient, accumulated in sample order.
fn batch_gradient(
    params: &PlannerParams,
    samples: &[TrainingSample],
    batch: &[usize],
    ctx: &LossContext<'_>,
) -> Result<(Vec<LossBreakdown>, Vec<Tensor>), TrainError> {
    let per: Vec<(LossBreakdown, Vec<Tensor>)> = batch
        .par_iter()
        .map(|&i| sample_gradient(params, &samples[i], ctx))
        .collect::<Result<_, _>>()?;
    let mut sum: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut losses = Vec::with_capacity(per.len());
    for ((b, g), &i) in per.into_iter().zip(batch) {
        check_finite(&b, i)?;
        for (s, gi) in sum.iter_mut().zip(&g) {
            for (a, x) in s.data_mut().iter_mut().zip(gi.data()) {
                *a += x;
            }
        }
        losses.push(b);
    }
    let k = 1.0 / batch.len() as f64;
    for s in &mut sum {
        s.data_mut().iter_mut().for_each(|v| *v *= k);
    }
    Ok((losses, sum))
}

/// Trains from `params0` and returns the parameters with the best validation
/// loss together with the per-epoch history.
pub fn train(
    samples: &[TrainingSample],
    maps: &TrainMaps<'_>,
    params0: &PlannerParams,
    cfg: &TrainConfig,
) -> Result<(PlannerParams, TrainHistory), TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (train_idx, val_idx) = split_indices(samples.len(), cfg.val_fraction, cfg.seed);
    let train_set: Vec<TrainingSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let val_set: Vec<TrainingSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let ctx = cfg.loss_context(maps);

    let mut params = params0.clone();
    let mut velocity: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut lr = cfg.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let val0 = validate(&params, &val_set, maps, cfg)?;
    let train0 = validate(&params, &train_set, maps, cfg)?;
    let mut epochs = vec![EpochRecord { epoch: 0, lr, train: train0, val: val0 }];
    let mut best = (val0.total, 0usize, params.clone());
    let mut stale = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_size) {
            let (losses, mut grads) = batch_gradient(&params, &train_set, batch, &ctx)?;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            sgd_step(&mut params, &mut velocity, &grads, lr, cfg.momentum);
            seen.extend(losses);
        }
        let train_mean = MeanLoss::from_breakdowns(&seen);
        let val = validate(&params, &val_set, maps, cfg)?;
        epochs.push(EpochRecord { epoch, lr, train: train_mean, val });

        if val.total < best.0 - cfg.min_improvement {
            best = (val.total, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        if epoch % cfg.lr_step == 0 {
            lr *= cfg.lr_decay;
        }
        if stale >= cfg.patience {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let stop_epoch = epochs.last().map_or(0, |e| e.epoch);
    let (_, best_epoch, best_params) = best;
    Ok((
        best_params,
        TrainHistory {
            epochs,
            best_epoch,
            stop_epoch,
            stop_reason,
        },
    ))
}
