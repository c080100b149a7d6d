//! Mini-batch training with MAE loss in raw units, global-norm clipping,
//! Adam updates and early stopping on validation MAE.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, SplitWindows, WindowSample, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::{ParamStore, StsgtModel};
use crate::numerics::{clip_global_norm, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            clip_norm: 5.0,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted: it freezes the parameters, which is a useful probe.
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!("train.lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::invalid("train.batch_size and train.patience must be at least 1"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::invalid("train.clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return Err(Error::invalid("train.beta1/beta2 must lie in [0,1) and train.eps be positive"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments and a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Changes the step size while keeping the moment estimates.
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn new(cfg: &TrainConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to improve on the best value.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        if value < self.best {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    /// `epoch,train_mae,val_mae`. Wall-clock time is kept out of this file so
    /// identical runs produce identical bytes; see [`TrainReport::write_timing_csv`].
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["epoch", "train_mae", "val_mae"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.train_mae.to_string(), e.val_mae.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `epoch,seconds`.
    pub fn write_timing_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["epoch", "seconds"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), format!("{:.3}", e.seconds)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stacks windows into `x: [B, M, N, 1]` (normalized) and `y: [B, H, N]` (raw).
pub fn stack_batch(windows: &[&WindowSample], m: usize, h: usize, n: usize) -> Result<(Tensor, Tensor)> {
    let b = windows.len();
    let mut x = Vec::with_capacity(b * m * n);
    let mut y = Vec::with_capacity(b * h * n);
    for w in windows {
        if w.history.len() != m * n || w.target.len() != h * n {
            return Err(Error::dim("stack_batch", &[m, n, h], &[w.history.len(), w.target.len()]));
        }
        x.extend_from_slice(&w.history);
        y.extend_from_slice(&w.target);
    }
    Ok((Tensor::new(&[b, m, n, 1], x)?, Tensor::new(&[b, h, n], y)?))
}

/// Raw-unit forecasts `[B, H, N]` for a batch of windows.
pub fn predict_windows(model: &StsgtModel, windows: &[&WindowSample], stats: &NormStats) -> Result<Tensor> {
    let c = model.config();
    let (x, _) = stack_batch(windows, c.m, c.h, c.n)?;
    Ok(model.predict(&x)?.map(|z| stats.denormalize(z)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// One optimizer step on a batch; the loss is MAE of denormalized forecasts
/// against raw targets.
pub fn train_step(
    model: &mut StsgtModel,
    adam: &mut Adam,
    batch: &[&WindowSample],
    stats: &NormStats,
    clip_norm: f64,
) -> Result<StepInfo> {
    let c = model.config().clone();
    let (x, y) = stack_batch(batch, c.m, c.h, c.n)?;
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &x, true)?;
    let pred = tape.scale_shift(fwd.output, stats.std, stats.mean);
    let loss_var = tape.mae_loss(pred, &y)?;
    let loss = tape.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0, param_norms: param_norm_summary(model.params()) });
    }
    let mut grads_all = tape.backward(loss_var)?;
    let mut grads: Vec<Tensor> = fwd
        .params
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| grads_all.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);
    let grad_norm = clip_global_norm(&mut grads, clip_norm)?;
    let clipped_norm = crate::numerics::global_norm(grads.iter());
    adam.step(model.params_mut().tensors_mut(), &grads);
    Ok(StepInfo { loss, grad_norm, clipped_norm })
}

fn param_norm_summary(params: &ParamStore) -> String {
    params.iter().map(|(n, t)| format!("{n}={:.4e}", t.sq_norm().sqrt())).collect::<Vec<_>>().join(", ")
}

/// Mean absolute error over every horizon step, vertex and window of a split,
/// in raw units.
pub fn split_mae(model: &StsgtModel, split: &SplitWindows, batch_size: usize) -> Result<f64> {
    if split.windows.is_empty() {
        return Err(Error::EmptyInput("validation windows"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let refs: Vec<&WindowSample> = split.windows.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let pred = predict_windows(model, chunk, &split.stats)?;
        let truth = chunk.iter().flat_map(|w| w.target.iter());
        for (p, t) in pred.data().iter().zip(truth) {
            total += (p - t).abs();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Trains in place, restoring the parameters of the best validation epoch.
/// `on_epoch` sees every finished epoch (for progress logging).
pub fn train(
    model: &mut StsgtModel,
    data: &WindowedDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.windows.is_empty() || data.val.windows.is_empty() {
        return Err(Error::EmptyInput("training or validation windows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg, model.params().tensors());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params().clone();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.train.windows.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowSample> = idx.iter().map(|&i| &data.train.windows[i]).collect();
            let info = train_step(model, &mut adam, &batch, &data.train.stats, cfg.clip_norm).map_err(|e| match e {
                Error::NonFiniteLoss { param_norms, .. } => Error::NonFiniteLoss { epoch, batch: bi + 1, param_norms },
                other => other,
            })?;
            loss_sum += info.loss * batch.len() as f64;
        }
        let train_mae = loss_sum / order.len() as f64;
        let val_mae = split_mae(model, &data.val, cfg.batch_size)?;
        let record = EpochRecord { epoch, train_mae, val_mae, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&record);
        report.epochs.push(record);
        match stopper.observe(epoch, val_mae) {
            StopDecision::Improved => best = model.params().clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                report.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    if let Some((epoch, mae)) = stopper.best() {
        report.best_epoch = epoch;
        report.best_val_mae = mae;
        *model.params_mut() = best;
    } else {
        // every validation MAE was NaN
        return Err(Error::NonFiniteLoss {
            epoch: report.epochs.len(),
            batch: 0,
            param_norms: param_norm_summary(model.params()),
        });
    }
    Ok(report)
}
