use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{total_loss, LossReport};
use crate::corpus::TrainPool;
use crate::error::{Error, Result};
use crate::model::CmpModel;
use crate::numerics::{lit, seeded_rng, Gradients, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mask_rate: f64,
    /// Identity-based hard negatives for the matching loss.
    pub ihnm: bool,
    /// Leading fraction of training identities to use.
    pub data_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 22,
            epochs: 30,
            lr_max: 1e-4,
            lr_min: 1e-5,
            warmup_steps: 500,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mask_rate: 0.25,
            ihnm: true,
            data_fraction: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2"));
        }
        if !(self.lr_max >= 0.0 && self.lr_min >= 0.0) {
            return Err(Error::config("train.lr_max", "learning rates must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::config("train.mask_rate", "must lie in [0, 1]"));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::config("train.data_fraction", "must lie in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Linear warm-up to `lr_max`, then linear decay to `lr_min` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr_max * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup + 1);
        if span == 0 {
            return self.lr_max;
        }
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.lr_max + (self.lr_min - self.lr_max) * t
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only, never to
/// biases or normalization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in grads.params() {
            let k = id.index();
            let p = params.get_mut(id);
            let decay = if p.rank() >= 2 { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i].to_f64().unwrap_or(f64::NAN);
                let mi = b1 * m[i].to_f64().unwrap_or(0.0) + (1.0 - b1) * gi;
                let vi = b2 * v[i].to_f64().unwrap_or(0.0) + (1.0 - b2) * gi * gi;
                m[i] = lit(mi);
                v[i] = lit(vi);
                let wf = w.to_f64().unwrap_or(0.0);
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *w = lit(wf - decay * wf - upd);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_cl: f64,
    pub l_itm: f64,
    pub l_mlm: f64,
    pub l_total: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

impl EpochLoss {
    pub const CSV_HEADER: &'static str = "epoch,l_cl,l_itm,l_mlm,l_total,lr";

    pub fn write_csv(path: &Path, curve: &[EpochLoss]) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "{}", Self::CSV_HEADER).expect("vec write");
        for e in curve {
            writeln!(out, "{},{},{},{},{},{}", e.epoch, e.l_cl, e.l_itm, e.l_mlm, e.l_total, e.lr).expect("vec write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub optimizer: AdamW<T>,
    pub curve: Vec<EpochLoss>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &CmpModel<T>, cfg: &TrainConfig) -> Self {
        Self { epoch: 0, step: 0, optimizer: AdamW::new(&model.params, cfg), curve: Vec::new() }
    }
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence { epoch, step, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Runs the remaining epochs of `cfg` on `pool`, calling `on_epoch` after each
/// one; returning `ControlFlow::Break` stops early with the state so far.
/// Every epoch draws from its own random stream, so a resumed run
/// matches an uninterrupted one.
pub fn train<T, F>(
    model: &mut CmpModel<T>,
    pool: &TrainPool<'_>,
    cfg: &TrainConfig,
    resume: Option<TrainState<T>>,
    mut on_epoch: F,
) -> Result<TrainState<T>>
where
    T: Scalar,
    F: FnMut(&CmpModel<T>, &TrainState<T>) -> Result<ControlFlow<()>>,
{
    cfg.validate()?;
    if pool.len() < cfg.batch_size {
        return Err(Error::invalid(
            "train",
            format!("{} training pairs cannot fill a batch of {}", pool.len(), cfg.batch_size),
        ));
    }
    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        warmup: cfg.warmup_steps,
        total: steps_per_epoch * cfg.epochs,
    };
    let vocab = model.config.vocab_size;
    let mut state = resume.unwrap_or_else(|| TrainState::new(model, cfg));
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = seeded_rng(cfg.seed, (1 << 32) + epoch as u64);
        let mut sum = LossReport::default();
        let mut steps = 0usize;
        let mut lr = schedule.lr(state.step);
        for positives in pool.epoch_batches(cfg.batch_size, &mut rng) {
            lr = schedule.lr(state.step);
            state.step += 1;
            if positives.len() < 2 {
                continue;
            }
            let batch = pool.build_batch(&positives, cfg.ihnm, cfg.mask_rate, vocab, &mut rng)?;
            let (report, grads) = {
                let mut g = model.graph();
                let (vars, report) = total_loss(&mut g, model, pool, &batch).map_err(|e| diverged(epoch, state.step, e))?;
                if !report.l_total.is_finite() {
                    return Err(Error::Divergence { epoch, step: state.step, detail: format!("loss {report:?}") });
                }
                (report, g.backward(vars.total).map_err(|e| diverged(epoch, state.step, e))?)
            };
            state.optimizer.update(&mut model.params, &grads, lr);
            sum.l_cl += report.l_cl;
            sum.l_itm += report.l_itm;
            sum.l_mlm += report.l_mlm;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let mean = LossReport::new(sum.l_cl / k, sum.l_itm / k, sum.l_mlm / k);
        state.curve.push(EpochLoss {
            epoch: epoch + 1,
            l_cl: mean.l_cl,
            l_itm: mean.l_itm,
            l_mlm: mean.l_mlm,
            l_total: mean.l_total,
            lr,
        });
        state.epoch += 1;
        if on_epoch(model, &state)?.is_break() {
            break;
        }
    }
    Ok(state)
}
