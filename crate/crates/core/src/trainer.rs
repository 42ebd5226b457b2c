//! Optimizers and the supervised loop shared by plain ERM runs and runs
//! with adversarial domain augmentation.

use crate::augment::{self, AdaConfig};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalEntry, TrajectoryLog};
use crate::model::Model;
use crate::norms::{Mode, NormKind};
use crate::param::ParamSet;
use crate::rng;
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor4;
use crate::datagen::Dataset;
use rand::Rng;
use serde::{Deserialize, Serialize};

fn default_momentum() -> f32 {
    0.9
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_adam_eps() -> f32 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    SgdMomentum {
        lr: f32,
        #[serde(default = "default_momentum")]
        momentum: f32,
    },
    Adam {
        lr: f32,
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default = "default_adam_eps")]
        eps: f32,
    },
}

impl OptimizerKind {
    pub fn lr(&self) -> f32 {
        match self {
            OptimizerKind::SgdMomentum { lr, .. } | OptimizerKind::Adam { lr, .. } => *lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    /// Multiplier on the base learning rate after `t` of `total` steps.
    pub fn factor(self, t: u64, total: u64) -> f32 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let total = total.max(1);
                let t = t.min(total);
                0.5 * (1.0 + (std::f32::consts::PI * t as f32 / total as f32).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Append a metrics row every this many epochs; 0 = final row only.
    pub eval_cadence: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam {
                lr: 1e-3,
                beta1: default_beta1(),
                beta2: default_beta2(),
                eps: default_adam_eps(),
            },
            batch_size: 32,
            epochs: 10,
            schedule: LrSchedule::Constant,
            seed: 0,
            eval_cadence: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.optimizer.lr() <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let has_bn = matches!(model.config.norm.kind, NormKind::Bn | NormKind::BnTest);
        if has_bn && self.batch_size < 2 {
            return Err(Error::invalid("batch size must be >= 2 with batch normalization"));
        }
        Ok(())
    }
}

/// Momentum / Adam state, index-aligned with the parameter set.
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// Apply one update from the accumulated gradients, then zero them.
    /// `lr_scale` multiplies the base learning rate (for schedules).
    pub fn step(&mut self, params: &mut ParamSet, lr_scale: f32) -> Result<()> {
        if self.m.is_empty() {
            for p in params.iter() {
                let n = if p.trainable { p.value.len() } else { 0 };
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
        // Validate every gradient before touching any parameter so an abort
        // leaves the model in its last good state.
        for p in params.iter() {
            if !p.trainable {
                continue;
            }
            if let Some(bad) = p.grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::numeric(format!("non-finite gradient {bad} in {}", p.name)));
            }
        }
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            match self.kind {
                OptimizerKind::SgdMomentum { lr, momentum } => {
                    let buf = &mut self.m[i];
                    for ((w, g), m) in p.value.iter_mut().zip(&p.grad).zip(buf.iter_mut()) {
                        *m = momentum * *m + g;
                        *w -= lr * lr_scale * *m;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let t = (self.t + 1) as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let (mbuf, vbuf) = (&mut self.m[i], &mut self.v[i]);
                    for (((w, g), m), v) in
                        p.value.iter_mut().zip(&p.grad).zip(mbuf.iter_mut()).zip(vbuf.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *w -= lr * lr_scale * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        self.t += 1;
        for p in params.iter_mut() {
            for g in &mut p.grad {
                *g = 0.0;
            }
        }
        Ok(())
    }
}

/// One executed augmentation round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugRoundLog {
    pub round: u32,
    pub step: u64,
    pub dataset_size: usize,
}

pub struct TrainOutput {
    pub metrics: Vec<EvalEntry>,
    pub trajectory: TrajectoryLog,
    pub rounds: Vec<AugRoundLog>,
    pub steps: u64,
    pub final_loss: f32,
    /// Per-step training losses, in step order.
    pub step_losses: Vec<f32>,
}

fn gather_batch(images: &Tensor4, labels: &[u32], idx: &[usize]) -> (Tensor4, Vec<usize>) {
    let stride = images.c * images.h * images.w;
    let mut data = Vec::with_capacity(idx.len() * stride);
    let mut ys = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(&images.data[i * stride..(i + 1) * stride]);
        ys.push(labels[i] as usize);
    }
    (
        Tensor4 { n: idx.len(), c: images.c, h: images.h, w: images.w, data },
        ys,
    )
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, 0x5E00_0000 + epoch as u64);
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Supervised training on `data`, optionally interleaved with adversarial
/// augmentation rounds. Each round synthesizes one adversarial copy of the
/// full source set and appends it; originals are never replaced.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    ada: Option<&AdaConfig>,
) -> Result<TrainOutput> {
    cfg.validate(model)?;
    if let Some(a) = ada {
        a.validate()?;
    }
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }

    let n_source = data.len();
    let mut images = data.images.clone();
    let mut labels = data.labels.clone();

    let mut optimizer = Optimizer::new(cfg.optimizer);
    let planned_total =
        (cfg.epochs as u64) * ((n_source as u64 + cfg.batch_size as u64 - 1) / cfg.batch_size as u64);

    let mut trajectory = TrajectoryLog::new();
    evalkit::log_residual_weights(model, 0, &mut trajectory);

    let mut metrics = Vec::new();
    let mut rounds = Vec::new();
    let mut step: u64 = 0;
    let mut rounds_done: u32 = 0;
    let mut last_loss = f32::NAN;
    let mut step_losses = Vec::new();

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(labels.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let (bx, by) = gather_batch(&images, &labels, chunk);
            let mut tape = Tape::<f32>::new();
            let graph = model.forward_graph(&mut tape, &bx, Mode::Train, Default::default())?;
            let (loss, _) = tape.softmax_cross_entropy(graph.logits, &by, Reduction::Mean)?;
            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(Error::numeric(format!("loss diverged at step {step}")));
            }
            last_loss = loss_val;
            step_losses.push(loss_val);
            let grads = tape.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&graph.param_vars, &grads);
            optimizer.step(&mut model.params, cfg.schedule.factor(step, planned_total))?;
            model.apply_ema(&graph.ema);
            step += 1;

            if let Some(a) = ada {
                if rounds_done < a.aug_rounds as u32 && a.interval > 0 && step % a.interval as u64 == 0
                {
                    rounds_done += 1;
                    run_aug_round(model, data, a, rounds_done, &mut images, &mut labels)?;
                    rounds.push(AugRoundLog {
                        round: rounds_done,
                        step,
                        dataset_size: labels.len(),
                    });
                }
            }
        }
        evalkit::log_residual_weights(model, step, &mut trajectory);
        if cfg.eval_cadence > 0 && (epoch + 1) % cfg.eval_cadence == 0 && epoch + 1 < cfg.epochs {
            metrics.push(train_metrics_row(model, data, cfg.batch_size)?);
        }
    }
    if cfg.epochs > 0 {
        metrics.push(train_metrics_row(model, data, cfg.batch_size)?);
    }

    Ok(TrainOutput { metrics, trajectory, rounds, steps: step, final_loss: last_loss, step_losses })
}

fn run_aug_round(
    model: &Model,
    source: &Dataset,
    ada: &AdaConfig,
    round: u32,
    images: &mut Tensor4,
    labels: &mut Vec<u32>,
) -> Result<()> {
    let n = source.len();
    let batch = 64.min(n).max(1);
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (bx, _) = gather_batch(&source.images, &source.labels, &idx);
        let by: Vec<u32> = idx.iter().map(|&i| source.labels[i]).collect();
        let aug = augment::ada_maximize(model, &bx, &by, ada, round, start as u32)?;
        images.data.extend_from_slice(&aug.images.data);
        images.n += aug.images.n;
        labels.extend_from_slice(&aug.labels);
        start = end;
    }
    Ok(())
}

/// Accuracy/Brier on a deterministic subset of the source training data.
fn train_metrics_row(model: &Model, source: &Dataset, batch: usize) -> Result<EvalEntry> {
    let n = source.len().min(1000);
    let idx: Vec<usize> = (0..n).collect();
    let (bx, _) = gather_batch(&source.images, &source.labels, &idx);
    let by = &source.labels[..n];
    let (accuracy, brier) = evalkit::evaluate_model_on(model, &bx, by, batch)?;
    Ok(EvalEntry { domain: "train".into(), level: 0, n, accuracy, brier })
}
