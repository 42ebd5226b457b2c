//! Adversarial domain augmentation: the maximization phase synthesizes
//! loss-maximizing images under a semantic-distance penalty measured in the
//! model's intermediate feature space, and the alternating schedule lives
//! in the trainer.

use crate::error::{Error, Result};
use crate::model::{Model, TapWants};
use crate::norms::Mode;
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor4;
use crate::trainer::{self, TrainConfig, TrainOutput};
use crate::datagen::Dataset;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

static WORKERS: AtomicUsize = AtomicUsize::new(1);

/// Cap on parallel maximization workers. Chunks are merged in sample-index
/// order, so results are identical for any worker count.
pub fn set_workers(n: usize) {
    WORKERS.store(n.max(1), Ordering::Relaxed);
}

pub fn workers() -> usize {
    WORKERS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaConfig {
    /// Weight of the semantic-distance penalty in the ascent objective.
    pub eta: f32,
    /// Gradient ascent step size, in pixel units.
    pub step_size: f32,
    /// Gradient updates per augmentation round.
    pub inner_steps: usize,
    /// Total augmentation rounds.
    pub aug_rounds: usize,
    /// Optimizer steps between rounds.
    pub interval: usize,
    pub clip_min: f32,
    pub clip_max: f32,
}

impl Default for AdaConfig {
    fn default() -> Self {
        AdaConfig {
            eta: 1.0,
            step_size: 1.0,
            inner_steps: 25,
            aug_rounds: 3,
            interval: 1000,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }
}

impl AdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 {
            return Err(Error::invalid("eta must be non-negative"));
        }
        if self.step_size < 0.0 || !self.step_size.is_finite() {
            return Err(Error::invalid("ascent step size must be finite and non-negative"));
        }
        if self.clip_min >= self.clip_max {
            return Err(Error::invalid("empty pixel clip range"));
        }
        if self.aug_rounds > 0 && self.interval == 0 {
            return Err(Error::invalid("augmentation interval must be positive"));
        }
        Ok(())
    }
}

/// Synthesized images with their (unchanged) labels and origin.
#[derive(Debug, Clone)]
pub struct AugmentedSet {
    pub images: Tensor4,
    pub labels: Vec<u32>,
    /// (round, source index) per synthesized sample.
    pub provenance: Vec<(u32, u32)>,
}

/// Squared-distance semantic cost between feature vectors. The infinite
/// label-flip penalty is structural: mismatched labels are a programming
/// error here, never a float infinity.
pub fn semantic_cost(z: &[f32], z_src: &[f32], y: u32, y_src: u32) -> Result<f32> {
    if z.len() != z_src.len() {
        return Err(Error::shape("semantic_cost: feature length mismatch"));
    }
    if y != y_src {
        return Err(Error::invalid("semantic_cost: labels differ inside the ascent"));
    }
    Ok(0.5 * z.iter().zip(z_src).map(|(a, b)| (a - b) * (a - b)).sum::<f32>())
}

/// Run `inner_steps` of clipped gradient ascent on a chunk of samples.
/// Statistics stay in eval mode so batch composition cannot leak in and no
/// EMA state is touched.
fn maximize_chunk(
    model: &Model,
    images: &Tensor4,
    labels_usize: &[usize],
    cfg: &AdaConfig,
) -> Result<(Tensor4, Vec<bool>)> {
    let n = images.n;
    let half = 0.5 * cfg.eta;

    let (_, z_src) = model.forward_eval(images, true)?;
    let z_src = z_src.ok_or_else(|| {
        Error::invalid("adversarial augmentation needs a feature tap (a hidden fc layer)")
    })?;

    let mut x = images.clone();
    let mut aborted = vec![false; n];
    let stride = x.c * x.h * x.w;

    for _ in 0..cfg.inner_steps {
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf4(&x);
        let out = model.forward_from_var(
            &mut tape,
            xv,
            Mode::Eval,
            TapWants { features: true, stat_taps: false },
        )?;
        // Sum reduction keeps per-sample objectives independent, so the
        // gradient w.r.t. each image is exactly its own ascent direction.
        let (loss, _) = tape.softmax_cross_entropy(out.logits, labels_usize, Reduction::Sum)?;
        let feats = out.features.expect("features requested");
        let z0 = tape.leaf_from_f32(&[z_src.rows, z_src.cols], &z_src.data)?;
        let diff = tape.sub(feats, z0)?;
        let sq = tape.mul(diff, diff)?;
        let dist = tape.sum_all(sq);
        let penalty = tape.affine(dist, half, 0.0);
        let objective = tape.sub(loss, penalty)?;

        let grads = tape.backward_wrt(objective, &[xv])?;
        let g = match grads.wrt(xv) {
            Some(g) => g,
            None => break,
        };
        for i in 0..n {
            if aborted[i] {
                continue;
            }
            let gi = &g[i * stride..(i + 1) * stride];
            if gi.iter().any(|v| !v.is_finite()) {
                eprintln!("warning: non-finite ascent gradient, keeping original sample {i}");
                aborted[i] = true;
                x.data[i * stride..(i + 1) * stride]
                    .copy_from_slice(&images.data[i * stride..(i + 1) * stride]);
                continue;
            }
            for (xi, &gv) in x.data[i * stride..(i + 1) * stride].iter_mut().zip(gi) {
                *xi = (*xi + cfg.step_size * gv).clamp(cfg.clip_min, cfg.clip_max);
            }
        }
    }
    Ok((x, aborted))
}

/// Maximization phase: one clipped ascent per image against the current
/// model, keeping labels and model parameters untouched.
pub fn ada_maximize(
    model: &Model,
    images: &Tensor4,
    labels: &[u32],
    cfg: &AdaConfig,
    round: u32,
    index_base: u32,
) -> Result<AugmentedSet> {
    cfg.validate()?;
    if images.n != labels.len() {
        return Err(Error::shape(format!("{} labels for {} images", labels.len(), images.n)));
    }
    if images.n == 0 {
        return Err(Error::invalid("empty augmentation batch"));
    }
    let lo = cfg.clip_min - 1e-6;
    let hi = cfg.clip_max + 1e-6;
    if images.data.iter().any(|&v| v < lo || v > hi) {
        return Err(Error::invalid("augmentation input has pixels outside the clip range"));
    }
    let labels_usize: Vec<usize> = labels.iter().map(|&y| y as usize).collect();

    let nworkers = workers().min(images.n);
    let out = if nworkers <= 1 {
        maximize_chunk(model, images, &labels_usize, cfg)?.0
    } else {
        let per = images.n.div_ceil(nworkers);
        let chunks: Vec<(usize, usize)> = (0..nworkers)
            .map(|w| (w * per, ((w + 1) * per).min(images.n)))
            .filter(|(a, b)| a < b)
            .collect();
        let results: Vec<Result<(Tensor4, Vec<bool>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|&(a, b)| {
                    let sub_labels = &labels_usize[a..b];
                    let sub = Tensor4 {
                        n: b - a,
                        c: images.c,
                        h: images.h,
                        w: images.w,
                        data: images.data[a * images.c * images.h * images.w
                            ..b * images.c * images.h * images.w]
                            .to_vec(),
                    };
                    scope.spawn(move || maximize_chunk(model, &sub, sub_labels, cfg))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut parts = Vec::with_capacity(results.len());
        for r in results {
            parts.push(r?.0);
        }
        Tensor4::concat_samples(&parts)?
    };

    let provenance = (0..images.n as u32).map(|i| (round, index_base + i)).collect();
    Ok(AugmentedSet { images: out, labels: labels.to_vec(), provenance })
}

/// Alternating min-max training: delegates to the shared loop with the
/// augmentation schedule enabled.
pub fn ada_train(
    model: &mut Model,
    source: &Dataset,
    ada: &AdaConfig,
    train: &TrainConfig,
) -> Result<TrainOutput> {
    trainer::train(model, source, train, Some(ada))
}
