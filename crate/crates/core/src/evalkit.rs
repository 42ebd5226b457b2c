//! Metrics and diagnostics: accuracy, Brier score, per-domain evaluation
//! grids, residual-weight trajectories, and learned-statistics export.
//! CSV layouts are frozen so repeated runs diff byte-for-byte.

use crate::datagen::{self, CorruptionType, Dataset, DomainSpec};
use crate::error::{Error, Result};
use crate::model::{Model, TapWants};
use crate::norms::Mode;
use crate::tape::Tape;
use crate::tensor::{Matrix, Tensor4};
use std::fmt::Write as _;

/// Row-wise stabilized softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let dst = &mut out.data[r * logits.cols..(r + 1) * logits.cols];
        let mut z = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mx).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

/// Fraction of rows whose argmax matches the label; ties break toward the
/// lowest class index.
pub fn accuracy(logits: &Matrix, labels: &[u32]) -> Result<f32> {
    if logits.rows == 0 {
        return Err(Error::invalid("accuracy of an empty batch"));
    }
    if logits.rows != labels.len() {
        return Err(Error::shape(format!("{} labels for {} rows", labels.len(), logits.rows)));
    }
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best == y as usize {
            correct += 1;
        }
    }
    Ok(correct as f32 / logits.rows as f32)
}

/// Brier score of one predictive distribution: squared distance to the
/// one-hot target divided by the class count. Bounded in [0, 2/K].
pub fn brier_row(probs: &[f32], label: usize) -> Result<f32> {
    let k = probs.len();
    if label >= k {
        return Err(Error::invalid(format!("label {label} out of range for {k} classes")));
    }
    let sum: f32 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-4 || probs.iter().any(|&p| !(-1e-6..=1.0 + 1e-6).contains(&p)) {
        return Err(Error::invalid("probabilities are not a simplex"));
    }
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        let target = if j == label { 1.0 } else { 0.0 };
        acc += (target - p) * (target - p);
    }
    Ok(acc / k as f32)
}

/// Mean Brier score over a batch.
pub fn brier(probs: &Matrix, labels: &[u32]) -> Result<f32> {
    if probs.rows == 0 {
        return Err(Error::invalid("brier of an empty batch"));
    }
    if probs.rows != labels.len() {
        return Err(Error::shape(format!("{} labels for {} rows", labels.len(), probs.rows)));
    }
    let mut total = 0.0f64;
    for (r, &y) in labels.iter().enumerate() {
        total += brier_row(probs.row(r), y as usize)? as f64;
    }
    Ok((total / probs.rows as f64) as f32)
}

/// Accuracy and mean Brier of a model over plain tensors, evaluated in
/// fixed-size batches. Per-sample norms make the result batch-size
/// invariant; reductions run in index order for determinism.
pub fn evaluate_model_on(
    model: &Model,
    images: &Tensor4,
    labels: &[u32],
    batch: usize,
) -> Result<(f32, f32)> {
    if images.n == 0 {
        return Err(Error::invalid("evaluation on an empty set"));
    }
    if images.n != labels.len() {
        return Err(Error::shape(format!("{} labels for {} images", labels.len(), images.n)));
    }
    let batch = batch.max(1);
    let mut correct = 0usize;
    let mut brier_total = 0.0f64;
    let stride = images.c * images.h * images.w;
    let mut start = 0;
    while start < images.n {
        let end = (start + batch).min(images.n);
        let chunk = Tensor4 {
            n: end - start,
            c: images.c,
            h: images.h,
            w: images.w,
            data: images.data[start * stride..end * stride].to_vec(),
        };
        let (logits, _) = model.forward_eval(&chunk, false)?;
        let probs = softmax_rows(&logits);
        for (r, &y) in labels[start..end].iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            if best == y as usize {
                correct += 1;
            }
            brier_total += brier_row(probs.row(r), y as usize)? as f64;
        }
        start = end;
    }
    Ok((correct as f32 / images.n as f32, (brier_total / images.n as f64) as f32))
}

// ---------------------------------------------------------------------
// Evaluation grids
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub domain: String,
    pub level: u32,
    pub n: usize,
    pub accuracy: f32,
    pub brier: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub run_id: String,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    /// metrics.csv bytes: `run_id,domain,level,n,accuracy,brier`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run_id,domain,level,n,accuracy,brier\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6}",
                self.run_id, e.domain, e.level, e.n, e.accuracy, e.brier
            );
        }
        s
    }

    /// Mean (accuracy, brier) over entries at a corruption level.
    pub fn level_average(&self, level: u32) -> Option<(f32, f32)> {
        let rows: Vec<&EvalEntry> =
            self.entries.iter().filter(|e| e.level == level && e.domain != "source").collect();
        if rows.is_empty() {
            return None;
        }
        let acc = rows.iter().map(|e| e.accuracy as f64).sum::<f64>() / rows.len() as f64;
        let br = rows.iter().map(|e| e.brier as f64).sum::<f64>() / rows.len() as f64;
        Some((acc as f32, br as f32))
    }

    /// Arithmetic mean over all entries.
    pub fn overall_average(&self) -> (f32, f32) {
        let n = self.entries.len().max(1);
        let acc = self.entries.iter().map(|e| e.accuracy as f64).sum::<f64>() / n as f64;
        let br = self.entries.iter().map(|e| e.brier as f64).sum::<f64>() / n as f64;
        (acc as f32, br as f32)
    }
}

#[derive(Debug, Clone)]
pub struct GridConfig {
    pub specs: Vec<DomainSpec>,
    /// Images generated per domain.
    pub n: usize,
    pub classes: usize,
    pub batch: usize,
}

/// The standard grid: the source domain plus every corruption type at
/// every level, all derived from one seed.
pub fn full_grid(seed: u64) -> Vec<DomainSpec> {
    let mut specs = vec![DomainSpec::source(seed)];
    for ctype in CorruptionType::ALL {
        for level in 1..=5u8 {
            specs.push(DomainSpec::corruption(ctype, level, seed).expect("level in range"));
        }
    }
    specs
}

/// Evaluate the model on every domain in the grid. Deterministic given the
/// grid seeds.
pub fn evaluate_grid(model: &Model, grid: &GridConfig, run_id: &str) -> Result<EvalReport> {
    let mut entries = Vec::with_capacity(grid.specs.len());
    for spec in &grid.specs {
        let ds = datagen::realize(spec, grid.n, grid.classes)?;
        let (accuracy, brier) = evaluate_model_on(model, &ds.images, &ds.labels, grid.batch)?;
        entries.push(EvalEntry {
            domain: spec.domain_name(),
            level: spec.level() as u32,
            n: ds.len(),
            accuracy,
            brier,
        });
    }
    Ok(EvalReport { run_id: run_id.to_string(), entries })
}

// ---------------------------------------------------------------------
// Residual-weight trajectories
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: u64,
    pub layer: usize,
    pub lambda_mu: f32,
    pub lambda_sigma: f32,
    pub lambda_beta: Option<f32>,
    pub lambda_gamma: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// trajectory.csv bytes:
    /// `step,layer,lambda_mu,lambda_sigma,lambda_beta,lambda_gamma`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,layer,lambda_mu,lambda_sigma,lambda_beta,lambda_gamma\n");
        let opt = |v: Option<f32>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{},{}",
                r.step,
                r.layer,
                r.lambda_mu,
                r.lambda_sigma,
                opt(r.lambda_beta),
                opt(r.lambda_gamma)
            );
        }
        s
    }
}

/// Record the sigmoid of every residual logit of every adaptive norm layer.
/// On models without one this is a warning no-op.
pub fn log_residual_weights(model: &Model, step: u64, log: &mut TrajectoryLog) {
    let lambdas = model.asr_lambdas();
    if lambdas.is_empty() {
        eprintln!("warning: residual-weight logging skipped (model has no adaptive norm layers)");
        return;
    }
    for l in lambdas {
        log.rows.push(TrajectoryRow {
            step,
            layer: l.layer,
            lambda_mu: l.lambda_mu,
            lambda_sigma: l.lambda_sigma,
            lambda_beta: l.lambda_beta,
            lambda_gamma: l.lambda_gamma,
        });
    }
}

// ---------------------------------------------------------------------
// Learned-statistics export
// ---------------------------------------------------------------------

/// CSV of the blended standardization statistics at one adaptive norm
/// layer, one row per sample: domain tag, label, then C mu values and C
/// sigma values.
pub fn dump_learned_stats(model: &Model, ds: &Dataset, layer: usize) -> Result<String> {
    if !model.has_asr() {
        return Err(Error::invalid("stats dump requires a model with adaptive norm layers"));
    }
    let c = model
        .norm_channels(layer)
        .ok_or_else(|| Error::invalid(format!("no norm layer {layer}")))?;

    let mut csv = String::from("domain,label");
    for i in 0..c {
        let _ = write!(csv, ",mu_stan_{i}");
    }
    for i in 0..c {
        let _ = write!(csv, ",sigma_stan_{i}");
    }
    csv.push('\n');

    let stride = ds.images.c * ds.images.h * ds.images.w;
    let batch = 64usize;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch).min(ds.len());
        let chunk = Tensor4 {
            n: end - start,
            c: ds.images.c,
            h: ds.images.h,
            w: ds.images.w,
            data: ds.images.data[start * stride..end * stride].to_vec(),
        };
        let mut tape = Tape::<f32>::new();
        let out = model.forward_graph(
            &mut tape,
            &chunk,
            Mode::Eval,
            TapWants { features: false, stat_taps: true },
        )?;
        let &(mu_var, sigma_var) = out
            .stat_taps
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} is not an adaptive norm layer")))?;
        let mu = tape.value(mu_var);
        let sigma = tape.value(sigma_var);
        for r in 0..end - start {
            let _ = write!(csv, "{},{}", ds.manifest.domain, ds.labels[start + r]);
            for j in 0..c {
                let _ = write!(csv, ",{:.6}", mu[r * c + j]);
            }
            for j in 0..c {
                let _ = write!(csv, ",{:.6}", sigma[r * c + j]);
            }
            csv.push('\n');
        }
        start = end;
    }
    Ok(csv)
}
