//! The normalization family: batch norm (EMA and test-batch variants),
//! grouped norms covering instance/layer/group normalization, switchable
//! normalization, and the adaptive standardization/rescaling layer whose
//! statistics come from bottleneck encoder-decoder networks blended with
//! the raw channel statistics through learnable residual weights.
//!
//! Every forward here is a graph builder over [`Tape`], so all layers are
//! differentiable in both 32-bit (training) and 64-bit (gradient checking)
//! modes. Standalone `*_forward` wrappers run a layer on plain tensors.

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, Tensor4};
use rand::Rng;

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.9;
pub const DEFAULT_GROUPS: usize = 8;
/// Residual-weight logit init: the blend starts almost entirely on the raw
/// statistics, sigmoid(-3) of the way toward the learned ones.
pub const INIT_RHO_STAN: f32 = -3.0;
/// Pretrain-variant rescale logit init, sigmoid(-5) of the learned term.
pub const INIT_RHO_RESCALE: f32 = -5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------
// Channel statistics
// ---------------------------------------------------------------------

/// Per-sample, per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

/// Differentiable per-sample channel statistics: both outputs are (N,C).
pub fn channel_stats_graph<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<(Var, Var)> {
    let c = tape.shape(x)[1];
    group_stats_graph(tape, x, c)
}

/// Per-sample statistics over groups of C/G channels: outputs are (N,G).
pub fn group_stats_graph<S: Scalar>(tape: &mut Tape<S>, x: Var, groups: usize) -> Result<(Var, Var)> {
    let mu = tape.group_mean(x, groups)?;
    let centered = tape.sub_group(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.group_mean(sq, groups)?;
    let sigma = tape.sqrt(var);
    Ok((mu, sigma))
}

/// Channel statistics of a plain tensor, one entry per sample.
pub fn channel_stats(x: &Tensor4) -> Result<Vec<ChannelStats>> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(x);
    let (mu, sigma) = channel_stats_graph(&mut tape, xv)?;
    let mus = tape.value(mu);
    let sigmas = tape.value(sigma);
    Ok((0..x.n)
        .map(|i| ChannelStats {
            mu: mus[i * x.c..(i + 1) * x.c].to_vec(),
            sigma: sigmas[i * x.c..(i + 1) * x.c].to_vec(),
        })
        .collect())
}

// ---------------------------------------------------------------------
// Standardize + rescale (the shared two-step form)
// ---------------------------------------------------------------------

/// x_norm = ((x - mu) / (sigma + eps)) * gamma + beta with (N,G)-shaped
/// statistics broadcast over channel groups.
pub fn standardize_rescale_graph<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    mu: Var,
    sigma: Var,
    gamma: Var,
    beta: Var,
    eps: f32,
) -> Result<Var> {
    let centered = tape.sub_group(x, mu)?;
    let x_stan = tape.div_group_eps(centered, sigma, S::from_f32(eps))?;
    let scaled = tape.mul_group(x_stan, gamma)?;
    tape.add_group(scaled, beta)
}

/// Standardize and rescale by fixed per-channel vectors.
pub fn standardize_rescale(
    x: &Tensor4,
    mu_stan: &[f32],
    sigma_stan: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<Tensor4> {
    for (name, v) in [("mu_stan", mu_stan), ("sigma_stan", sigma_stan), ("gamma", gamma), ("beta", beta)]
    {
        if v.len() != x.c {
            return Err(Error::shape(format!(
                "standardize_rescale: {name} has length {} for {} channels",
                v.len(),
                x.c
            )));
        }
    }
    if let Some(bad) = sigma_stan.iter().find(|&&s| s < 0.0) {
        return Err(Error::invalid(format!("standardize_rescale: negative sigma_stan {bad}")));
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(x);
    let mk = |tape: &mut Tape<f32>, v: &[f32]| -> Result<Var> {
        let leaf = tape.leaf_from_f32(&[x.c], v)?;
        tape.tile_batch(leaf, x.n)
    };
    let mu = mk(&mut tape, mu_stan)?;
    let sigma = mk(&mut tape, sigma_stan)?;
    let g = mk(&mut tape, gamma)?;
    let b = mk(&mut tape, beta)?;
    let y = standardize_rescale_graph(&mut tape, xv, mu, sigma, g, b, eps)?;
    tape.read4(y)
}

// ---------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BnState {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mu: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BnState {
    pub fn new(c: usize, momentum: f32, eps: f32) -> Self {
        BnState {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mu: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum,
            eps,
        }
    }

    /// running <- m * running + (1 - m) * batch
    pub fn ema_update(&mut self, batch_mu: &[f32], batch_var: &[f32]) {
        let m = self.momentum;
        for (r, &b) in self.running_mu.iter_mut().zip(batch_mu) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

pub struct BnVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Outcome of a batch-norm graph: the output plus, when batch statistics
/// were used, their values for the EMA update (mean, population variance).
pub struct BnGraphOut {
    pub y: Var,
    pub batch_stats: Option<(Vec<f32>, Vec<f32>)>,
}

/// Differentiable batch statistics over (N,H,W), shared by the combined
/// train path and the switchable norm's batch constituent. Returns
/// per-channel mean/sigma tiled to (N,C) plus the raw f32 stats.
fn batch_stats_graph<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
) -> Result<(Var, Var, Vec<f32>, Vec<f32>)> {
    let n = tape.shape(x)[0];
    let mu_c = tape.batch_channel_mean(x)?;
    let mu_nc = tape.tile_batch(mu_c, n)?;
    let centered = tape.sub_group(x, mu_nc)?;
    let sq = tape.mul(centered, centered)?;
    let var_c = tape.batch_channel_mean(sq)?;
    let sigma_c = tape.sqrt(var_c);
    let sigma_nc = tape.tile_batch(sigma_c, n)?;
    let mu_vals: Vec<f32> = tape.value(mu_c).iter().map(|v| v.to_f64() as f32).collect();
    let var_vals: Vec<f32> = tape.value(var_c).iter().map(|v| v.to_f64() as f32).collect();
    Ok((mu_nc, sigma_nc, mu_vals, var_vals))
}

/// Batch-norm graph. `use_batch_stats` selects the train/test-batch path
/// (requires N >= 2); otherwise the stored running statistics are used.
pub fn bn_graph<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    vars: &BnVars,
    running_mu: &[f32],
    running_var: &[f32],
    eps: f32,
    use_batch_stats: bool,
) -> Result<BnGraphOut> {
    let n = tape.shape(x)[0];
    let gamma_nc = tape.tile_batch(vars.gamma, n)?;
    let beta_nc = tape.tile_batch(vars.beta, n)?;
    if use_batch_stats {
        if n < 2 {
            return Err(Error::invalid(
                "batch statistics need N >= 2 (variance is degenerate for a single sample)",
            ));
        }
        let (mu_nc, sigma_nc, mu_vals, var_vals) = batch_stats_graph(tape, x)?;
        let y = standardize_rescale_graph(tape, x, mu_nc, sigma_nc, gamma_nc, beta_nc, eps)?;
        Ok(BnGraphOut { y, batch_stats: Some((mu_vals, var_vals)) })
    } else {
        let sigma_run: Vec<f32> = running_var.iter().map(|v| v.sqrt()).collect();
        let mu_leaf = tape.leaf_from_f32(&[running_mu.len()], running_mu)?;
        let sigma_leaf = tape.leaf_from_f32(&[sigma_run.len()], &sigma_run)?;
        let mu_nc = tape.tile_batch(mu_leaf, n)?;
        let sigma_nc = tape.tile_batch(sigma_leaf, n)?;
        let y = standardize_rescale_graph(tape, x, mu_nc, sigma_nc, gamma_nc, beta_nc, eps)?;
        Ok(BnGraphOut { y, batch_stats: None })
    }
}

/// Standalone batch-norm forward. Train mode standardizes by batch
/// statistics and then applies the EMA update; eval mode uses the stored
/// running statistics.
pub fn bn_forward(x: &Tensor4, state: &mut BnState, mode: Mode) -> Result<Tensor4> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(x);
    let gamma = tape.leaf_from_f32(&[x.c], &state.gamma)?;
    let beta = tape.leaf_from_f32(&[x.c], &state.beta)?;
    let vars = BnVars { gamma, beta };
    let out = bn_graph(
        &mut tape,
        xv,
        &vars,
        &state.running_mu,
        &state.running_var,
        state.eps,
        mode == Mode::Train,
    )?;
    if let Some((mu, var)) = out.batch_stats {
        state.ema_update(&mu, &var);
    }
    tape.read4(out.y)
}

/// Batch norm with test-batch statistics: the train-mode formula with no
/// EMA update.
pub fn bn_test_forward(x: &Tensor4, state: &BnState) -> Result<Tensor4> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(x);
    let gamma = tape.leaf_from_f32(&[x.c], &state.gamma)?;
    let beta = tape.leaf_from_f32(&[x.c], &state.beta)?;
    let vars = BnVars { gamma, beta };
    let out = bn_graph(&mut tape, xv, &vars, &state.running_mu, &state.running_var, state.eps, true)?;
    tape.read4(out.y)
}

// ---------------------------------------------------------------------
// Grouped norms (instance / layer / group)
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GroupState {
    /// G = C gives instance norm, G = 1 layer norm.
    pub groups: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl GroupState {
    pub fn new(c: usize, groups: usize, eps: f32) -> Result<Self> {
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!("{groups} groups do not divide {c} channels")));
        }
        Ok(GroupState { groups, gamma: vec![1.0; c], beta: vec![0.0; c], eps })
    }
}

pub struct GroupVars {
    pub gamma: Var,
    pub beta: Var,
}

pub fn group_graph<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    vars: &GroupVars,
    groups: usize,
    eps: f32,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    let c = tape.shape(x)[1];
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(format!("{groups} groups do not divide {c} channels")));
    }
    let (mu, sigma) = group_stats_graph(tape, x, groups)?;
    let gamma_nc = tape.tile_batch(vars.gamma, n)?;
    let beta_nc = tape.tile_batch(vars.beta, n)?;
    // Standardize over groups, rescale per channel.
    let centered = tape.sub_group(x, mu)?;
    let x_stan = tape.div_group_eps(centered, sigma, S::from_f32(eps))?;
    let scaled = tape.mul_group(x_stan, gamma_nc)?;
    tape.add_group(scaled, beta_nc)
}

/// Per-sample, per-group standardization followed by per-channel rescaling.
pub fn group_forward(x: &Tensor4, state: &GroupState) -> Result<Tensor4> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(x);
    let gamma = tape.leaf_from_f32(&[x.c], &state.gamma)?;
    let beta = tape.leaf_from_f32(&[x.c], &state.beta)?;
    let vars = GroupVars { gamma, beta };
    let y = group_graph(&mut tape, xv, &vars, state.groups, state.eps)?;
    tape.read4(y)
}

// ---------------------------------------------------------------------
// Switchable normalization
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SnState {
    /// Combination logits for the mean statistics, ordered (batch, instance, layer).
    pub logits_mu: Vec<f32>,
    /// Combination logits for the deviation statistics, same order.
    pub logits_sigma: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl SnState {
    pub fn new(c: usize, eps: f32) -> Self {
        SnState {
            logits_mu: vec![0.0; 3],
            logits_sigma: vec![0.0; 3],
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            eps,
        }
    }
}

pub struct SnVars {
    pub logits_mu: Var,
    pub logits_sigma: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Statistics are softmax-weighted sums of the batch/instance/layer
/// constituents; with `include_bn` off the batch logit is masked out before
/// the softmax and the batch constituent is never built, keeping the layer
/// per-sample independent.
pub fn sn_graph<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    vars: &SnVars,
    eps: f32,
    include_bn: bool,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    let c = tape.shape(x)[1];
    let mask = [include_bn, true, true];
    let w_mu = tape.softmax_masked(vars.logits_mu, &mask)?;
    let w_sigma = tape.softmax_masked(vars.logits_sigma, &mask)?;

    // Constituent statistics, all shaped (N,C).
    let (mu_in, sigma_in) = channel_stats_graph(tape, x)?;
    let (mu_ln_g, sigma_ln_g) = group_stats_graph(tape, x, 1)?;
    let mu_ln = tape.expand_cols(mu_ln_g, c)?;
    let sigma_ln = tape.expand_cols(sigma_ln_g, c)?;

    let mut mu_terms: Vec<(usize, Var)> = vec![(1, mu_in), (2, mu_ln)];
    let mut sigma_terms: Vec<(usize, Var)> = vec![(1, sigma_in), (2, sigma_ln)];
    if include_bn {
        if n < 2 {
            return Err(Error::invalid("switchable norm with batch constituent needs N >= 2"));
        }
        let (mu_bn, sigma_bn, _, _) = batch_stats_graph(tape, x)?;
        mu_terms.insert(0, (0, mu_bn));
        sigma_terms.insert(0, (0, sigma_bn));
    }

    let weighted_sum = |tape: &mut Tape<S>, weights: Var, terms: &[(usize, Var)]| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(i, term) in terms {
            let wi = tape.index(weights, i)?;
            let scaled = tape.scale_by(term, wi)?;
            acc = Some(match acc {
                None => scaled,
                Some(prev) => tape.add(prev, scaled)?,
            });
        }
        Ok(acc.expect("at least one constituent"))
    };
    let mu = weighted_sum(tape, w_mu, &mu_terms)?;
    let sigma = weighted_sum(tape, w_sigma, &sigma_terms)?;

    let gamma_nc = tape.tile_batch(vars.gamma, n)?;
    let beta_nc = tape.tile_batch(vars.beta, n)?;
    standardize_rescale_graph(tape, x, mu, sigma, gamma_nc, beta_nc, eps)
}

pub fn sn_forward(x: &Tensor4, state: &SnState, include_bn: bool) -> Result<Tensor4> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(x);
    let vars = SnVars {
        logits_mu: tape.leaf_from_f32(&[3], &state.logits_mu)?,
        logits_sigma: tape.leaf_from_f32(&[3], &state.logits_sigma)?,
        gamma: tape.leaf_from_f32(&[x.c], &state.gamma)?,
        beta: tape.leaf_from_f32(&[x.c], &state.beta)?,
    };
    let y = sn_graph(&mut tape, xv, &vars, state.eps, include_bn)?;
    tape.read4(y)
}

// ---------------------------------------------------------------------
// Adaptive standardization and rescaling
// ---------------------------------------------------------------------

/// Weights and bias of one fully-connected layer, stored (dout, din).
#[derive(Debug, Clone)]
pub struct FcPair {
    pub dout: usize,
    pub din: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl FcPair {
    fn xavier(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (din + dout) as f32).sqrt();
        let w = (0..dout * din).map(|_| rng.random::<f32>() * 2.0 * limit - limit).collect();
        FcPair { dout, din, w, b: vec![0.0; dout] }
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        FcPair { dout, din, w: vec![0.0; dout * din], b: vec![0.0; dout] }
    }
}

/// State of one adaptive standardization/rescaling layer.
///
/// The standardization encoder is shared between the mean and deviation
/// paths, and the rescaling encoder between the shift and scale paths.
#[derive(Debug, Clone)]
pub struct AsrState {
    pub c: usize,
    pub c_stan: usize,
    pub c_rescale: usize,
    pub stan_enc: FcPair,
    pub mu_dec: FcPair,
    pub sigma_dec: FcPair,
    /// Residual-blend logits; the blend weights are their sigmoids.
    pub rho_mu: f32,
    pub rho_sigma: f32,
    pub rescale_enc: FcPair,
    pub beta_dec: FcPair,
    pub gamma_dec: FcPair,
    pub gamma_bias: Vec<f32>,
    pub beta_bias: Vec<f32>,
    /// Rescale-blend logits, only active in the pretrain variant.
    pub rho_beta: f32,
    pub rho_gamma: f32,
    pub pretrain_variant: bool,
    pub eps: f32,
}

impl AsrState {
    pub fn init(
        c: usize,
        c_stan: usize,
        c_rescale: usize,
        pretrain_variant: bool,
        eps: f32,
        seed: u64,
    ) -> Result<Self> {
        if c < 2 {
            return Err(Error::invalid("adaptive norm needs C >= 2 for a nonempty bottleneck"));
        }
        if c_stan == 0 || c_stan >= c || c_rescale == 0 || c_rescale >= c {
            return Err(Error::invalid(format!(
                "bottleneck widths must sit strictly inside (0, {c}); got stan {c_stan}, rescale {c_rescale}"
            )));
        }
        let mut r = rng::stream(seed, 0x4153);
        Ok(AsrState {
            c,
            c_stan,
            c_rescale,
            stan_enc: FcPair::xavier(c, c_stan, &mut r),
            mu_dec: FcPair::xavier(c_stan, c, &mut r),
            sigma_dec: FcPair::xavier(c_stan, c, &mut r),
            rho_mu: INIT_RHO_STAN,
            rho_sigma: INIT_RHO_STAN,
            rescale_enc: FcPair::xavier(c, c_rescale, &mut r),
            beta_dec: FcPair::xavier(c_rescale, c, &mut r),
            gamma_dec: FcPair::xavier(c_rescale, c, &mut r),
            gamma_bias: vec![1.0; c],
            beta_bias: vec![0.0; c],
            rho_beta: INIT_RHO_RESCALE,
            rho_gamma: INIT_RHO_RESCALE,
            pretrain_variant,
            eps,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FcVars {
    pub w: Var,
    pub b: Var,
}

pub struct AsrVars {
    pub stan_enc: FcVars,
    pub mu_dec: FcVars,
    pub sigma_dec: FcVars,
    pub rho_mu: Var,
    pub rho_sigma: Var,
    pub rescale_enc: FcVars,
    pub beta_dec: FcVars,
    pub gamma_dec: FcVars,
    pub gamma_bias: Var,
    pub beta_bias: Var,
    pub rho_beta: Option<Var>,
    pub rho_gamma: Option<Var>,
}

impl AsrState {
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>) -> Result<AsrVars> {
        let fc = |tape: &mut Tape<S>, p: &FcPair| -> Result<FcVars> {
            Ok(FcVars {
                w: tape.leaf_from_f32(&[p.dout, p.din], &p.w)?,
                b: tape.leaf_from_f32(&[p.dout], &p.b)?,
            })
        };
        Ok(AsrVars {
            stan_enc: fc(tape, &self.stan_enc)?,
            mu_dec: fc(tape, &self.mu_dec)?,
            sigma_dec: fc(tape, &self.sigma_dec)?,
            rho_mu: tape.leaf_scalar(S::from_f32(self.rho_mu)),
            rho_sigma: tape.leaf_scalar(S::from_f32(self.rho_sigma)),
            rescale_enc: fc(tape, &self.rescale_enc)?,
            beta_dec: fc(tape, &self.beta_dec)?,
            gamma_dec: fc(tape, &self.gamma_dec)?,
            gamma_bias: tape.leaf_from_f32(&[self.c], &self.gamma_bias)?,
            beta_bias: tape.leaf_from_f32(&[self.c], &self.beta_bias)?,
            rho_beta: if self.pretrain_variant {
                Some(tape.leaf_scalar(S::from_f32(self.rho_beta)))
            } else {
                None
            },
            rho_gamma: if self.pretrain_variant {
                Some(tape.leaf_scalar(S::from_f32(self.rho_gamma)))
            } else {
                None
            },
        })
    }
}

/// Outputs of the adaptive standardization step.
pub struct AsOut {
    pub x_stan: Var,
    pub mu_stan: Var,
    pub sigma_stan: Var,
    /// Raw channel statistics of the input, fed onward to the rescaling nets.
    pub mu: Var,
    pub sigma: Var,
}

/// lambda * a + (1 - lambda) * b with a scalar lambda node.
fn residual_blend<S: Scalar>(tape: &mut Tape<S>, lambda: Var, a: Var, b: Var) -> Result<Var> {
    let one_minus = tape.affine(lambda, -S::ONE, S::ONE);
    let wa = tape.scale_by(a, lambda)?;
    let wb = tape.scale_by(b, one_minus)?;
    tape.add(wa, wb)
}

/// Adaptive standardization: learned statistics from bottleneck networks
/// over the channel statistics, blended with the raw statistics by the
/// sigmoid residual weights. Entirely per-sample.
pub fn as_graph<S: Scalar>(tape: &mut Tape<S>, x: Var, vars: &AsrVars, eps: f32) -> Result<AsOut> {
    let (mu, sigma) = channel_stats_graph(tape, x)?;

    let h_mu = tape.fully_connected(mu, vars.stan_enc.w, vars.stan_enc.b)?;
    let h_mu = tape.relu(h_mu);
    let mu_learned = tape.fully_connected(h_mu, vars.mu_dec.w, vars.mu_dec.b)?;

    let h_sigma = tape.fully_connected(sigma, vars.stan_enc.w, vars.stan_enc.b)?;
    let h_sigma = tape.relu(h_sigma);
    let sigma_dec = tape.fully_connected(h_sigma, vars.sigma_dec.w, vars.sigma_dec.b)?;
    // Outer ReLU keeps the learned deviation non-negative.
    let sigma_learned = tape.relu(sigma_dec);

    let lambda_mu = tape.sigmoid(vars.rho_mu);
    let lambda_sigma = tape.sigmoid(vars.rho_sigma);
    let mu_stan = residual_blend(tape, lambda_mu, mu_learned, mu)?;
    let sigma_stan = residual_blend(tape, lambda_sigma, sigma_learned, sigma)?;

    let centered = tape.sub_group(x, mu_stan)?;
    let x_stan = tape.div_group_eps(centered, sigma_stan, S::from_f32(eps))?;
    Ok(AsOut { x_stan, mu_stan, sigma_stan, mu, sigma })
}

/// Adaptive rescaling: the shift comes from the raw mean statistics through
/// a tanh-bounded network, the scale from the raw deviation statistics
/// through a sigmoid-bounded one, each on top of its learned bias vector.
/// In the pretrain variant the bounded terms are scaled by sigmoid residual
/// weights.
pub fn ar_graph<S: Scalar>(
    tape: &mut Tape<S>,
    x_stan: Var,
    mu: Var,
    sigma: Var,
    vars: &AsrVars,
    pretrain_variant: bool,
) -> Result<Var> {
    if pretrain_variant && (vars.rho_beta.is_none() || vars.rho_gamma.is_none()) {
        return Err(Error::invalid("pretrain variant requires rescale-blend logits"));
    }
    let h_beta = tape.fully_connected(mu, vars.rescale_enc.w, vars.rescale_enc.b)?;
    let h_beta = tape.relu(h_beta);
    let beta_net = tape.fully_connected(h_beta, vars.beta_dec.w, vars.beta_dec.b)?;
    let mut beta_term = tape.tanh(beta_net);

    let h_gamma = tape.fully_connected(sigma, vars.rescale_enc.w, vars.rescale_enc.b)?;
    let h_gamma = tape.relu(h_gamma);
    let gamma_net = tape.fully_connected(h_gamma, vars.gamma_dec.w, vars.gamma_dec.b)?;
    let mut gamma_term = tape.sigmoid(gamma_net);

    if pretrain_variant {
        let lambda_beta = tape.sigmoid(vars.rho_beta.unwrap());
        let lambda_gamma = tape.sigmoid(vars.rho_gamma.unwrap());
        beta_term = tape.scale_by(beta_term, lambda_beta)?;
        gamma_term = tape.scale_by(gamma_term, lambda_gamma)?;
    }

    let beta = tape.add_row(beta_term, vars.beta_bias)?;
    let gamma = tape.add_row(gamma_term, vars.gamma_bias)?;
    let scaled = tape.mul_group(x_stan, gamma)?;
    tape.add_group(scaled, beta)
}

pub struct AsrOut {
    pub y: Var,
    pub mu_stan: Var,
    pub sigma_stan: Var,
}

/// Full adaptive layer: standardization then rescaling, both fed from the
/// channel statistics of the original input.
pub fn asr_graph<S: Scalar>(tape: &mut Tape<S>, x: Var, vars: &AsrVars, state_pretrain: bool, eps: f32) -> Result<AsrOut> {
    let stan = as_graph(tape, x, vars, eps)?;
    let y = ar_graph(tape, stan.x_stan, stan.mu, stan.sigma, vars, state_pretrain)?;
    Ok(AsrOut { y, mu_stan: stan.mu_stan, sigma_stan: stan.sigma_stan })
}

/// Standalone adaptive standardization; returns the standardized tensor and
/// the blended statistics as (N,C) matrices.
pub fn as_forward(x: &Tensor4, state: &AsrState) -> Result<(Tensor4, Matrix, Matrix)> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(x);
    let vars = state.bind(&mut tape)?;
    let out = as_graph(&mut tape, xv, &vars, state.eps)?;
    let x_stan = tape.read4(out.x_stan)?;
    let mu = Matrix::from_vec(x.n, x.c, tape.value(out.mu_stan).to_vec())?;
    let sigma = Matrix::from_vec(x.n, x.c, tape.value(out.sigma_stan).to_vec())?;
    Ok((x_stan, mu, sigma))
}

/// Standalone adaptive rescaling on an already-standardized tensor. `mu`
/// and `sigma` are the channel statistics of the original input.
pub fn ar_forward(x_stan: &Tensor4, mu: &Matrix, sigma: &Matrix, state: &AsrState) -> Result<Tensor4> {
    if mu.rows != x_stan.n || mu.cols != x_stan.c || sigma.rows != x_stan.n || sigma.cols != x_stan.c {
        return Err(Error::shape("ar_forward: statistics shape mismatch"));
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(x_stan);
    let vars = state.bind(&mut tape)?;
    let mu_v = tape.leaf_from_f32(&[mu.rows, mu.cols], &mu.data)?;
    let sigma_v = tape.leaf_from_f32(&[sigma.rows, sigma.cols], &sigma.data)?;
    let y = ar_graph(&mut tape, xv, mu_v, sigma_v, &vars, state.pretrain_variant)?;
    tape.read4(y)
}

/// Standalone full layer forward.
pub fn asr_forward(x: &Tensor4, state: &AsrState) -> Result<Tensor4> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf4(x);
    let vars = state.bind(&mut tape)?;
    let out = asr_graph(&mut tape, xv, &vars, state.pretrain_variant, state.eps)?;
    tape.read4(out.y)
}

// ---------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------

/// Which normalization a layer runs. Instance and layer norm are the
/// G = C and G = 1 ends of the grouped family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    Bn,
    BnTest,
    In,
    Ln,
    Gn,
    Sn,
    Asr,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Bn => "bn",
            NormKind::BnTest => "bn_test",
            NormKind::In => "in",
            NormKind::Ln => "ln",
            NormKind::Gn => "gn",
            NormKind::Sn => "sn",
            NormKind::Asr => "asr",
        }
    }
}

/// Per-layer normalization settings resolved from the run config.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormSettings {
    pub kind: NormKind,
    pub groups: usize,
    pub eps: f32,
    pub momentum: f32,
    /// Whether switchable norm keeps its batch constituent.
    pub include_bn: bool,
    pub pretrain_variant: bool,
    /// Bottleneck widths as divisors of C: C_stan = C / stan_div,
    /// C_rescale = max(1, C / rescale_div).
    pub stan_div: usize,
    pub rescale_div: usize,
}

impl Default for NormSettings {
    fn default() -> Self {
        NormSettings {
            kind: NormKind::None,
            groups: DEFAULT_GROUPS,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            include_bn: false,
            pretrain_variant: false,
            stan_div: 2,
            rescale_div: 16,
        }
    }
}

impl NormSettings {
    pub fn with_kind(kind: NormKind) -> Self {
        NormSettings { kind, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub enum NormState {
    None,
    Bn(BnState),
    BnTest(BnState),
    Group(GroupState),
    Sn(SnState),
    Asr(AsrState),
}

/// Deterministic seeded construction of a norm layer state for C channels.
pub fn init_norm(c: usize, settings: &NormSettings, seed: u64) -> Result<NormState> {
    if settings.eps <= 0.0 {
        return Err(Error::invalid("eps must be positive"));
    }
    Ok(match settings.kind {
        NormKind::None => NormState::None,
        NormKind::Bn => NormState::Bn(BnState::new(c, settings.momentum, settings.eps)),
        NormKind::BnTest => NormState::BnTest(BnState::new(c, settings.momentum, settings.eps)),
        NormKind::In => NormState::Group(GroupState::new(c, c, settings.eps)?),
        NormKind::Ln => NormState::Group(GroupState::new(c, 1, settings.eps)?),
        NormKind::Gn => NormState::Group(GroupState::new(c, settings.groups, settings.eps)?),
        NormKind::Sn => NormState::Sn(SnState::new(c, settings.eps)),
        NormKind::Asr => {
            if settings.stan_div == 0 || settings.rescale_div == 0 {
                return Err(Error::invalid("bottleneck divisors must be positive"));
            }
            let c_stan = c / settings.stan_div;
            let c_rescale = (c / settings.rescale_div).max(1);
            NormState::Asr(AsrState::init(
                c,
                c_stan,
                c_rescale,
                settings.pretrain_variant,
                settings.eps,
                seed,
            )?)
        }
    })
}
