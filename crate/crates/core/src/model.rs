//! ConvNet classifier with a pluggable normalization layer after each
//! convolution (before the ReLU), a feature tap for the augmentation
//! semantic cost, and deterministic seeded initialization.

use crate::error::{Error, Result};
use crate::norms::{
    self, AsrVars, BnVars, FcVars, GroupVars, Mode, NormKind, NormSettings, NormState, SnVars,
};
use crate::param::{ParamId, ParamSet};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, Tensor4};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input dims as [C, H, W].
    pub input: [usize; 3],
    /// Output channels of each conv block (conv -> norm -> relu -> pool2).
    pub conv_channels: Vec<usize>,
    /// Odd square kernel size; padding keeps spatial dims.
    pub kernel: usize,
    /// Hidden fully-connected widths; the K-way head is appended.
    pub fc_widths: Vec<usize>,
    pub classes: usize,
    pub norm: NormSettings,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input: [3, 24, 24],
            conv_channels: vec![16, 32],
            kernel: 3,
            fc_widths: vec![128],
            classes: 10,
            norm: NormSettings::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FcIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct AsrIds {
    pub stan_enc_w: ParamId,
    pub stan_enc_b: ParamId,
    pub mu_dec_w: ParamId,
    pub mu_dec_b: ParamId,
    pub sigma_dec_w: ParamId,
    pub sigma_dec_b: ParamId,
    pub rho_mu: ParamId,
    pub rho_sigma: ParamId,
    pub rescale_enc_w: ParamId,
    pub rescale_enc_b: ParamId,
    pub beta_dec_w: ParamId,
    pub beta_dec_b: ParamId,
    pub gamma_dec_w: ParamId,
    pub gamma_dec_b: ParamId,
    pub gamma_bias: ParamId,
    pub beta_bias: ParamId,
    pub rho_beta: Option<ParamId>,
    pub rho_gamma: Option<ParamId>,
}

#[derive(Debug, Clone)]
enum NormIds {
    None,
    Bn { gamma: ParamId, beta: ParamId, running_mu: ParamId, running_var: ParamId, test_stats: bool },
    Group { gamma: ParamId, beta: ParamId, groups: usize },
    Sn { logits_mu: ParamId, logits_sigma: ParamId, gamma: ParamId, beta: ParamId, include_bn: bool },
    Asr(AsrIds),
}

/// Residual-blend weights of one adaptive norm layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsrLambdas {
    pub layer: usize,
    pub lambda_mu: f32,
    pub lambda_sigma: f32,
    pub lambda_beta: Option<f32>,
    pub lambda_gamma: Option<f32>,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    convs: Vec<(ConvIds, NormIds)>,
    fcs: Vec<FcIds>,
    flat_dim: usize,
}

/// What to expose from a forward graph besides the logits.
#[derive(Debug, Clone, Copy, Default)]
pub struct TapWants {
    /// Post-activation output of the first fully-connected layer.
    pub features: bool,
    /// Blended (mu_stan, sigma_stan) of every adaptive norm layer.
    pub stat_taps: bool,
}

/// Pending EMA update from one batch-norm layer's train-mode forward.
pub struct EmaUpdate {
    pub running_mu: ParamId,
    pub running_var: ParamId,
    pub batch_mu: Vec<f32>,
    pub batch_var: Vec<f32>,
}

pub struct GraphOut {
    pub logits: Var,
    pub features: Option<Var>,
    pub stat_taps: Vec<(Var, Var)>,
    /// Leaves for every parameter, index-aligned with the ParamSet.
    pub param_vars: Vec<Var>,
    pub ema: Vec<EmaUpdate>,
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    (0..len).map(|_| rng.random::<f32>() * 2.0 * limit - limit).collect()
}

/// Build the classifier described by `config` with seeded initialization.
pub fn build_model(config: ModelConfig) -> Result<Model> {
    if config.classes < 2 {
        return Err(Error::invalid("classes must be >= 2"));
    }
    if !config.conv_channels.is_empty() && config.kernel % 2 == 0 {
        return Err(Error::invalid("kernel size must be odd"));
    }
    let (mut c, mut h, mut w) = (config.input[0], config.input[1], config.input[2]);
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("input dims must be positive"));
    }

    let mut params = ParamSet::new();
    let mut convs = Vec::new();
    for (i, &cout) in config.conv_channels.iter().enumerate() {
        let k = config.kernel;
        let mut r = rng::stream(config.seed, 0xC0 + i as u64);
        let fan_in = c * k * k;
        let fan_out = cout * k * k;
        let wid = params.add(
            format!("conv{}.weight", i + 1),
            vec![cout, c, k, k],
            xavier(&mut r, fan_in, fan_out, cout * c * k * k),
            true,
        )?;
        let bid = params.add(format!("conv{}.bias", i + 1), vec![cout], vec![0.0; cout], true)?;

        let state = norms::init_norm(cout, &config.norm, rng::mix(config.seed, 0x40 + i as u64))?;
        let norm_ids = register_norm(&mut params, &format!("norm{}", i + 1), state, &config.norm)?;

        convs.push((ConvIds { w: wid, b: bid }, norm_ids));
        c = cout;
        // Same-size conv, then 2x2/2 pool.
        if h < 2 || w < 2 {
            return Err(Error::invalid(format!(
                "spatial dims collapsed to {h}x{w} before pool stage {}",
                i + 1
            )));
        }
        h = (h - 2) / 2 + 1;
        w = (w - 2) / 2 + 1;
        if h == 0 || w == 0 {
            return Err(Error::invalid("spatial dims collapsed below 1"));
        }
    }

    let flat_dim = c * h * w;
    let mut fcs = Vec::new();
    let mut din = flat_dim;
    for (i, &width) in config.fc_widths.iter().chain(std::iter::once(&config.classes)).enumerate() {
        if width == 0 {
            return Err(Error::invalid("fc width must be positive"));
        }
        let mut r = rng::stream(config.seed, 0xF0 + i as u64);
        let wid = params.add(
            format!("fc{}.weight", i + 1),
            vec![width, din],
            xavier(&mut r, din, width, width * din),
            true,
        )?;
        let bid = params.add(format!("fc{}.bias", i + 1), vec![width], vec![0.0; width], true)?;
        fcs.push(FcIds { w: wid, b: bid });
        din = width;
    }

    Ok(Model { config, params, convs, fcs, flat_dim })
}

fn register_norm(
    params: &mut ParamSet,
    prefix: &str,
    state: NormState,
    settings: &NormSettings,
) -> Result<NormIds> {
    let ids = match state {
        NormState::None => NormIds::None,
        NormState::Bn(s) | NormState::BnTest(s) => {
            let test_stats = settings.kind == NormKind::BnTest;
            let c = s.gamma.len();
            NormIds::Bn {
                gamma: params.add(format!("{prefix}.gamma"), vec![c], s.gamma, true)?,
                beta: params.add(format!("{prefix}.beta"), vec![c], s.beta, true)?,
                running_mu: params.add(format!("{prefix}.running_mu"), vec![c], s.running_mu, false)?,
                running_var: params.add(format!("{prefix}.running_var"), vec![c], s.running_var, false)?,
                test_stats,
            }
        }
        NormState::Group(s) => {
            let c = s.gamma.len();
            NormIds::Group {
                gamma: params.add(format!("{prefix}.gamma"), vec![c], s.gamma, true)?,
                beta: params.add(format!("{prefix}.beta"), vec![c], s.beta, true)?,
                groups: s.groups,
            }
        }
        NormState::Sn(s) => {
            let c = s.gamma.len();
            NormIds::Sn {
                logits_mu: params.add(format!("{prefix}.logits_mu"), vec![3], s.logits_mu, true)?,
                logits_sigma: params.add(format!("{prefix}.logits_sigma"), vec![3], s.logits_sigma, true)?,
                gamma: params.add(format!("{prefix}.gamma"), vec![c], s.gamma, true)?,
                beta: params.add(format!("{prefix}.beta"), vec![c], s.beta, true)?,
                include_bn: settings.include_bn,
            }
        }
        NormState::Asr(s) => {
            let mut fc = |name: &str, p: &norms::FcPair| -> Result<(ParamId, ParamId)> {
                Ok((
                    params.add(format!("{prefix}.{name}.w"), vec![p.dout, p.din], p.w.clone(), true)?,
                    params.add(format!("{prefix}.{name}.b"), vec![p.dout], p.b.clone(), true)?,
                ))
            };
            let (stan_enc_w, stan_enc_b) = fc("stan_enc", &s.stan_enc)?;
            let (mu_dec_w, mu_dec_b) = fc("mu_dec", &s.mu_dec)?;
            let (sigma_dec_w, sigma_dec_b) = fc("sigma_dec", &s.sigma_dec)?;
            let (rescale_enc_w, rescale_enc_b) = fc("rescale_enc", &s.rescale_enc)?;
            let (beta_dec_w, beta_dec_b) = fc("beta_dec", &s.beta_dec)?;
            let (gamma_dec_w, gamma_dec_b) = fc("gamma_dec", &s.gamma_dec)?;
            NormIds::Asr(AsrIds {
                stan_enc_w,
                stan_enc_b,
                mu_dec_w,
                mu_dec_b,
                sigma_dec_w,
                sigma_dec_b,
                rho_mu: params.add(format!("{prefix}.rho_mu"), vec![1], vec![s.rho_mu], true)?,
                rho_sigma: params.add(format!("{prefix}.rho_sigma"), vec![1], vec![s.rho_sigma], true)?,
                rescale_enc_w,
                rescale_enc_b,
                beta_dec_w,
                beta_dec_b,
                gamma_dec_w,
                gamma_dec_b,
                gamma_bias: params.add(format!("{prefix}.gamma_bias"), vec![s.c], s.gamma_bias, true)?,
                beta_bias: params.add(format!("{prefix}.beta_bias"), vec![s.c], s.beta_bias, true)?,
                rho_beta: if s.pretrain_variant {
                    Some(params.add(format!("{prefix}.rho_beta"), vec![1], vec![s.rho_beta], true)?)
                } else {
                    None
                },
                rho_gamma: if s.pretrain_variant {
                    Some(params.add(format!("{prefix}.rho_gamma"), vec![1], vec![s.rho_gamma], true)?)
                } else {
                    None
                },
            })
        }
    };
    Ok(ids)
}

impl Model {
    /// Number of trainable parameters and of all stored tensors' elements.
    pub fn parameter_counts(&self) -> (usize, usize) {
        let mut trainable = 0;
        let mut total = 0;
        for p in self.params.iter() {
            total += p.value.len();
            if p.trainable {
                trainable += p.value.len();
            }
        }
        (trainable, total)
    }

    pub fn flat_dim(&self) -> usize {
        self.flat_dim
    }

    /// Build the forward graph from an input already on the tape. The input
    /// leaf is the caller's, so its gradient can be requested.
    pub fn forward_from_var<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        mode: Mode,
        wants: TapWants,
    ) -> Result<GraphOut> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4
            || shape[1] != self.config.input[0]
            || shape[2] != self.config.input[1]
            || shape[3] != self.config.input[2]
        {
            return Err(Error::shape(format!(
                "input shape {:?} does not match configured {:?}",
                &shape[1..],
                self.config.input
            )));
        }
        let n = shape[0];
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }

        let param_vars = self.params.bind_all(tape);
        let pv = |id: ParamId| param_vars[id.0];
        let eps = self.config.norm.eps;
        let pad = self.config.kernel / 2;

        let mut cur = x;
        let mut ema = Vec::new();
        let mut stat_taps = Vec::new();
        for (conv, norm) in &self.convs {
            cur = tape.conv2d(cur, pv(conv.w), pv(conv.b), 1, pad)?;
            cur = match norm {
                NormIds::None => cur,
                NormIds::Bn { gamma, beta, running_mu, running_var, test_stats } => {
                    let vars = BnVars { gamma: pv(*gamma), beta: pv(*beta) };
                    let use_batch = *test_stats || mode == Mode::Train;
                    let out = norms::bn_graph(
                        tape,
                        cur,
                        &vars,
                        &self.params.get(*running_mu).value,
                        &self.params.get(*running_var).value,
                        eps,
                        use_batch,
                    )?;
                    if mode == Mode::Train && !test_stats {
                        let (batch_mu, batch_var) = out.batch_stats.expect("train mode uses batch stats");
                        ema.push(EmaUpdate {
                            running_mu: *running_mu,
                            running_var: *running_var,
                            batch_mu,
                            batch_var,
                        });
                    }
                    out.y
                }
                NormIds::Group { gamma, beta, groups } => {
                    let vars = GroupVars { gamma: pv(*gamma), beta: pv(*beta) };
                    norms::group_graph(tape, cur, &vars, *groups, eps)?
                }
                NormIds::Sn { logits_mu, logits_sigma, gamma, beta, include_bn } => {
                    let vars = SnVars {
                        logits_mu: pv(*logits_mu),
                        logits_sigma: pv(*logits_sigma),
                        gamma: pv(*gamma),
                        beta: pv(*beta),
                    };
                    norms::sn_graph(tape, cur, &vars, eps, *include_bn)?
                }
                NormIds::Asr(ids) => {
                    let vars = AsrVars {
                        stan_enc: FcVars { w: pv(ids.stan_enc_w), b: pv(ids.stan_enc_b) },
                        mu_dec: FcVars { w: pv(ids.mu_dec_w), b: pv(ids.mu_dec_b) },
                        sigma_dec: FcVars { w: pv(ids.sigma_dec_w), b: pv(ids.sigma_dec_b) },
                        rho_mu: pv(ids.rho_mu),
                        rho_sigma: pv(ids.rho_sigma),
                        rescale_enc: FcVars { w: pv(ids.rescale_enc_w), b: pv(ids.rescale_enc_b) },
                        beta_dec: FcVars { w: pv(ids.beta_dec_w), b: pv(ids.beta_dec_b) },
                        gamma_dec: FcVars { w: pv(ids.gamma_dec_w), b: pv(ids.gamma_dec_b) },
                        gamma_bias: pv(ids.gamma_bias),
                        beta_bias: pv(ids.beta_bias),
                        rho_beta: ids.rho_beta.map(pv),
                        rho_gamma: ids.rho_gamma.map(pv),
                    };
                    let out = norms::asr_graph(
                        tape,
                        cur,
                        &vars,
                        self.config.norm.pretrain_variant,
                        eps,
                    )?;
                    if wants.stat_taps {
                        stat_taps.push((out.mu_stan, out.sigma_stan));
                    }
                    out.y
                }
            };
            cur = tape.relu(cur);
            cur = tape.maxpool2d(cur, 2, 2)?;
        }

        let mut flat = tape.reshape(cur, &[n, self.flat_dim])?;
        let mut features = None;
        for (i, fc) in self.fcs.iter().enumerate() {
            let last = i + 1 == self.fcs.len();
            flat = tape.fully_connected(flat, pv(fc.w), pv(fc.b))?;
            if !last {
                flat = tape.relu(flat);
                if i == 0 && wants.features {
                    features = Some(flat);
                }
            }
        }

        Ok(GraphOut { logits: flat, features, stat_taps, param_vars, ema })
    }

    /// Convenience wrapper creating the input leaf internally.
    pub fn forward_graph<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor4,
        mode: Mode,
        wants: TapWants,
    ) -> Result<GraphOut> {
        let xv = tape.leaf4(x);
        self.forward_from_var(tape, xv, mode, wants)
    }

    /// Apply the pending batch-norm EMA updates collected by a train-mode
    /// forward. A separate step so gradient checking can run the train path
    /// without mutating the model.
    pub fn apply_ema(&mut self, updates: &[EmaUpdate]) {
        let m = self.config.norm.momentum;
        for u in updates {
            let p = self.params.get_mut(u.running_mu);
            for (r, &b) in p.value.iter_mut().zip(&u.batch_mu) {
                *r = m * *r + (1.0 - m) * b;
            }
            let p = self.params.get_mut(u.running_var);
            for (r, &b) in p.value.iter_mut().zip(&u.batch_var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Inference forward on plain tensors.
    pub fn forward_eval(&self, x: &Tensor4, want_features: bool) -> Result<(Matrix, Option<Matrix>)> {
        let mut tape = Tape::<f32>::new();
        let out = self.forward_graph(
            &mut tape,
            x,
            Mode::Eval,
            TapWants { features: want_features, stat_taps: false },
        )?;
        let logits = Matrix::from_vec(x.n, self.config.classes, tape.value(out.logits).to_vec())?;
        let features = match out.features {
            Some(f) => {
                let s = tape.shape(f).to_vec();
                Some(Matrix::from_vec(s[0], s[1], tape.value(f).to_vec())?)
            }
            None => None,
        };
        Ok((logits, features))
    }

    /// Residual-blend weights per adaptive norm layer; empty for other kinds.
    pub fn asr_lambdas(&self) -> Vec<AsrLambdas> {
        let mut out = Vec::new();
        for (layer, (_, norm)) in self.convs.iter().enumerate() {
            if let NormIds::Asr(ids) = norm {
                let sig = |id: ParamId| crate::scalar::Scalar::sigmoid(self.params.get(id).value[0]);
                out.push(AsrLambdas {
                    layer,
                    lambda_mu: sig(ids.rho_mu),
                    lambda_sigma: sig(ids.rho_sigma),
                    lambda_beta: ids.rho_beta.map(sig),
                    lambda_gamma: ids.rho_gamma.map(sig),
                });
            }
        }
        out
    }

    /// Channel count of the norm layer at `layer` (0-based conv block index).
    pub fn norm_channels(&self, layer: usize) -> Option<usize> {
        self.config.conv_channels.get(layer).copied()
    }

    pub fn has_asr(&self) -> bool {
        self.convs.iter().any(|(_, n)| matches!(n, NormIds::Asr(_)))
    }
}
