//! Named finite-difference checks for every differentiable layer, run on
//! the 64-bit tape. Backs both the `gradcheck` CLI subcommand and the
//! acceptance suite.

use crate::error::Result;
use crate::gradcheck::{grad_check_multi, DEFAULT_EPS};
use crate::norms::{self, AsrVars, BnVars, FcVars, GroupVars, SnVars};
use crate::rng;
use crate::tape::{Reduction, Tape, Var};
use rand::Rng;

pub const SUITE_THRESHOLD: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: &'static str,
    pub max_err: f64,
}

fn uniform(rng: &mut impl Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

type Input = (Vec<usize>, Vec<f64>);

fn sum_of_squares(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let sq = tape.mul(y, y)?;
    Ok(tape.sum_all(sq))
}

fn check_conv(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 1);
    let inputs: Vec<Input> = vec![
        (vec![2, 3, 6, 6], uniform(&mut r, 216, -1.0, 1.0)),
        (vec![4, 3, 3, 3], uniform(&mut r, 108, -0.7, 0.7)),
        (vec![4], uniform(&mut r, 4, -0.5, 0.5)),
    ];
    grad_check_multi(
        &inputs,
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], 1, 1)?;
            sum_of_squares(tape, y)
        },
        DEFAULT_EPS,
    )
}

fn check_fc(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 2);
    let inputs: Vec<Input> = vec![
        (vec![3, 5], uniform(&mut r, 15, -1.0, 1.0)),
        (vec![4, 5], uniform(&mut r, 20, -0.7, 0.7)),
        (vec![4], uniform(&mut r, 4, -0.5, 0.5)),
    ];
    grad_check_multi(
        &inputs,
        |tape, v| {
            let y = tape.fully_connected(v[0], v[1], v[2])?;
            sum_of_squares(tape, y)
        },
        DEFAULT_EPS,
    )
}

fn check_pool(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 3);
    let inputs: Vec<Input> = vec![(vec![2, 3, 6, 6], uniform(&mut r, 216, -1.0, 1.0))];
    grad_check_multi(
        &inputs,
        |tape, v| {
            let y = tape.maxpool2d(v[0], 2, 2)?;
            sum_of_squares(tape, y)
        },
        DEFAULT_EPS,
    )
}

fn check_relu(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 4);
    let inputs: Vec<Input> = vec![(vec![2, 3, 4, 4], uniform(&mut r, 96, -1.0, 1.0))];
    grad_check_multi(
        &inputs,
        |tape, v| {
            let y = tape.relu(v[0]);
            sum_of_squares(tape, y)
        },
        DEFAULT_EPS,
    )
}

fn check_softmax_ce(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 5);
    let (n, k) = (4usize, 7usize);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let inputs: Vec<Input> = vec![(vec![n, k], uniform(&mut r, n * k, -2.0, 2.0))];
    grad_check_multi(
        &inputs,
        move |tape, v| {
            let (loss, _) = tape.softmax_cross_entropy(v[0], &labels, Reduction::Mean)?;
            Ok(loss)
        },
        DEFAULT_EPS,
    )
}

fn check_bn(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 6);
    let c = 4usize;
    let inputs: Vec<Input> = vec![
        (vec![3, c, 4, 4], uniform(&mut r, 3 * c * 16, -1.0, 1.0)),
        (vec![c], uniform(&mut r, c, 0.5, 1.5)),
        (vec![c], uniform(&mut r, c, -0.5, 0.5)),
    ];
    grad_check_multi(
        &inputs,
        |tape, v| {
            let vars = BnVars { gamma: v[1], beta: v[2] };
            let out = norms::bn_graph(tape, v[0], &vars, &[0.0; 4], &[1.0; 4], 1e-5, true)?;
            sum_of_squares(tape, out.y)
        },
        DEFAULT_EPS,
    )
}

fn check_group(seed: u64, groups: usize, tag: u64) -> Result<f64> {
    let mut r = rng::stream(seed, tag);
    let c = 4usize;
    let inputs: Vec<Input> = vec![
        (vec![2, c, 5, 5], uniform(&mut r, 2 * c * 25, -1.0, 1.0)),
        (vec![c], uniform(&mut r, c, 0.5, 1.5)),
        (vec![c], uniform(&mut r, c, -0.5, 0.5)),
    ];
    grad_check_multi(
        &inputs,
        |tape, v| {
            let vars = GroupVars { gamma: v[1], beta: v[2] };
            let y = norms::group_graph(tape, v[0], &vars, groups, 1e-5)?;
            sum_of_squares(tape, y)
        },
        DEFAULT_EPS,
    )
}

fn check_sn(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 8);
    let c = 4usize;
    let inputs: Vec<Input> = vec![
        (vec![3, c, 4, 4], uniform(&mut r, 3 * c * 16, -1.0, 1.0)),
        (vec![3], uniform(&mut r, 3, -1.0, 1.0)),
        (vec![3], uniform(&mut r, 3, -1.0, 1.0)),
        (vec![c], uniform(&mut r, c, 0.5, 1.5)),
        (vec![c], uniform(&mut r, c, -0.5, 0.5)),
    ];
    grad_check_multi(
        &inputs,
        |tape, v| {
            let vars = SnVars { logits_mu: v[1], logits_sigma: v[2], gamma: v[3], beta: v[4] };
            let y = norms::sn_graph(tape, v[0], &vars, 1e-5, true)?;
            sum_of_squares(tape, y)
        },
        DEFAULT_EPS,
    )
}

/// Random adaptive-layer inputs: the image, both bottleneck stacks, the
/// residual logits, and the rescale biases, in a fixed order.
fn asr_inputs(r: &mut impl Rng, c: usize, c_stan: usize, c_rescale: usize) -> Vec<Input> {
    vec![
        (vec![2, c, 5, 5], uniform(r, 2 * c * 25, -1.0, 1.0)),
        (vec![c_stan, c], uniform(r, c_stan * c, -0.7, 0.7)),
        (vec![c_stan], uniform(r, c_stan, -0.3, 0.3)),
        (vec![c, c_stan], uniform(r, c * c_stan, -0.7, 0.7)),
        (vec![c], uniform(r, c, -0.3, 0.3)),
        (vec![c, c_stan], uniform(r, c * c_stan, -0.7, 0.7)),
        (vec![c], uniform(r, c, -0.3, 0.3)),
        (vec![1], uniform(r, 1, -2.0, 2.0)),
        (vec![1], uniform(r, 1, -2.0, 2.0)),
        (vec![c_rescale, c], uniform(r, c_rescale * c, -0.7, 0.7)),
        (vec![c_rescale], uniform(r, c_rescale, -0.3, 0.3)),
        (vec![c, c_rescale], uniform(r, c * c_rescale, -0.7, 0.7)),
        (vec![c], uniform(r, c, -0.3, 0.3)),
        (vec![c, c_rescale], uniform(r, c * c_rescale, -0.7, 0.7)),
        (vec![c], uniform(r, c, -0.3, 0.3)),
        (vec![c], uniform(r, c, 0.7, 1.3)),
        (vec![c], uniform(r, c, -0.3, 0.3)),
        (vec![1], uniform(r, 1, -2.0, 2.0)),
        (vec![1], uniform(r, 1, -2.0, 2.0)),
    ]
}

fn asr_vars(v: &[Var]) -> AsrVars {
    AsrVars {
        stan_enc: FcVars { w: v[1], b: v[2] },
        mu_dec: FcVars { w: v[3], b: v[4] },
        sigma_dec: FcVars { w: v[5], b: v[6] },
        rho_mu: v[7],
        rho_sigma: v[8],
        rescale_enc: FcVars { w: v[9], b: v[10] },
        beta_dec: FcVars { w: v[11], b: v[12] },
        gamma_dec: FcVars { w: v[13], b: v[14] },
        gamma_bias: v[15],
        beta_bias: v[16],
        rho_beta: Some(v[17]),
        rho_gamma: Some(v[18]),
    }
}

fn check_as(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 9);
    let inputs = asr_inputs(&mut r, 4, 2, 2);
    grad_check_multi(
        &inputs,
        |tape, v| {
            let vars = asr_vars(v);
            let out = norms::as_graph(tape, v[0], &vars, 1e-5)?;
            sum_of_squares(tape, out.x_stan)
        },
        DEFAULT_EPS,
    )
}

fn check_ar(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 10);
    let c = 4usize;
    let mut inputs = asr_inputs(&mut r, c, 2, 2);
    // Statistics enter as free inputs here: a standardized tensor plus
    // positive deviations.
    inputs.push((vec![2, c], uniform(&mut r, 2 * c, -1.0, 1.0)));
    inputs.push((vec![2, c], uniform(&mut r, 2 * c, 0.3, 1.5)));
    grad_check_multi(
        &inputs,
        |tape, v| {
            let vars = asr_vars(v);
            let y = norms::ar_graph(tape, v[0], v[19], v[20], &vars, true)?;
            sum_of_squares(tape, y)
        },
        DEFAULT_EPS,
    )
}

fn check_asr(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, 11);
    let inputs = asr_inputs(&mut r, 4, 2, 2);
    grad_check_multi(
        &inputs,
        |tape, v| {
            let vars = asr_vars(v);
            let out = norms::asr_graph(tape, v[0], &vars, true, 1e-5)?;
            sum_of_squares(tape, out.y)
        },
        DEFAULT_EPS,
    )
}

/// Run every layer check over the given seeds and report the worst error
/// per layer.
pub fn run_layer_gradient_suite(seeds: &[u64]) -> Result<Vec<LayerCheck>> {
    let checks: Vec<(&'static str, fn(u64) -> Result<f64>)> = vec![
        ("conv", check_conv),
        ("fc", check_fc),
        ("pool", check_pool),
        ("relu", check_relu),
        ("softmax_ce", check_softmax_ce),
        ("bn", check_bn),
        ("in", |s| check_group(s, 4, 7)),
        ("ln", |s| check_group(s, 1, 12)),
        ("gn", |s| check_group(s, 2, 13)),
        ("sn", check_sn),
        ("as", check_as),
        ("ar", check_ar),
        ("asr", check_asr),
    ];
    let mut out = Vec::with_capacity(checks.len());
    for (name, f) in checks {
        let mut worst = 0.0f64;
        for &seed in seeds {
            worst = worst.max(f(seed)?);
        }
        out.push(LayerCheck { name, max_err: worst });
    }
    Ok(out)
}
