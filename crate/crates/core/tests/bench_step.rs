//! Rough timing probe for the desk backbone, ignored by default.

use normshift_core::model::{build_model, ModelConfig, TapWants};
use normshift_core::norms::{Mode, NormKind, NormSettings};
use normshift_core::tape::{Reduction, Tape};
use normshift_core::tensor::Tensor4;
use normshift_core::trainer::{Optimizer, OptimizerKind};
use std::time::Instant;

#[test]
#[ignore]
fn time_desk_training_step() {
    for kind in [NormKind::Bn, NormKind::Asr] {
        let cfg = ModelConfig {
            norm: NormSettings { kind, ..Default::default() },
            seed: 1,
            ..Default::default()
        };
        let mut model = build_model(cfg).unwrap();
        use rand::Rng;
        let mut r = normshift_core::rng::stream(1, 1);
        let x = Tensor4::from_vec(
            32,
            3,
            24,
            24,
            (0..32 * 3 * 24 * 24).map(|_| r.random::<f32>()).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
        let mut opt = Optimizer::new(OptimizerKind::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 });

        // Warmup + timed loop.
        let reps = 30;
        let start = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::<f32>::new();
            let g = model.forward_graph(&mut tape, &x, Mode::Train, TapWants::default()).unwrap();
            let (loss, _) = tape.softmax_cross_entropy(g.logits, &labels, Reduction::Mean).unwrap();
            let grads = tape.backward(loss).unwrap();
            model.params.zero_grad();
            model.params.accumulate(&g.param_vars, &grads);
            opt.step(&mut model.params, 1.0).unwrap();
            model.apply_ema(&g.ema);
        }
        let per = start.elapsed().as_secs_f64() / reps as f64;
        println!("{kind:?}: {:.1} ms per train step (batch 32)", per * 1e3);

        // Input-only ascent step cost.
        let start = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::<f32>::new();
            let xv = tape.leaf4(&x);
            let g = model
                .forward_from_var(&mut tape, xv, Mode::Eval, TapWants { features: true, stat_taps: false })
                .unwrap();
            let (loss, _) = tape.softmax_cross_entropy(g.logits, &labels, Reduction::Sum).unwrap();
            let grads = tape.backward_wrt(loss, &[xv]).unwrap();
            std::hint::black_box(grads.wrt(xv));
        }
        let per = start.elapsed().as_secs_f64() / reps as f64;
        println!("{kind:?}: {:.1} ms per ascent step (batch 32)", per * 1e3);
    }
}
