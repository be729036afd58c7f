//! Gradient fidelity: analytic tape gradients against central finite
//! differences, tape traversal cost, and the denoising-loss gradients.

mod common;

use std::collections::BTreeMap;

use difftts::numerics::{randn, AdamState, Rng, Tape, Tensor, Var};
use difftts::score::{Condition, ConditionalScoreNet, ScoreNetConfig};
use difftts::sde::NoiseSchedule;
use difftts::training::score_loss;
use proptest::prelude::*;

fn central_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, i: usize, h: f64) -> f64 {
    let mut xp = x.clone();
    let mut xm = x.clone();
    xp.data_mut()[i] += h;
    xm.data_mut()[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

fn check_gradient(build: impl Fn(&Tape, &Var) -> Var, x: Tensor, rel_tol: f64) {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let f = build(&tape, &xv);
    let grads = f.backward().expect("scalar objective");
    let analytic = grads.get(&xv).unwrap();
    for i in 0..x.numel() {
        let fd = central_diff(
            |xt| {
                let tape = Tape::new();
                let xv = tape.leaf(xt.clone());
                build(&tape, &xv).value().item()
            },
            &x,
            i,
            1e-5,
        );
        let denom = analytic.data()[i].abs().max(fd.abs()).max(1e-6);
        let rel = (fd - analytic.data()[i]).abs() / denom;
        assert!(
            rel < rel_tol,
            "entry {i}: fd {fd} vs analytic {} (rel {rel})",
            analytic.data()[i]
        );
    }
}

#[test]
fn three_layer_net_gradient_matches_finite_differences() {
    // Random three-layer tanh network reduced to a scalar.
    let mut rng = Rng::new(11).substream("net");
    let w1 = randn(&[4, 6], &mut rng).scale(0.5);
    let w2 = randn(&[6, 5], &mut rng).scale(0.5);
    let w3 = randn(&[5, 2], &mut rng).scale(0.5);
    let x = randn(&[3, 4], &mut rng);
    check_gradient(
        move |tape, xv| {
            let w1 = tape.constant(w1.clone());
            let w2 = tape.constant(w2.clone());
            let w3 = tape.constant(w3.clone());
            xv.matmul(&w1).tanh().matmul(&w2).tanh().matmul(&w3).sum()
        },
        x,
        1e-6,
    );
}

#[test]
fn tape_backward_visits_equal_op_count() {
    // Visit count equals recorded op count, and grows linearly.
    let mut rng = Rng::new(5).substream("lin");
    for layers in [1usize, 4, 16] {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[4, 4], &mut rng));
        let mut h = x.clone();
        for _ in 0..layers {
            h = h.tanh().scale(0.9);
        }
        let f = h.sum();
        let ops = tape.len();
        f.backward().unwrap();
        assert_eq!(tape.last_backward_visits(), ops);
        assert_eq!(ops, 2 + 2 * layers);
    }
}

#[test]
fn adam_zero_lr_is_identity_over_many_steps() {
    let mut rng = Rng::new(6).substream("adam");
    let mut p = randn(&[3, 3], &mut rng);
    let before = p.clone();
    let mut state = AdamState::new(0.0);
    for i in 0..50 {
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), randn(&[3, 3], &mut rng).scale(i as f64));
        state.step(&mut [("p", &mut p)], &grads).unwrap();
    }
    assert!(p.bit_eq(&before));
}

#[test]
fn score_loss_gradients_match_finite_differences() {
    // Small model, both conditional and null samples in the batch.
    let mut init = Rng::new(3).substream("init");
    let mut net = ConditionalScoreNet::new(
        ScoreNetConfig {
            channels: 2,
            embed_dim: 3,
            hidden: 4,
            depth: 1,
        },
        &mut init,
    );
    let e = common::unit_embed(3, 8);
    let x0 = randn(&[3, 2], &mut init);
    let sched = NoiseSchedule::default();
    let rng = Rng::new(9).substream("loss");
    let batch = vec![
        (x0.clone(), Condition::Speaker(&e)),
        (x0.scale(0.5), Condition::Null),
    ];
    let (_, grads) = score_loss(&net, &batch, &sched, 0.1, &rng).unwrap();
    let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        let Some(g) = grads.get(name).cloned() else { continue };
        for i in 0..g.numel().min(5) {
            let h = 1e-5;
            let mut eval = |delta: f64| {
                for (pname, t) in net.named_params_mut() {
                    if &pname == name {
                        t.data_mut()[i] += delta;
                    }
                }
                let batch = vec![
                    (x0.clone(), Condition::Speaker(&e)),
                    (x0.scale(0.5), Condition::Null),
                ];
                let (l, _) = score_loss(&net, &batch, &sched, 0.1, &rng).unwrap();
                for (pname, t) in net.named_params_mut() {
                    if &pname == name {
                        t.data_mut()[i] -= delta;
                    }
                }
                l
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let gi = g.data()[i];
            let rel = (fd - gi).abs() / gi.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "{name}[{i}]: fd {fd} vs {gi} (rel {rel})");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_elementwise_chain_gradient(
        xs in prop::collection::vec(-2.0f64..2.0, 4..10)
    ) {
        let x = Tensor::from_vec(&[xs.len()], xs);
        check_gradient(|_, xv| xv.tanh().square().sum(), x, 1e-5);
    }

    #[test]
    fn prop_norm_gradient(
        xs in prop::collection::vec(0.5f64..3.0, 3..8)
    ) {
        // Offset away from zero: the norm is not differentiable there.
        let x = Tensor::from_vec(&[xs.len()], xs);
        check_gradient(|_, xv| xv.norm(), x, 1e-5);
    }

    #[test]
    fn prop_log_softmax_gather_gradient(
        xs in prop::collection::vec(-3.0f64..3.0, 6..6usize.saturating_add(7))
    ) {
        let rows = xs.len() / 3;
        let x = Tensor::from_vec(&[rows, 3], xs[..rows * 3].to_vec());
        check_gradient(
            |tape, xv| {
                let mut mask = vec![0.0; rows * 3];
                for r in 0..rows {
                    mask[r * 3 + r % 3] = 1.0;
                }
                let mask = tape.constant(Tensor::from_vec(&[rows, 3], mask));
                xv.log_softmax_rows().mul(&mask).sum()
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn prop_conv_shift_concat_gradient(
        xs in prop::collection::vec(-1.5f64..1.5, 8..8usize.saturating_add(9))
    ) {
        let rows = xs.len() / 4;
        let x = Tensor::from_vec(&[rows, 4], xs[..rows * 4].to_vec());
        check_gradient(
            |tape, xv| {
                let w = tape.constant(Tensor::from_vec(
                    &[8, 2],
                    (0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect(),
                ));
                let shifted = xv.shift_rows(1).concat_cols(&xv.shift_rows(-1));
                shifted.matmul(&w).tanh().sum()
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn prop_scalar_var_ops_gradient(
        xs in prop::collection::vec(0.2f64..2.0, 4..9)
    ) {
        // Normalization pattern: x scaled by the reciprocal of its norm.
        let x = Tensor::from_vec(&[xs.len()], xs);
        check_gradient(
            |tape, xv| {
                let unit = xv.mul_scalar_var(&xv.norm().recip());
                let probe = tape.constant(Tensor::full(&[unit.value().numel()], 0.7));
                unit.mul(&probe).sum()
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn prop_matmul_both_sides_gradient(
        xs in prop::collection::vec(-1.0f64..1.0, 6..7)
    ) {
        let x = Tensor::from_vec(&[2, 3], xs[..6].to_vec());
        // Gradient w.r.t. the left operand.
        check_gradient(
            |tape, xv| {
                let w = tape.constant(Tensor::from_vec(&[3, 2], vec![0.5, -1.0, 0.25, 2.0, -0.75, 0.1]));
                xv.matmul(&w).square().sum()
            },
            x.clone(),
            1e-5,
        );
        // Gradient w.r.t. the right operand.
        let w = Tensor::from_vec(&[3, 2], xs[..6].to_vec());
        check_gradient(
            |tape, wv| {
                let a = tape.constant(Tensor::from_vec(&[2, 3], vec![1.0, -0.5, 0.3, 0.8, 0.2, -1.1]));
                a.matmul(wv).square().sum()
            },
            w,
            1e-5,
        );
    }
}
