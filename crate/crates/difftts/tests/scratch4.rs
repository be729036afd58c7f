//! Scratch: loss floor vs achieved loss; prediction scatter (temporary).

use difftts::numerics::{randn, Rng};
use difftts::score::{Condition, ConditionalScoreNet, ScoreModel, ScoreNetConfig};
use difftts::sde::NoiseSchedule;
use difftts::toyworld::GaussianBenchmark;
use difftts::training::{pretrain, Stage, TrainConfig, TrainItem};

#[test]
fn probe_floor() {
    let sched = NoiseSchedule::default();
    let bench = GaussianBenchmark::new(vec![0.0, 0.0], 1.0);
    let root = Rng::new(77);
    let t_min = 0.05;

    // Empirical weighted-loss floor with the exact score.
    let mut frng = root.substream("floor");
    let mut floor_acc = 0.0;
    let n_floor = 200_000;
    for _ in 0..n_floor {
        let t = t_min + (1.0 - t_min) * frng.uniform();
        let lambda = sched.lambda(t).unwrap();
        let alpha = sched.mean_coeff(t).unwrap();
        let x0 = bench.sample(1, &mut frng);
        let z = randn(&[1, 2], &mut frng);
        let xt = x0.scale(alpha).add(&z.scale(lambda.sqrt()));
        let s_star = bench.score(&xt, t, &sched);
        let resid = s_star.add(&z.scale(1.0 / lambda.sqrt()));
        floor_acc += lambda * resid.data().iter().map(|v| v * v).sum::<f64>();
    }
    println!("empirical weighted floor per sample: {:.4}", floor_acc / n_floor as f64);

    // Train and compare achieved loss (averaged over last 500 iters).
    let e = {
        let v = randn(&[8], &mut Rng::new(5).substream("e"));
        v.scale(1.0 / v.l2_norm())
    };
    let mut data = Vec::new();
    let mut drng = root.substream("data");
    for _ in 0..1000 {
        data.push(TrainItem { frames: bench.sample(1, &mut drng), embedding: e.clone() });
    }
    let mut net = ConditionalScoreNet::new(
        ScoreNetConfig { channels: 2, embed_dim: 8, hidden: 32, depth: 2 },
        &mut root.substream("init"),
    );
    let mut cfg = TrainConfig::for_stage(Stage::PretrainConditional);
    cfg.iterations = 8000;
    cfg.batch = 32;
    cfg.lr = 1e-3;
    cfg.crop_frames = 1;
    cfg.t_min = t_min;
    let out = pretrain(&mut net, &data, &sched, &cfg, &root.substream("train")).unwrap();
    let tail = &out.report.losses[out.report.losses.len() - 500..];
    println!("achieved tail-averaged loss: {:.4}", tail.iter().sum::<f64>() / tail.len() as f64);

    // Per-row evaluation: each sample is its own single-frame utterance.
    let mut erng = root.substream("eval");
    for &t in &[0.2, 0.3, 0.5, 0.7, 0.9] {
        let mut mae = 0.0;
        let mut n = 0;
        for _ in 0..200 {
            let x0 = bench.sample(1, &mut erng);
            let eps = randn(&[1, 2], &mut erng);
            let xt = difftts::sde::forward_marginal(&x0, t, &eps, &sched).unwrap();
            let got = net.score(&xt, t, Condition::Speaker(&e)).unwrap();
            let want = bench.score(&xt, t, &sched);
            mae += got.sub(&want).data().iter().map(|v| v.abs()).sum::<f64>();
            n += got.numel();
        }
        println!("t={t}: per-row MAE {:.4}", mae / n as f64);
    }
}
