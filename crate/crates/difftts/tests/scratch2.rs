//! Scratch: stationary-world training probe (temporary).

use difftts::numerics::{randn, Rng};
use difftts::score::{Condition, ConditionalScoreNet, ScoreModel, ScoreNetConfig};
use difftts::sde::NoiseSchedule;
use difftts::toyworld::GaussianBenchmark;
use difftts::training::{pretrain, Stage, TrainConfig, TrainItem};

#[test]
fn probe_stationary() {
    let sched = NoiseSchedule::default();
    let bench = GaussianBenchmark::new(vec![0.0, 0.0], 1.0);
    let root = Rng::new(77);
    let e = {
        let v = randn(&[8], &mut Rng::new(5).substream("e"));
        v.scale(1.0 / v.l2_norm())
    };
    let mut data = Vec::new();
    let mut drng = root.substream("data");
    for _ in 0..1000 {
        data.push(TrainItem {
            frames: bench.sample(1, &mut drng),
            embedding: e.clone(),
        });
    }
    for (lr, iters, tmin, batch, hidden) in [(1e-3, 12000, 0.05, 32, 32), (5e-4, 24000, 0.05, 32, 32), (1e-3, 12000, 0.05, 32, 48)] {
        let mut net = ConditionalScoreNet::new(
            ScoreNetConfig { channels: 2, embed_dim: 8, hidden, depth: 2 },
            &mut root.substream("init"),
        );
        let mut cfg = TrainConfig::for_stage(Stage::PretrainConditional);
        cfg.iterations = iters;
        cfg.batch = batch;
        cfg.lr = lr;
        cfg.crop_frames = 1;
        cfg.t_min = tmin;
        let t0 = std::time::Instant::now();
        let out = pretrain(&mut net, &data, &sched, &cfg, &root.substream("train")).unwrap();
        let mut erng = root.substream("eval");
        let mut worst: f64 = 0.0;
        let mut total = 0.0;
        let mut n = 0;
        for k in 0..8 {
            let t = 0.2 + 0.1 * k as f64;
            let x0 = bench.sample(50, &mut erng);
            let eps = randn(&[50, 2], &mut erng);
            let xt = difftts::sde::forward_marginal(&x0, t, &eps, &sched).unwrap();
            let got = net.score(&xt, t, Condition::Speaker(&e)).unwrap();
            let want = bench.score(&xt, t, &sched);
            let mae: f64 =
                got.sub(&want).data().iter().map(|v| v.abs()).sum::<f64>() / got.numel() as f64;
            print!(" t{t:.1}:{mae:.3}");
            worst = worst.max(mae);
            total += mae;
            n += 1;
        }
        println!(
            "\nlr={lr} iters={iters} tmin={tmin}: mean MAE {:.4}, worst {:.4}, loss {:.3}->{:.3}, {} ms",
            total / n as f64,
            worst,
            out.report.losses[0],
            out.report.losses.last().unwrap(),
            t0.elapsed().as_millis()
        );
    }
}
