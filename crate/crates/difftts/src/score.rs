//! Score models: an analytic Gaussian oracle for verification and a
//! trainable speaker-conditional score network.
//!
//! The network is a frame-local residual MLP with kernel-3 temporal
//! convolutions. Conditioning enters once, by concatenating sinusoidal
//! time features and the (speaker or null) embedding to every frame. The
//! same parameter set serves conditional and unconditional calls: passing
//! no speaker selects the trainable null embedding.

use crate::nn::{time_features, ConvBlock, ConvBlockVars, Linear, LinearVars, TIME_FEATURES};
use crate::numerics::{randn, Rng, Tape, Tensor, Var};
use crate::sde::NoiseSchedule;
use crate::toyworld::GaussianBenchmark;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("embedding has dimension {got}, model expects {want}")]
    EmbeddingDim { want: usize, got: usize },
    #[error("input has {got} channels, model expects {want}")]
    ChannelDim { want: usize, got: usize },
    #[error("null embedding collapsed (norm {0:.3e}); reinitialize it")]
    NullCollapsed(f64),
}

/// Condition passed to a score model.
#[derive(Clone, Copy)]
pub enum Condition<'a> {
    /// Unit-norm speaker embedding.
    Speaker(&'a Tensor),
    /// The model's own null embedding (unconditional branch).
    Null,
}

/// Anything that can produce a score estimate for a diffusion state.
pub trait ScoreModel {
    fn score(&self, x: &Tensor, t: f64, cond: Condition) -> Result<Tensor, ScoreError>;
}

/// Analytic score of the forward marginal of N(m, σ0²I) data; the
/// verification oracle for samplers and training.
#[derive(Clone, Debug)]
pub struct GaussianOracleScore {
    pub bench: GaussianBenchmark,
    pub schedule: NoiseSchedule,
}

impl GaussianOracleScore {
    pub fn new(mean: Vec<f64>, sigma0: f64, schedule: NoiseSchedule) -> GaussianOracleScore {
        GaussianOracleScore {
            bench: GaussianBenchmark::new(mean, sigma0),
            schedule,
        }
    }
}

impl ScoreModel for GaussianOracleScore {
    fn score(&self, x: &Tensor, t: f64, _cond: Condition) -> Result<Tensor, ScoreError> {
        Ok(self.bench.score(x, t, &self.schedule))
    }
}

/// Score model defined by a closure; handy for analytic conditionals.
pub struct FnScore<F>(pub F);

impl<F> ScoreModel for FnScore<F>
where
    F: Fn(&Tensor, f64, Condition) -> Tensor,
{
    fn score(&self, x: &Tensor, t: f64, cond: Condition) -> Result<Tensor, ScoreError> {
        Ok((self.0)(x, t, cond))
    }
}

/// Trainable raw vector behind the unit-norm null embedding e = w/‖w‖.
#[derive(Clone, Debug)]
pub struct NullEmbedding {
    pub w: Tensor,
}

impl NullEmbedding {
    pub fn new(dim: usize, rng: &mut Rng) -> NullEmbedding {
        NullEmbedding {
            w: randn(&[dim], rng),
        }
    }

    /// Current unit-norm value. Signals collapse instead of dividing by
    /// a vanishing norm.
    pub fn value(&self) -> Result<Tensor, ScoreError> {
        let n = self.w.l2_norm();
        if n < 1e-12 {
            return Err(ScoreError::NullCollapsed(n));
        }
        Ok(self.w.scale(1.0 / n))
    }

    pub fn reinitialize(&mut self, rng: &mut Rng) {
        self.w = randn(&[self.w.numel()], rng);
    }

    /// Normalization on tape; gradients flow through the norm.
    pub fn normalized_var(w: &Var) -> Var {
        w.mul_scalar_var(&w.norm().recip())
    }
}

/// Hyperparameters of the conditional score network.
#[derive(Clone, Copy, Debug)]
pub struct ScoreNetConfig {
    pub channels: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        ScoreNetConfig {
            channels: 8,
            embed_dim: 16,
            hidden: 128,
            depth: 4,
        }
    }
}

/// Trainable speaker-conditional score network.
#[derive(Clone, Debug)]
pub struct ConditionalScoreNet {
    pub config: ScoreNetConfig,
    pub input: Linear,
    pub blocks: Vec<ConvBlock>,
    pub output: Linear,
    pub null: NullEmbedding,
}

/// Tape-bound parameters of the score network.
pub struct ScoreNetVars {
    pub input: LinearVars,
    pub blocks: Vec<ConvBlockVars>,
    pub output: LinearVars,
    pub null_w: Var,
}

impl ConditionalScoreNet {
    pub fn new(config: ScoreNetConfig, rng: &mut Rng) -> ConditionalScoreNet {
        let in_dim = config.channels + TIME_FEATURES + config.embed_dim;
        ConditionalScoreNet {
            config,
            input: Linear::new(in_dim, config.hidden, rng),
            blocks: (0..config.depth).map(|_| ConvBlock::new(config.hidden, rng)).collect(),
            output: Linear::new(config.hidden, config.channels, rng),
            null: NullEmbedding::new(config.embed_dim, rng),
        }
    }

    pub fn bind(&self, tape: &Tape) -> ScoreNetVars {
        ScoreNetVars {
            input: self.input.bind(tape),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            output: self.output.bind(tape),
            null_w: tape.leaf(self.null.w.clone()),
        }
    }

    /// Named views of every trainable tensor ("score.*", "score.null_w").
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.input.collect("score.in", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("score.blk{i}"), &mut out);
        }
        self.output.collect("score.out", &mut out);
        out.push(("score.null_w".to_string(), &self.null.w));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.input.collect_mut("score.in", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("score.blk{i}"), &mut out);
        }
        self.output.collect_mut("score.out", &mut out);
        out.push(("score.null_w".to_string(), &mut self.null.w));
        out
    }

    fn check_cond(&self, cond: &Condition) -> Result<(), ScoreError> {
        if let Condition::Speaker(e) = cond {
            if e.numel() != self.config.embed_dim {
                return Err(ScoreError::EmbeddingDim {
                    want: self.config.embed_dim,
                    got: e.numel(),
                });
            }
        }
        Ok(())
    }

    /// Forward pass over bound variables; differentiable in `x` and all
    /// parameters (including the null vector when `cond` is `Null`).
    pub fn forward(
        &self,
        tape: &Tape,
        vars: &ScoreNetVars,
        x: &Var,
        t: f64,
        cond: Condition,
    ) -> Result<Var, ScoreError> {
        self.check_cond(&cond)?;
        let rows = x.shape()[0];
        let tfeat = tape.constant(time_features(t)).broadcast_rows(rows);
        let embed = match cond {
            Condition::Speaker(e) => tape.constant(e.reshape(&[1, self.config.embed_dim])),
            Condition::Null => {
                let n = self.null.w.l2_norm();
                if n < 1e-12 {
                    return Err(ScoreError::NullCollapsed(n));
                }
                NullEmbedding::normalized_var(&vars.null_w)
            }
        };
        let cond_rows = embed.broadcast_rows(rows);
        let h0 = x.concat_cols(&tfeat).concat_cols(&cond_rows);
        let mut h = vars.input.forward(&h0).tanh();
        for blk in &vars.blocks {
            h = blk.forward(&h);
        }
        Ok(vars.output.forward(&h))
    }

    /// Collects (name, var) pairs matching [`Self::named_params`] order.
    pub fn bound_params(&self, vars: &ScoreNetVars) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        vars.input.collect("score.in", &mut out);
        for (i, b) in vars.blocks.iter().enumerate() {
            b.collect(&format!("score.blk{i}"), &mut out);
        }
        vars.output.collect("score.out", &mut out);
        out.push(("score.null_w".to_string(), vars.null_w.clone()));
        out
    }
}

impl ScoreModel for ConditionalScoreNet {
    fn score(&self, x: &Tensor, t: f64, cond: Condition) -> Result<Tensor, ScoreError> {
        if x.cols() != self.config.channels {
            return Err(ScoreError::ChannelDim {
                want: self.config.channels,
                got: x.cols(),
            });
        }
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&tape, &vars, &xv, t, cond)?;
        Ok(out.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn small_net(rng: &mut Rng) -> ConditionalScoreNet {
        ConditionalScoreNet::new(
            ScoreNetConfig {
                channels: 3,
                embed_dim: 4,
                hidden: 8,
                depth: 2,
            },
            rng,
        )
    }

    #[test]
    fn oracle_stationary_case() {
        // m = 0, σ0 = 1: score(x) = −x at every t.
        let oracle = GaussianOracleScore::new(vec![0.0, 0.0], 1.0, NoiseSchedule::default());
        let x = Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 0.1]);
        for &t in &[0.1, 0.5, 1.0] {
            let s = oracle.score(&x, t, Condition::Null).unwrap();
            assert!(s.add(&x).l2_norm() < 1e-12);
        }
    }

    #[test]
    fn oracle_score_zero_at_scaled_mean() {
        let sched = NoiseSchedule::default();
        let oracle = GaussianOracleScore::new(vec![2.0, -1.0], 0.5, sched);
        let t = 0.4;
        let alpha = sched.mean_coeff(t).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![2.0 * alpha, -alpha]);
        let s = oracle.score(&x, t, Condition::Null).unwrap();
        assert!(s.l2_norm() < 1e-12);
    }

    #[test]
    fn oracle_worked_value() {
        // m = 2, σ0 = 0.5, t = 0.5: α = e^{−1.259375} ≈ 0.283831,
        // var = α²·0.25 + (1 − e^{−2.51875}) ≈ 0.939580,
        // score(1) = −(1 − 2α)/var ≈ −0.4601389 (recomputed exactly).
        let sched = NoiseSchedule::default();
        let oracle = GaussianOracleScore::new(vec![2.0], 0.5, sched);
        let s = oracle
            .score(&Tensor::from_vec(&[1, 1], vec![1.0]), 0.5, Condition::Null)
            .unwrap();
        assert!((s.item() + 0.4601389481435876).abs() < 1e-12, "got {}", s.item());
        assert!((s.item() + 0.46).abs() < 2e-3);
    }

    #[test]
    fn oracle_matches_numeric_log_density_gradient() {
        let sched = NoiseSchedule::default();
        let oracle = GaussianOracleScore::new(vec![1.0, -0.5, 0.3], 0.7, sched);
        let x = vec![0.2, 0.8, -1.1];
        let t = 0.6;
        let s = oracle
            .score(&Tensor::from_vec(&[1, 3], x.clone()), t, Condition::Null)
            .unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (oracle.bench.log_density(&xp, t, &sched)
                - oracle.bench.log_density(&xm, t, &sched))
                / (2.0 * h);
            let rel = (fd - s.data()[j]).abs() / s.data()[j].abs().max(1e-9);
            assert!(rel < 1e-6, "dim {j}: rel {rel}");
        }
    }

    #[test]
    fn null_embedding_normalization() {
        let mut w = Tensor::zeros(&[4]);
        w.data_mut()[0] = 3.0;
        w.data_mut()[1] = 4.0;
        let null = NullEmbedding { w };
        let e = null.value().unwrap();
        let want = [0.6, 0.8, 0.0, 0.0];
        for (got, want) in e.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-15);
        }
        // Scale invariance.
        let scaled = NullEmbedding {
            w: null.w.scale(10.0),
        };
        assert!(scaled.value().unwrap().sub(&e).l2_norm() < 1e-15);
        // Unit norm for random vectors.
        let mut rng = Rng::new(4).substream("null");
        for _ in 0..10 {
            let n = NullEmbedding::new(6, &mut rng);
            assert!((n.value().unwrap().l2_norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn null_embedding_collapse_signals() {
        let null = NullEmbedding {
            w: Tensor::zeros(&[4]),
        };
        assert!(matches!(null.value(), Err(ScoreError::NullCollapsed(_))));
    }

    #[test]
    fn net_deterministic_and_finite() {
        let mut rng = Rng::new(7).substream("init");
        let net = small_net(&mut rng);
        let x = Tensor::zeros(&[5, 3]);
        let e = {
            let v = randn(&[4], &mut rng);
            v.scale(1.0 / v.l2_norm())
        };
        let a = net.score(&x, 0.5, Condition::Speaker(&e)).unwrap();
        let b = net.score(&x, 0.5, Condition::Speaker(&e)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.is_finite());
        assert_eq!(a.shape(), x.shape());
        assert!(a.l2_norm() < 100.0);
    }

    #[test]
    fn net_continuous_in_t() {
        let mut rng = Rng::new(8).substream("init");
        let net = small_net(&mut rng);
        let x = randn(&[6, 3], &mut rng);
        let a = net.score(&x, 0.5, Condition::Null).unwrap();
        let b = net.score(&x, 0.5 + 1e-6, Condition::Null).unwrap();
        assert!(a.sub(&b).l2_norm() < 1e-3);
    }

    #[test]
    fn embedding_dim_checked() {
        let mut rng = Rng::new(9).substream("init");
        let net = small_net(&mut rng);
        let bad = Tensor::zeros(&[7]);
        let err = net.score(&Tensor::zeros(&[2, 3]), 0.5, Condition::Speaker(&bad));
        assert!(matches!(err, Err(ScoreError::EmbeddingDim { .. })));
    }
}
