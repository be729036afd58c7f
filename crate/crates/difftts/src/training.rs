//! Training protocols for the score model: denoising pretraining, the
//! classifier-free stage with 50% condition dropout, and low-rate
//! fine-tuning on a single reference with a fresh optimizer.
//!
//! The denoising loss corrupts x0 to x_t = α·x0 + ε_t with ε_t ~ N(0, λI)
//! and regresses the model output onto −λ⁻¹ε_t, the conditional score of
//! the corruption kernel, so the minimizer is the marginal score that the
//! reverse sampler consumes. Times are drawn uniformly on (t_min, 1];
//! the λ⁻¹ factor diverges at t = 0, so the cutoff is configurable.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::nn::{grads_by_name, param_checksum};
use crate::numerics::{randn, AdamState, Rng, Tape, Tensor, Var};
use crate::score::{Condition, ConditionalScoreNet, ScoreError, ScoreNetVars};
use crate::sde::NoiseSchedule;
use thiserror::Error;

/// A score estimator the denoising loss can differentiate through: it
/// binds its parameters onto a tape, runs a forward pass over bound
/// variables, and names the bound parameters for gradient extraction.
/// Implemented by the production network and by analytic test oracles.
pub trait TrainableScore {
    type Vars;
    fn bind_vars(&self, tape: &Tape) -> Self::Vars;
    fn forward_vars(
        &self,
        tape: &Tape,
        vars: &Self::Vars,
        x: &Var,
        t: f64,
        cond: Condition,
    ) -> Result<Var, ScoreError>;
    fn bound_vars(&self, vars: &Self::Vars) -> Vec<(String, Var)>;
}

impl TrainableScore for ConditionalScoreNet {
    type Vars = ScoreNetVars;

    fn bind_vars(&self, tape: &Tape) -> ScoreNetVars {
        self.bind(tape)
    }

    fn forward_vars(
        &self,
        tape: &Tape,
        vars: &ScoreNetVars,
        x: &Var,
        t: f64,
        cond: Condition,
    ) -> Result<Var, ScoreError> {
        self.forward(tape, vars, x, t, cond)
    }

    fn bound_vars(&self, vars: &ScoreNetVars) -> Vec<(String, Var)> {
        self.bound_params(vars)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error("training diverged: loss above 10x the initial value for 100 consecutive steps (iteration {0})")]
    Diverged(usize),
    #[error("optimizer error: {0}")]
    Adam(#[from] crate::numerics::AdamError),
    #[error("score error: {0}")]
    Score(#[from] crate::score::ScoreError),
    #[error("sde error: {0}")]
    Sde(#[from] crate::sde::SdeError),
    #[error("fine-tuning with reset_optimizer=false requires a prior optimizer state")]
    MissingOptimizerState,
    #[error("empty dataset")]
    EmptyDataset,
}

/// Training stages of the score model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    PretrainConditional,
    CfgStage,
    Finetune,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Stage> {
        Some(match s {
            "pretrain_conditional" => Stage::PretrainConditional,
            "cfg_stage" => Stage::CfgStage,
            "finetune" => Stage::Finetune,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::PretrainConditional => "pretrain_conditional",
            Stage::CfgStage => "cfg_stage",
            Stage::Finetune => "finetune",
        }
    }

    pub fn default_lr(&self) -> f64 {
        match self {
            Stage::Finetune => 2e-5,
            _ => 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
    /// Null-embedding replacement probability (cfg stage).
    pub dropout_p: f64,
    /// Fine-tuning starts from a fresh optimizer unless disabled.
    pub reset_optimizer: bool,
    /// Fixed crop length for batch elements.
    pub crop_frames: usize,
    /// Lower cutoff for the uniform draw of t.
    pub t_min: f64,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            lr: stage.default_lr(),
            iterations: match stage {
                Stage::Finetune => 500,
                _ => 2000,
            },
            batch: 16,
            dropout_p: 0.5,
            reset_optimizer: true,
            crop_frames: 32,
            t_min: 1e-4,
        }
    }

    pub fn validate(&self) {
        assert!(self.lr >= 0.0, "lr must be non-negative");
        assert!((0.0..=1.0).contains(&self.dropout_p), "dropout_p in [0,1]");
        assert!(self.batch >= 1 && self.crop_frames >= 1);
        assert!(self.t_min > 0.0 && self.t_min < 1.0);
    }
}

/// Per-run record: the loss trace, wall time, and a parameter checksum.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub wall_ms: u128,
    pub final_checksum: u32,
    /// Samples whose condition was replaced by the null embedding.
    pub null_replacements: usize,
    /// Total conditioned samples seen.
    pub samples_total: usize,
}

impl TrainReport {
    /// Median of the last 10% of the trace against the first 10%.
    pub fn median_improved(&self) -> bool {
        if self.losses.len() < 20 {
            return !self.losses.is_empty()
                && self.losses.last().unwrap() < self.losses.first().unwrap();
        }
        let k = (self.losses.len() / 10).max(1);
        median(&self.losses[self.losses.len() - k..]) < median(&self.losses[..k])
    }

    /// CSV rows: iteration, loss, wall_ms (cumulative wall time is not
    /// tracked per step; the total is repeated on the last row).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,wall_ms\n");
        for (i, l) in self.losses.iter().enumerate() {
            let ms = if i + 1 == self.losses.len() { self.wall_ms } else { 0 };
            out.push_str(&format!("{i},{l},{ms}\n"));
        }
        out
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Training outcome: the report plus the optimizer state, which a later
/// stage may load instead of resetting.
pub struct TrainOutcome {
    pub report: TrainReport,
    pub optimizer: AdamState,
}

/// One batch element: frames with their conditioning embedding.
#[derive(Clone)]
pub struct TrainItem {
    pub frames: Tensor,
    pub embedding: Tensor,
}

/// Batch condition resolved for one sample.
enum BatchCond {
    Speaker(Tensor),
    Null,
}

/// Denoising score loss over an explicit batch. Returns the scalar loss
/// and parameter gradients (including the null vector when drawn).
///
/// Each element draws its own t ~ U(t_min, 1] from `rng`'s "t" stream and
/// its own noise from the "noise" stream.
pub fn score_loss<M: TrainableScore>(
    model: &M,
    batch: &[(Tensor, Condition)],
    schedule: &NoiseSchedule,
    t_min: f64,
    rng: &Rng,
) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    score_loss_weighted(model, batch, schedule, t_min, false, rng)
}

/// The score loss with optional per-sample λ(t) weighting.
///
/// Per (x_t, t) the minimizer is unchanged by any positive weight: the
/// conditional mean of −λ⁻¹ε_t given x_t is the marginal score either
/// way. Weighting by λ(t) turns the regression residual into a standard
/// normal at every t, which keeps gradient variance bounded near t = 0;
/// the training loops use it for that reason.
pub fn score_loss_weighted<M: TrainableScore>(
    model: &M,
    batch: &[(Tensor, Condition)],
    schedule: &NoiseSchedule,
    t_min: f64,
    weight_by_lambda: bool,
    rng: &Rng,
) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    let mut t_rng = rng.substream("t");
    let mut noise_rng = rng.substream("noise");
    let tape = Tape::new();
    let vars = model.bind_vars(&tape);
    let mut total = None;
    for (x0, cond) in batch {
        let t = t_min + (1.0 - t_min) * t_rng.uniform();
        let lambda = schedule.lambda(t)?;
        let alpha = schedule.mean_coeff(t)?;
        let z = randn(x0.shape(), &mut noise_rng);
        // Corruption noise ε_t ~ N(0, λI); target is −λ⁻¹ε_t.
        let eps = z.scale(lambda.sqrt());
        let xt = x0.scale(alpha).add(&eps);
        let xv = tape.constant(xt);
        let out = model.forward_vars(&tape, &vars, &xv, t, *cond)?;
        let target = tape.constant(eps.scale(1.0 / lambda));
        let mut sq = out.add(&target).square().sum();
        if weight_by_lambda {
            sq = sq.scale(lambda);
        }
        total = Some(match total {
            Some(acc) => sq.add(&acc),
            None => sq,
        });
    }
    let loss = total.ok_or(TrainError::EmptyDataset)?.scale(1.0 / batch.len() as f64);
    let loss_value = loss.value().item();
    if !loss_value.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            iteration: 0,
            loss: loss_value,
        });
    }
    let grads = loss.backward().expect("scalar loss");
    let named = grads_by_name(&model.bound_vars(&vars), &grads);
    // A never-drawn null embedding contributes no gradient; drop the
    // zero entry so the optimizer skips it (see numerics::adam).
    let named = prune_untouched_null(named, batch);
    Ok((loss_value, named))
}

fn prune_untouched_null(
    mut named: BTreeMap<String, Tensor>,
    batch: &[(Tensor, Condition)],
) -> BTreeMap<String, Tensor> {
    let any_null = batch.iter().any(|(_, c)| matches!(c, Condition::Null));
    if !any_null {
        named.remove("score.null_w");
    }
    named
}

fn random_crop(frames: &Tensor, crop: usize, rng: &mut Rng) -> Tensor {
    let rows = frames.rows();
    if rows <= crop {
        return frames.clone();
    }
    let start = rng.below(rows - crop + 1);
    let cols = frames.cols();
    let mut data = Vec::with_capacity(crop * cols);
    for r in start..start + crop {
        data.extend_from_slice(frames.row(r));
    }
    Tensor::from_vec(&[crop, cols], data)
}

/// Shared loop for the pretraining and cfg stages.
fn run_stage(
    model: &mut ConditionalScoreNet,
    data: &[TrainItem],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &Rng,
    mut optimizer: AdamState,
) -> Result<TrainOutcome, TrainError> {
    config.validate();
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    let mut data_rng = rng.substream("data");
    let mut dropout_rng = rng.substream("dropout");
    let mut losses = Vec::with_capacity(config.iterations);
    let mut over_initial = 0usize;
    let mut null_replacements = 0usize;
    let mut samples_total = 0usize;
    for iter in 0..config.iterations {
        let mut batch: Vec<(Tensor, BatchCond)> = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let item = &data[data_rng.below(data.len())];
            let crop = random_crop(&item.frames, config.crop_frames, &mut data_rng);
            let cond = match config.stage {
                // Per-sample i.i.d. replacement with the null embedding.
                Stage::CfgStage if dropout_rng.bernoulli(config.dropout_p) => BatchCond::Null,
                _ => BatchCond::Speaker(item.embedding.clone()),
            };
            samples_total += 1;
            if matches!(cond, BatchCond::Null) {
                null_replacements += 1;
            }
            batch.push((crop, cond));
        }
        let batch_ref: Vec<(Tensor, Condition)> = batch
            .iter()
            .map(|(x, c)| {
                (
                    x.clone(),
                    match c {
                        BatchCond::Speaker(e) => Condition::Speaker(e),
                        BatchCond::Null => Condition::Null,
                    },
                )
            })
            .collect();
        let step_rng = rng.substream_indexed("loss", iter as u64);
        let (loss, grads) =
            score_loss_weighted(model, &batch_ref, schedule, config.t_min, true, &step_rng)
                .map_err(|e| match e {
                TrainError::NonFiniteLoss { loss, .. } => TrainError::NonFiniteLoss {
                    iteration: iter,
                    loss,
                },
                other => other,
            })?;
        losses.push(loss);
        if loss > 10.0 * losses[0] {
            over_initial += 1;
            if over_initial >= 100 {
                return Err(TrainError::Diverged(iter));
            }
        } else {
            over_initial = 0;
        }
        let mut slots: Vec<(String, &mut Tensor)> = model.named_params_mut();
        let names: Vec<String> = slots.iter().map(|(n, _)| n.clone()).collect();
        let mut pairs: Vec<(&str, &mut Tensor)> = slots
            .iter_mut()
            .zip(names.iter())
            .map(|((_, t), n)| (n.as_str(), &mut **t))
            .collect();
        optimizer.step(&mut pairs, &grads)?;
    }
    let checksum = param_checksum(&model.named_params());
    Ok(TrainOutcome {
        report: TrainReport {
            losses,
            wall_ms: start.elapsed().as_millis(),
            final_checksum: checksum,
            null_replacements,
            samples_total,
        },
        optimizer,
    })
}

/// Conditional denoising pretraining: every sample keeps its real
/// speaker embedding.
pub fn pretrain(
    model: &mut ConditionalScoreNet,
    data: &[TrainItem],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &Rng,
) -> Result<TrainOutcome, TrainError> {
    assert_eq!(config.stage, Stage::PretrainConditional);
    let optimizer = AdamState::new(config.lr);
    run_stage(model, data, schedule, config, rng, optimizer)
}

/// Classifier-free stage: per-sample Bernoulli(dropout_p) replacement of
/// the speaker embedding with the trainable null embedding, continuing
/// from the pretrained weights.
pub fn cfg_stage(
    model: &mut ConditionalScoreNet,
    data: &[TrainItem],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &Rng,
) -> Result<TrainOutcome, TrainError> {
    assert_eq!(config.stage, Stage::CfgStage);
    let optimizer = AdamState::new(config.lr);
    run_stage(model, data, schedule, config, rng, optimizer)
}

/// Fine-tunes on reference frames with the condition frozen to the
/// embedding extracted once from the reference. Batches are random crops
/// of the reference. Runs exactly `config.iterations` steps; with
/// `reset_optimizer` the optimizer starts fresh, otherwise `prior`
/// (typically loaded from a checkpoint) continues.
pub fn finetune(
    model: &mut ConditionalScoreNet,
    reference_frames: &[Tensor],
    reference_embedding: &Tensor,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    prior: Option<AdamState>,
    rng: &Rng,
) -> Result<TrainOutcome, TrainError> {
    assert_eq!(config.stage, Stage::Finetune);
    if reference_frames.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let optimizer = if config.reset_optimizer {
        AdamState::new(config.lr)
    } else {
        let mut state = prior.ok_or(TrainError::MissingOptimizerState)?;
        state.lr = config.lr;
        state
    };
    let data: Vec<TrainItem> = reference_frames
        .iter()
        .map(|f| TrainItem {
            frames: f.clone(),
            embedding: reference_embedding.clone(),
        })
        .collect();
    // No dropout during fine-tuning: only the conditional score for the
    // target speaker is trained.
    let mut cfg = config.clone();
    cfg.dropout_p = 0.0;
    cfg.stage = Stage::PretrainConditional;
    let out = run_stage(model, &data, schedule, &cfg, rng, optimizer);
    out
}
