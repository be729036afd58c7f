//! Experiment orchestration: the pretraining pipeline, per-cell
//! evaluation (optional fine-tuning, synthesis, metrics), and the
//! append-safe metrics CSV.

use std::io::Write;
use std::path::Path;

use crate::aux_models::classifier::{train_classifier, ClassifierTrainConfig};
use crate::aux_models::duration::{train_duration, DurationTrainConfig};
use crate::aux_models::encoder::{cosine, train_encoder, EncoderTrainConfig};
use crate::guidance::GuidanceConfig;
use crate::harness::{Config, HarnessError, ModelBundle};
use crate::numerics::{AdamState, Rng, Tensor};
use crate::score::ConditionalScoreNet;
use crate::sde::{NoiseSchedule, ReverseSamplerConfig};
use crate::synthesis::{frame_error_rate, synthesize, ModelSet, SynthesisRequest};
use crate::toyworld::{ToyWorld, Utterance};
use crate::training::{cfg_stage, finetune, pretrain, Stage, TrainConfig, TrainReport};

/// Renders the training split described by the config.
pub fn render_training_split(
    world: &ToyWorld,
    cfg: &Config,
    rng: &Rng,
) -> Result<Vec<Utterance>, HarnessError> {
    let per_speaker = cfg.get_usize("utterances_per_speaker", 40)?;
    let min_ph = cfg.get_usize("min_phonemes", 4)?;
    let max_ph = cfg.get_usize("max_phonemes", 8)?;
    let mut out = Vec::new();
    let mut rrng = rng.substream("gen.train");
    for s in world.train_speakers() {
        for _ in 0..per_speaker {
            let seq = world.random_phonemes(min_ph, max_ph, &mut rrng);
            out.push(world.render(s, &seq, &mut rrng)?);
        }
    }
    Ok(out)
}

/// Renders reference utterances for every held-out speaker.
pub fn render_reference_split(
    world: &ToyWorld,
    cfg: &Config,
    rng: &Rng,
) -> Result<Vec<Utterance>, HarnessError> {
    let min_ph = cfg.get_usize("min_phonemes", 4)?.max(6);
    let max_ph = cfg.get_usize("max_phonemes", 8)?.max(10);
    let mut out = Vec::new();
    let mut rrng = rng.substream("gen.reference");
    for s in world.holdout_speakers() {
        for _ in 0..2 {
            let seq = world.random_phonemes(min_ph, max_ph, &mut rrng);
            out.push(world.render(s, &seq, &mut rrng)?);
        }
    }
    Ok(out)
}

/// Pairs utterances with conditioning embeddings per the config's
/// `speaker_encoder` choice ("oracle" is the default).
pub fn attach_embeddings(
    world: &ToyWorld,
    bundle: &ModelBundle,
    cfg: &Config,
    utterances: &[Utterance],
) -> Result<Vec<(Utterance, Tensor)>, HarnessError> {
    let choice = cfg.get_str("speaker_encoder", "oracle");
    let mut out = Vec::with_capacity(utterances.len());
    for utt in utterances {
        let e = match choice {
            "oracle" => world.oracle_embedding(utt.speaker)?,
            "trained" => bundle.encoder.encode_frames(&utt.frames)?,
            other => {
                return Err(HarnessError::Invalid(format!(
                    "unknown speaker_encoder '{other}'"
                )))
            }
        };
        out.push((utt.clone(), e));
    }
    Ok(out)
}

/// Embedding used to condition synthesis / fine-tuning on a reference.
pub fn reference_embedding(
    world: &ToyWorld,
    bundle: &ModelBundle,
    cfg: &Config,
    reference: &Utterance,
) -> Result<Tensor, HarnessError> {
    match cfg.get_str("speaker_encoder", "oracle") {
        "oracle" => Ok(world.oracle_embedding(reference.speaker)?),
        "trained" => Ok(bundle.encoder.encode_frames(&reference.frames)?),
        other => Err(HarnessError::Invalid(format!(
            "unknown speaker_encoder '{other}'"
        ))),
    }
}

/// Trains every auxiliary model plus the conditional score pretraining
/// stage. The bundle's optimizer afterwards holds the score optimizer.
pub fn train_bundle(
    bundle: &mut ModelBundle,
    world: &ToyWorld,
    data: &[(Utterance, Tensor)],
    cfg: &Config,
    schedule: &NoiseSchedule,
    rng: &Rng,
) -> Result<TrainReport, HarnessError> {
    // Guidance classifier on corrupted inputs.
    let clf_cfg = ClassifierTrainConfig {
        iterations: cfg.get_usize("classifier_iterations", 2000)?,
        clean_only: false,
        ..Default::default()
    };
    train_classifier(
        &mut bundle.classifier,
        data,
        schedule,
        &clf_cfg,
        &rng.substream("train.classifier"),
    )?;
    // Clean evaluation decoder.
    let eval_cfg = ClassifierTrainConfig {
        iterations: cfg.get_usize("eval_classifier_iterations", 1500)?,
        clean_only: true,
        ..Default::default()
    };
    train_classifier(
        &mut bundle.eval_classifier,
        data,
        schedule,
        &eval_cfg,
        &rng.substream("train.eval_classifier"),
    )?;
    // Duration predictor.
    let dur_cfg = DurationTrainConfig {
        iterations: cfg.get_usize("duration_iterations", 1500)?,
        ..Default::default()
    };
    train_duration(
        &mut bundle.duration,
        data,
        &dur_cfg,
        &rng.substream("train.duration"),
    )?;
    // Speaker encoder.
    let enc_cfg = EncoderTrainConfig {
        iterations: cfg.get_usize("encoder_iterations", 1200)?,
        ..Default::default()
    };
    train_encoder(
        &mut bundle.encoder,
        world,
        &enc_cfg,
        &rng.substream("train.encoder"),
    )?;
    // Conditional score pretraining.
    let mut train_cfg = TrainConfig::for_stage(Stage::PretrainConditional);
    train_cfg.iterations = cfg.get_usize("pretrain_iterations", 4000)?;
    train_cfg.lr = cfg.get_f64("lr", train_cfg.lr)?;
    train_cfg.batch = cfg.get_usize("batch", train_cfg.batch)?;
    train_cfg.crop_frames = cfg.get_usize("crop_frames", 24)?;
    train_cfg.t_min = cfg.get_f64("t_min", 0.02)?;
    let items: Vec<crate::training::TrainItem> = data
        .iter()
        .map(|(u, e)| crate::training::TrainItem {
            frames: u.frames.clone(),
            embedding: e.clone(),
        })
        .collect();
    let outcome = pretrain(
        &mut bundle.score,
        &items,
        schedule,
        &train_cfg,
        &rng.substream("train.score"),
    )?;
    bundle.optimizer = Some(outcome.optimizer.clone());
    Ok(outcome.report)
}

/// Continues the score model with the classifier-free stage.
pub fn run_cfg_stage(
    bundle: &mut ModelBundle,
    data: &[(Utterance, Tensor)],
    cfg: &Config,
    schedule: &NoiseSchedule,
    rng: &Rng,
) -> Result<TrainReport, HarnessError> {
    let mut train_cfg = TrainConfig::for_stage(Stage::CfgStage);
    train_cfg.iterations = cfg.get_usize("cfg_iterations", 2500)?;
    train_cfg.lr = cfg.get_f64("lr", train_cfg.lr)?;
    train_cfg.batch = cfg.get_usize("batch", train_cfg.batch)?;
    train_cfg.crop_frames = cfg.get_usize("crop_frames", 24)?;
    train_cfg.t_min = cfg.get_f64("t_min", 0.02)?;
    train_cfg.dropout_p = cfg.get_f64("dropout_p", 0.5)?;
    let items: Vec<crate::training::TrainItem> = data
        .iter()
        .map(|(u, e)| crate::training::TrainItem {
            frames: u.frames.clone(),
            embedding: e.clone(),
        })
        .collect();
    let outcome = cfg_stage(
        &mut bundle.score,
        &items,
        schedule,
        &train_cfg,
        &rng.substream("train.cfg"),
    )?;
    bundle.optimizer = Some(outcome.optimizer.clone());
    Ok(outcome.report)
}

/// Fine-tunes a copy of the bundle's score model on reference frames.
pub fn finetune_score(
    bundle: &ModelBundle,
    reference_frames: &[Tensor],
    embedding: &Tensor,
    cfg: &Config,
    schedule: &NoiseSchedule,
    iterations: usize,
    reset_optimizer: bool,
    rng: &Rng,
) -> Result<(ConditionalScoreNet, TrainReport, AdamState), HarnessError> {
    let mut model = bundle.score.clone();
    let mut train_cfg = TrainConfig::for_stage(Stage::Finetune);
    train_cfg.iterations = iterations;
    train_cfg.lr = cfg.get_f64("lr", train_cfg.lr)?;
    train_cfg.batch = cfg.get_usize("batch", 8)?;
    train_cfg.crop_frames = cfg.get_usize("crop_frames", 32)?;
    train_cfg.t_min = cfg.get_f64("t_min", 0.02)?;
    train_cfg.reset_optimizer = reset_optimizer;
    let prior = if reset_optimizer {
        None
    } else {
        Some(bundle.optimizer.clone().ok_or_else(|| {
            HarnessError::Invalid("checkpoint has no optimizer state to load".to_string())
        })?)
    };
    let outcome = finetune(
        &mut model,
        reference_frames,
        embedding,
        schedule,
        &train_cfg,
        prior,
        rng,
    )?;
    Ok((model, outcome.report, outcome.optimizer))
}

/// Draws the evaluation sentences shared by every cell of an experiment.
pub fn evaluation_sentences(
    cfg: &Config,
    classes: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, HarnessError> {
    if let Some(explicit) = cfg.get("synthesis_phonemes") {
        let ids: Vec<usize> = explicit
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| HarnessError::Invalid("bad synthesis_phonemes".to_string()))?;
        return Ok(vec![ids]);
    }
    let runs = cfg.get_usize("synthesis_runs", 5)?;
    let min_ph = cfg.get_usize("min_phonemes", 4)?;
    let max_ph = cfg.get_usize("max_phonemes", 8)?;
    let root = Rng::new(seed);
    Ok((0..runs)
        .map(|r| {
            let mut rng = root.substream_indexed("sentences", r as u64);
            let len = min_ph + rng.below(max_ph - min_ph + 1);
            (0..len).map(|_| rng.below(classes)).collect()
        })
        .collect())
}

/// Synthesizes every sentence with the given score model and averages
/// the pronunciation and similarity proxies.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    score: &dyn crate::score::ScoreModel,
    bundle: &ModelBundle,
    cond_embedding: &Tensor,
    metric_reference: &Tensor,
    guidance: GuidanceConfig,
    sampler: &ReverseSamplerConfig,
    schedule: &NoiseSchedule,
    sentences: &[Vec<usize>],
    seed: u64,
) -> Result<(f64, f64), HarnessError> {
    let root = Rng::new(seed);
    let mut err_acc = 0.0;
    let mut sim_acc = 0.0;
    for (run, sentence) in sentences.iter().enumerate() {
        let request = SynthesisRequest {
            phonemes: sentence.clone(),
            speaker_embedding: cond_embedding.clone(),
            guidance,
            sampler: sampler.clone(),
            schedule: *schedule,
            models: ModelSet {
                score,
                classifier: &bundle.classifier,
                duration: &bundle.duration,
            },
            adapted_model: false,
        };
        let mut rng = root.substream_indexed("synth", run as u64);
        let out = synthesize(&request, &mut rng)?;
        let decoded = bundle
            .eval_classifier
            .decode_frames(&out.frames, 0.0, cond_embedding)?;
        err_acc += frame_error_rate(&decoded, &out.frame_labels);
        let e = bundle.encoder.encode_frames(&out.frames)?;
        sim_acc += cosine(&e, metric_reference);
    }
    let n = sentences.len() as f64;
    Ok((err_acc / n, sim_acc / n))
}

/// Optimizer arm of a fine-tuning cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerArm {
    Init,
    Load,
    /// Not applicable (no fine-tuning in this cell).
    None,
}

impl OptimizerArm {
    pub fn label(&self) -> &'static str {
        match self {
            OptimizerArm::Init => "init",
            OptimizerArm::Load => "load",
            OptimizerArm::None => "-",
        }
    }
}

/// One grid cell.
#[derive(Clone, Debug)]
pub struct CellSpec {
    pub experiment: String,
    pub gamma_s: f64,
    pub gamma_t: f64,
    pub iterations: usize,
    pub optimizer: OptimizerArm,
}

/// Fine-tuning-iterations grid: iterations × optimizer arm.
pub fn finetune_grid_cells(cfg: &Config) -> Result<Vec<CellSpec>, HarnessError> {
    let iterations = cfg.get_usize_list("experiment_iterations", &[0, 50, 200, 500, 2000])?;
    let arms_raw = cfg.get_str("experiment_optimizer", "init,load");
    let gamma_s = cfg.get_f64("gamma_s", 1.0)?;
    let gamma_t = cfg.get_f64("gamma_t", 0.3)?;
    let mut arms = Vec::new();
    for a in arms_raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        arms.push(match a {
            "init" => OptimizerArm::Init,
            "load" => OptimizerArm::Load,
            other => {
                return Err(HarnessError::Invalid(format!(
                    "unknown optimizer arm '{other}'"
                )))
            }
        });
    }
    let mut cells = Vec::new();
    for &iters in &iterations {
        for &arm in &arms {
            // Iterations 0 is the zero-shot row; the optimizer arm is
            // irrelevant there, keep only one copy.
            if iters == 0 && arm != arms[0] {
                continue;
            }
            cells.push(CellSpec {
                experiment: "ft_grid".to_string(),
                gamma_s,
                gamma_t,
                iterations: iters,
                optimizer: if iters == 0 { OptimizerArm::None } else { arm },
            });
        }
    }
    Ok(cells)
}

/// Speaker-scale sweep grid.
pub fn gamma_sweep_cells(cfg: &Config) -> Result<Vec<CellSpec>, HarnessError> {
    let gammas = cfg.get_f64_list("sweep_gamma_s", &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0])?;
    let gamma_t = cfg.get_f64("gamma_t", 0.3)?;
    Ok(gammas
        .into_iter()
        .map(|g| CellSpec {
            experiment: "gamma_sweep".to_string(),
            gamma_s: g,
            gamma_t,
            iterations: 0,
            optimizer: OptimizerArm::None,
        })
        .collect())
}

pub const METRICS_HEADER: &str =
    "experiment,gamma_s,gamma_t,iterations,reset_optimizer,frame_error,similarity,seed";

/// One metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub experiment: String,
    pub gamma_s: f64,
    pub gamma_t: f64,
    pub iterations: usize,
    pub reset_optimizer: &'static str,
    pub frame_error: f64,
    pub similarity: f64,
    pub seed: u64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.experiment,
            self.gamma_s,
            self.gamma_t,
            self.iterations,
            self.reset_optimizer,
            self.frame_error,
            self.similarity,
            self.seed
        )
    }
}

/// Runs a grid of cells and appends rows to the metrics CSV as they
/// complete, so a failing cell leaves earlier rows on disk. Deterministic
/// for a fixed (config, seed): all randomness is derived from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    bundle: &ModelBundle,
    world: &ToyWorld,
    reference: &[Utterance],
    cfg: &Config,
    cells: &[CellSpec],
    seed: u64,
    out_path: &Path,
) -> Result<Vec<MetricsRow>, HarnessError> {
    if reference.is_empty() {
        return Err(HarnessError::Invalid("no reference utterances".to_string()));
    }
    let schedule = crate::harness::schedule_from_config(cfg)?;
    let sampler = crate::harness::sampler_from_config(cfg)?;
    let base_guidance = crate::harness::guidance_from_config(cfg)?;
    let cond_embedding = reference_embedding(world, bundle, cfg, &reference[0])?;
    let metric_reference = bundle.encoder.encode_frames(&reference[0].frames)?;
    let sentences = evaluation_sentences(cfg, bundle.classifier.config.classes, seed)?;
    let reference_frames: Vec<Tensor> = reference.iter().map(|u| u.frames.clone()).collect();

    let mut file = open_metrics(out_path)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let guidance = GuidanceConfig {
            gamma_s: cell.gamma_s,
            gamma_t: cell.gamma_t,
            mode: base_guidance.mode,
        };
        let (frame_error, similarity) = if cell.iterations == 0 {
            evaluate_model(
                &bundle.score,
                bundle,
                &cond_embedding,
                &metric_reference,
                guidance,
                &sampler,
                &schedule,
                &sentences,
                seed,
            )?
        } else {
            let arm_idx = match cell.optimizer {
                OptimizerArm::Load => 1u64,
                _ => 0u64,
            };
            let ft_rng = Rng::new(seed).substream_indexed("finetune", arm_idx);
            let (model, _, _) = finetune_score(
                bundle,
                &reference_frames,
                &cond_embedding,
                cfg,
                &schedule,
                cell.iterations,
                cell.optimizer != OptimizerArm::Load,
                &ft_rng,
            )?;
            evaluate_model(
                &model,
                bundle,
                &cond_embedding,
                &metric_reference,
                guidance,
                &sampler,
                &schedule,
                &sentences,
                seed,
            )?
        };
        let row = MetricsRow {
            experiment: cell.experiment.clone(),
            gamma_s: cell.gamma_s,
            gamma_t: cell.gamma_t,
            iterations: cell.iterations,
            reset_optimizer: cell.optimizer.label(),
            frame_error,
            similarity,
            seed,
        };
        writeln!(file, "{}", row.to_csv_line())?;
        file.flush()?;
        rows.push(row);
    }
    Ok(rows)
}

fn open_metrics(path: &Path) -> Result<std::fs::File, HarnessError> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(file, "{METRICS_HEADER}")?;
    }
    Ok(file)
}
