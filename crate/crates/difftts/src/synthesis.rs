//! The adaptive synthesis pipeline: duration prediction, frame-level
//! label expansion, prior sampling, and guided reverse diffusion.

use crate::aux_models::{AuxError, DurationPredictor, PhonemeClassifier};
use crate::guidance::{
    combined_score, norm_based_score, ClassifierGradient, GuidanceConfig, GuidanceDiag,
    GuidanceMode,
};
use crate::numerics::{Rng, Tensor};
use crate::score::{Condition, ScoreError, ScoreModel};
use crate::sde::{reverse_step, sample_prior, NoiseSchedule, ReverseSamplerConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("empty phoneme sequence")]
    EmptyPhonemes,
    #[error("durations length {got} does not match {want} phonemes")]
    DurationLength { want: usize, got: usize },
    #[error("zero duration at phoneme index {0}")]
    ZeroDuration(usize),
    #[error("step {step}: {source}")]
    Step { step: usize, source: ScoreError },
    #[error("aux model error: {0}")]
    Aux(#[from] AuxError),
    #[error("sde error: {0}")]
    Sde(#[from] crate::sde::SdeError),
}

/// Repeats each phoneme by its duration: the frame-level label sequence.
pub fn expand_labels(phonemes: &[usize], durations: &[usize]) -> Result<Vec<usize>, SynthesisError> {
    if phonemes.is_empty() {
        return Err(SynthesisError::EmptyPhonemes);
    }
    if phonemes.len() != durations.len() {
        return Err(SynthesisError::DurationLength {
            want: phonemes.len(),
            got: durations.len(),
        });
    }
    let mut out = Vec::with_capacity(durations.iter().sum());
    for (i, (&p, &d)) in phonemes.iter().zip(durations).enumerate() {
        if d == 0 {
            return Err(SynthesisError::ZeroDuration(i));
        }
        out.extend(std::iter::repeat(p).take(d));
    }
    Ok(out)
}

/// Per-step sampler diagnostics.
#[derive(Clone, Debug)]
pub struct StepDiag {
    pub step: usize,
    pub t: f64,
    pub score_norm: f64,
    pub guidance_term_norm: f64,
    pub classifier_grad_norm: f64,
    pub skipped: bool,
}

/// Model handles used by one synthesis run.
pub struct ModelSet<'a> {
    pub score: &'a dyn ScoreModel,
    pub classifier: &'a PhonemeClassifier,
    pub duration: &'a DurationPredictor,
}

/// One synthesis request. Exactly one speaker representation is used:
/// the embedding extracted from a reference, precomputed by the caller.
pub struct SynthesisRequest<'a> {
    pub phonemes: Vec<usize>,
    pub speaker_embedding: Tensor,
    pub guidance: GuidanceConfig,
    pub sampler: ReverseSamplerConfig,
    pub schedule: NoiseSchedule,
    pub models: ModelSet<'a>,
    /// Metadata: whether the score checkpoint is a fine-tuned one. The
    /// sampling code path is identical either way.
    pub adapted_model: bool,
}

/// Output of a synthesis run.
pub struct Synthesized {
    pub frames: Tensor,
    pub frame_labels: Vec<usize>,
    pub durations: Vec<usize>,
    pub diagnostics: Vec<StepDiag>,
}

/// Runs the full pipeline: predict durations, expand labels, sample the
/// prior at the configured temperature, then N guided reverse steps.
pub fn synthesize(request: &SynthesisRequest, rng: &mut Rng) -> Result<Synthesized, SynthesisError> {
    if request.phonemes.is_empty() {
        return Err(SynthesisError::EmptyPhonemes);
    }
    request.guidance.validate();
    request.sampler.validate();
    let durations = request
        .models
        .duration
        .predict_durations(&request.phonemes, &request.speaker_embedding)?;
    let labels = expand_labels(&request.phonemes, &durations)?;
    let channels = request.models.classifier.config.channels;
    let shape = [labels.len(), channels];
    let mut x = sample_prior(&shape, request.sampler.temperature, rng);
    let n = request.sampler.steps;
    let mut diagnostics = Vec::with_capacity(n);
    for k in (1..=n).rev() {
        let t = k as f64 / n as f64;
        let step_index = n - k;
        let (score, diag) = guided_score(request, &x, t, &labels)
            .map_err(|source| SynthesisError::Step {
                step: step_index,
                source,
            })?;
        diagnostics.push(StepDiag {
            step: step_index,
            t,
            score_norm: diag.cfg_score_norm,
            guidance_term_norm: diag.guidance_term_norm,
            classifier_grad_norm: diag.classifier_grad_norm,
            skipped: diag.skipped,
        });
        let noise = request.sampler.noise_at_every_step || k > 1;
        x = reverse_step(&x, t, &score, &request.schedule, &request.sampler, noise, rng)?;
    }
    Ok(Synthesized {
        frames: x,
        frame_labels: labels,
        durations,
        diagnostics,
    })
}

fn guided_score(
    request: &SynthesisRequest,
    x: &Tensor,
    t: f64,
    labels: &[usize],
) -> Result<(Tensor, GuidanceDiag), ScoreError> {
    let cfg = &request.guidance;
    let e = &request.speaker_embedding;
    let model = request.models.score;
    match cfg.mode {
        GuidanceMode::Combined => {
            combined_score(x, t, e, labels, model, request.models.classifier, cfg)
        }
        GuidanceMode::Cfg => {
            let mut only_cfg = *cfg;
            only_cfg.gamma_t = 0.0;
            combined_score(x, t, e, labels, model, request.models.classifier, &only_cfg)
        }
        GuidanceMode::PlainClassifier => {
            let s = model.score(x, t, Condition::Null)?;
            let grad = request.models.classifier.grad_logp(x, t, e, labels)?;
            let out = crate::guidance::classifier_guided_score(&s, &grad);
            let diag = GuidanceDiag {
                cfg_score_norm: s.l2_norm(),
                guidance_term_norm: grad.l2_norm(),
                classifier_grad_norm: grad.l2_norm(),
                skipped: false,
            };
            Ok((out, diag))
        }
        GuidanceMode::ScaledClassifier => {
            let s = model.score(x, t, Condition::Speaker(e))?;
            let grad = request.models.classifier.grad_logp(x, t, e, labels)?;
            let out = crate::guidance::scaled_classifier_score(&s, &grad, cfg.gamma_t);
            let diag = GuidanceDiag {
                cfg_score_norm: s.l2_norm(),
                guidance_term_norm: out.sub(&s).l2_norm(),
                classifier_grad_norm: grad.l2_norm(),
                skipped: false,
            };
            Ok((out, diag))
        }
        GuidanceMode::NormBased => {
            let s = model.score(x, t, Condition::Speaker(e))?;
            let grad = request.models.classifier.grad_logp(x, t, e, labels)?;
            let guided = norm_based_score(&s, &grad, cfg.gamma_t);
            let diag = GuidanceDiag {
                cfg_score_norm: guided.base_norm,
                guidance_term_norm: guided.score.sub(&s).l2_norm(),
                classifier_grad_norm: guided.grad_norm,
                skipped: guided.skipped,
            };
            Ok((guided.score, diag))
        }
    }
}

/// Fraction of frames whose decoded label disagrees with the target.
pub fn frame_error_rate(decoded: &[usize], target: &[usize]) -> f64 {
    assert_eq!(decoded.len(), target.len());
    if decoded.is_empty() {
        return 0.0;
    }
    let wrong = decoded.iter().zip(target).filter(|(a, b)| a != b).count();
    wrong as f64 / decoded.len() as f64
}

/// One row of a speaker-scale sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub gamma_s: f64,
    pub frame_error: f64,
    pub similarity: f64,
}

/// Interface the sweep uses to score generated samples.
pub struct SweepEvaluator<'a> {
    /// Clean-trained decoder, applied at t = 0.
    pub eval_classifier: &'a PhonemeClassifier,
    /// Embeds generated frames for the similarity proxy.
    pub embed_frames: &'a dyn Fn(&Tensor) -> Tensor,
    /// Reference embedding the similarity is measured against.
    pub reference_embedding: Tensor,
}

/// Sweeps the speaker classifier-free scale, averaging a pronunciation
/// proxy (frame error through the evaluation classifier) and a
/// similarity proxy (cosine of frame embeddings to the reference) over
/// `runs` sampled sentences per scale. Sentences and sampler noise are
/// derived per run index, not per scale, so rows are comparable and the
/// γ_S = 0 row equals a plain conditional run.
pub fn gamma_sweep(
    request: &SynthesisRequest,
    gamma_s_list: &[f64],
    runs: usize,
    evaluator: &SweepEvaluator,
    rng: &Rng,
) -> Result<Vec<SweepRow>, SynthesisError> {
    let mut rows = Vec::with_capacity(gamma_s_list.len());
    for &gamma_s in gamma_s_list {
        let mut err_acc = 0.0;
        let mut sim_acc = 0.0;
        for run in 0..runs {
            let mut run_rng = rng.substream_indexed("synth", run as u64);
            let mut req = SynthesisRequest {
                phonemes: request.phonemes.clone(),
                speaker_embedding: request.speaker_embedding.clone(),
                guidance: request.guidance,
                sampler: request.sampler.clone(),
                schedule: request.schedule,
                models: ModelSet {
                    score: request.models.score,
                    classifier: request.models.classifier,
                    duration: request.models.duration,
                },
                adapted_model: request.adapted_model,
            };
            req.guidance.gamma_s = gamma_s;
            let out = synthesize(&req, &mut run_rng)?;
            let decoded = evaluator.eval_classifier.decode_frames(
                &out.frames,
                0.0,
                &request.speaker_embedding,
            )?;
            err_acc += frame_error_rate(&decoded, &out.frame_labels);
            let e = (evaluator.embed_frames)(&out.frames);
            sim_acc += crate::aux_models::encoder::cosine(&e, &evaluator.reference_embedding);
        }
        rows.push(SweepRow {
            gamma_s,
            frame_error: err_acc / runs as f64,
            similarity: sim_acc / runs as f64,
        });
    }
    Ok(rows)
}
