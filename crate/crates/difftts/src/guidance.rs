//! Guidance combinators for steering the reverse process: classifier
//! guidance, classifier-free guidance, norm-based guidance, and the
//! combined speaker + text score used by the synthesis pipeline.

use crate::numerics::Tensor;
use crate::score::{Condition, ScoreError, ScoreModel};

/// Which modified score the sampler uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    /// Unconditional score plus raw classifier gradient.
    PlainClassifier,
    /// Conditional score plus scaled classifier gradient.
    ScaledClassifier,
    /// Classifier-free guidance only.
    Cfg,
    /// Conditional score plus norm-rescaled classifier gradient.
    NormBased,
    /// Speaker classifier-free guidance then norm-based text guidance.
    Combined,
}

impl GuidanceMode {
    pub fn parse(s: &str) -> Option<GuidanceMode> {
        Some(match s {
            "plain_classifier" => GuidanceMode::PlainClassifier,
            "scaled_classifier" => GuidanceMode::ScaledClassifier,
            "cfg" => GuidanceMode::Cfg,
            "norm_based" => GuidanceMode::NormBased,
            "combined" => GuidanceMode::Combined,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            GuidanceMode::PlainClassifier => "plain_classifier",
            GuidanceMode::ScaledClassifier => "scaled_classifier",
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::NormBased => "norm_based",
            GuidanceMode::Combined => "combined",
        }
    }
}

/// Guidance scales plus the active mode. Exactly one mode applies per
/// sampling run.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceConfig {
    /// Speaker classifier-free scale γ_S.
    pub gamma_s: f64,
    /// Text gradient scale γ_T.
    pub gamma_t: f64,
    pub mode: GuidanceMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            gamma_s: 1.0,
            gamma_t: 0.3,
            mode: GuidanceMode::Combined,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) {
        assert!(self.gamma_s >= 0.0, "gamma_s must be non-negative");
        assert!(self.gamma_t >= 0.0, "gamma_t must be non-negative");
    }
}

/// Plain classifier guidance: s + ∇ log p(y|x).
pub fn classifier_guided_score(s_uncond: &Tensor, grad_logp_y: &Tensor) -> Tensor {
    s_uncond.add(grad_logp_y)
}

/// Scaled classifier guidance on a conditional score: s + γ·g.
pub fn scaled_classifier_score(s_cond: &Tensor, grad_logp_y: &Tensor, gamma: f64) -> Tensor {
    assert!(gamma >= 0.0, "gamma must be non-negative");
    if gamma == 0.0 {
        return s_cond.clone();
    }
    s_cond.add(&grad_logp_y.scale(gamma))
}

/// Classifier-free guidance: s_cond + γ·(s_cond − s_uncond).
///
/// γ = 0 and s_cond == s_uncond both return s_cond bit-exactly; the
/// guidance direction is identically zero in those cases and going
/// through the arithmetic would only risk flipping signed zeros.
pub fn cfg_score(s_cond: &Tensor, s_uncond: &Tensor, gamma: f64) -> Tensor {
    assert!(gamma >= 0.0, "gamma must be non-negative");
    if gamma == 0.0 || s_cond.bit_eq(s_uncond) {
        return s_cond.clone();
    }
    s_cond.add(&s_cond.sub(s_uncond).scale(gamma))
}

/// Outcome of norm-based guidance, with the norms used for diagnostics.
#[derive(Clone, Debug)]
pub struct NormGuided {
    pub score: Tensor,
    pub base_norm: f64,
    pub grad_norm: f64,
    /// Set when the classifier gradient was too small to scale against
    /// and the guidance term was skipped for this step.
    pub skipped: bool,
}

/// Threshold below which the classifier gradient is considered
/// uninformative and norm-based guidance is skipped.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Norm-based guidance: base + γ_T·(‖base‖/‖g‖)·g, norms global L2 over
/// the full tensor. A vanishing ‖g‖ skips the term (flagged in the
/// result) rather than distorting the scale with an epsilon.
pub fn norm_based_score(base: &Tensor, grad_logp_y: &Tensor, gamma_t: f64) -> NormGuided {
    assert!(gamma_t >= 0.0, "gamma_t must be non-negative");
    let base_norm = base.l2_norm();
    let grad_norm = grad_logp_y.l2_norm();
    if gamma_t == 0.0 {
        return NormGuided {
            score: base.clone(),
            base_norm,
            grad_norm,
            skipped: false,
        };
    }
    if grad_norm < GRAD_NORM_FLOOR {
        return NormGuided {
            score: base.clone(),
            base_norm,
            grad_norm,
            skipped: true,
        };
    }
    let score = base.add(&grad_logp_y.scale(gamma_t * base_norm / grad_norm));
    NormGuided {
        score,
        base_norm,
        grad_norm,
        skipped: false,
    }
}

/// Per-step record emitted by [`combined_score`] and the sampler.
#[derive(Clone, Debug)]
pub struct GuidanceDiag {
    /// ‖ŝ(x|S)‖ after classifier-free guidance.
    pub cfg_score_norm: f64,
    /// ‖γ_T·(‖ŝ‖/‖g‖)·g‖; zero when no text guidance applied.
    pub guidance_term_norm: f64,
    pub classifier_grad_norm: f64,
    pub skipped: bool,
}

/// Supplies ∇_x log p(ŷ | x, t, S) for the combined score.
pub trait ClassifierGradient {
    fn grad_logp(
        &self,
        x: &Tensor,
        t: f64,
        speaker: &Tensor,
        frame_labels: &[usize],
    ) -> Result<Tensor, ScoreError>;
}

/// The full guided score: speaker classifier-free guidance over the
/// score model, then norm-based text guidance from the classifier. The
/// norm in the rescaling is that of the CFG-modified score.
///
/// Component evaluations are skipped when their scale is zero: γ_S = 0
/// needs no unconditional pass and γ_T = 0 needs no classifier pass.
pub fn combined_score(
    x: &Tensor,
    t: f64,
    speaker: &Tensor,
    frame_labels: &[usize],
    model: &dyn ScoreModel,
    classifier: &dyn ClassifierGradient,
    config: &GuidanceConfig,
) -> Result<(Tensor, GuidanceDiag), ScoreError> {
    config.validate();
    let s_cond = model.score(x, t, Condition::Speaker(speaker))?;
    let s_hat = if config.gamma_s == 0.0 {
        s_cond
    } else {
        let s_uncond = model.score(x, t, Condition::Null)?;
        cfg_score(&s_cond, &s_uncond, config.gamma_s)
    };
    if config.gamma_t == 0.0 {
        let cfg_score_norm = s_hat.l2_norm();
        return Ok((
            s_hat,
            GuidanceDiag {
                cfg_score_norm,
                guidance_term_norm: 0.0,
                classifier_grad_norm: 0.0,
                skipped: false,
            },
        ));
    }
    let grad = classifier.grad_logp(x, t, speaker, frame_labels)?;
    let guided = norm_based_score(&s_hat, &grad, config.gamma_t);
    let diag = GuidanceDiag {
        cfg_score_norm: guided.base_norm,
        guidance_term_norm: guided.score.sub(&s_hat).l2_norm(),
        classifier_grad_norm: guided.grad_norm,
        skipped: guided.skipped,
    };
    Ok((guided.score, diag))
}
