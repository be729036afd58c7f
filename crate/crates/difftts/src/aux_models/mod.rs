//! Speaker-dependent auxiliary modules: the frame-wise phoneme
//! classifier on corrupted inputs, the log-duration predictor, and the
//! speaker encoders (analytic oracle and trained contrastive variant).

pub mod classifier;
pub mod duration;
pub mod encoder;

pub use classifier::{PhonemeClassifier, PhonemeClassifierConfig};
pub use duration::{DurationPredictor, DurationPredictorConfig};
pub use encoder::{OracleEncoder, SpeakerEncoder, TrainedEncoder, TrainedEncoderConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AuxError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("label {0} out of range (K = {1})")]
    LabelOutOfRange(usize, usize),
    #[error("label sequence length {got} does not match {want} frames")]
    LabelLength { want: usize, got: usize },
    #[error("score error: {0}")]
    Score(#[from] crate::score::ScoreError),
    #[error("sde error: {0}")]
    Sde(#[from] crate::sde::SdeError),
    #[error("optimizer error: {0}")]
    Adam(#[from] crate::numerics::AdamError),
    #[error("world error: {0}")]
    World(#[from] crate::toyworld::WorldError),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
}
