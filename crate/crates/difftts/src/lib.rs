//! Guided diffusion text-to-speech machinery on a synthetic frame world.
//!
//! A variance-preserving diffusion process over frame sequences, a
//! speaker-conditional score network with a trainable null embedding for
//! classifier-free guidance, a frame-wise phoneme classifier for
//! norm-based text guidance, duration prediction, speaker encoders, the
//! fine-tuning adaptation protocol, and a CLI that drives the whole
//! pipeline on procedurally generated data with analytic oracles.

pub mod aux_models;
pub mod guidance;
pub mod harness;
pub mod nn;
pub mod numerics;
pub mod score;
pub mod sde;
pub mod synthesis;
pub mod toyworld;
pub mod training;
