//! Persistence, configuration, and experiment orchestration: the
//! checkpoint and dataset file formats, the key=value config schema, the
//! model bundle assembled by the CLI stages, and the metrics-CSV
//! experiment driver.

pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiment;

use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub use bundle::ModelBundle;
pub use config::Config;
pub use dataset::DatasetFile;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(#[from] config::ConfigError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("dataset error: {0}")]
    Dataset(#[from] dataset::DatasetError),
    #[error("world error: {0}")]
    World(#[from] crate::toyworld::WorldError),
    #[error("training error: {0}")]
    Train(#[from] crate::training::TrainError),
    #[error("aux model error: {0}")]
    Aux(#[from] crate::aux_models::AuxError),
    #[error("synthesis error: {0}")]
    Synthesis(#[from] crate::synthesis::SynthesisError),
    #[error("{0}")]
    Invalid(String),
}

/// Writes a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = match dir {
        Some(d) => d.join(format!(".{file_name}.tmp")),
        None => std::path::PathBuf::from(format!(".{file_name}.tmp")),
    };
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Builds the world described by a config at a given seed.
pub fn world_from_config(
    cfg: &Config,
    seed: u64,
) -> Result<crate::toyworld::ToyWorld, HarnessError> {
    let wc = crate::toyworld::WorldConfig {
        seed,
        num_speakers: cfg.get_usize("world_speakers", 16)?,
        num_phonemes: cfg.get_usize("world_phonemes", 8)?,
        channels: cfg.get_usize("world_channels", 8)?,
        embed_dim: cfg.get_usize("embed_dim", 16)?,
        sigma_obs: cfg.get_f64("sigma_obs", 0.1)?,
        delta_min: cfg.get_f64("delta_min", 1.0)?,
        duration_jitter: cfg.get_f64("duration_jitter", 0.2)?,
        holdout_speakers: cfg.get_usize("holdout_speakers", 4)?,
    };
    Ok(crate::toyworld::ToyWorld::generate(wc)?)
}

/// Schedule and sampler settings from a config (CLI flags override).
pub fn schedule_from_config(cfg: &Config) -> Result<crate::sde::NoiseSchedule, HarnessError> {
    Ok(crate::sde::NoiseSchedule::new(
        cfg.get_f64("beta0", 0.05)?,
        cfg.get_f64("beta1", 20.0)?,
    ))
}

pub fn sampler_from_config(
    cfg: &Config,
) -> Result<crate::sde::ReverseSamplerConfig, HarnessError> {
    Ok(crate::sde::ReverseSamplerConfig {
        steps: cfg.get_usize("steps", 50)?,
        temperature: cfg.get_f64("temperature", 1.5)?,
        noise_at_every_step: cfg.get_bool("noise_at_every_step", true)?,
        scale_step_noise_by_temperature: cfg.get_bool("scale_step_noise", false)?,
    })
}

pub fn guidance_from_config(
    cfg: &Config,
) -> Result<crate::guidance::GuidanceConfig, HarnessError> {
    let mode_str = cfg.get_str("guidance_mode", "combined");
    let mode = crate::guidance::GuidanceMode::parse(mode_str)
        .ok_or_else(|| HarnessError::Invalid(format!("unknown guidance_mode '{mode_str}'")))?;
    Ok(crate::guidance::GuidanceConfig {
        gamma_s: cfg.get_f64("gamma_s", 1.0)?,
        gamma_t: cfg.get_f64("gamma_t", 0.3)?,
        mode,
    })
}
