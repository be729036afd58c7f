//! The model bundle: every trained component in one checkpoint, plus the
//! score-model optimizer state and shape metadata needed to rebuild the
//! networks on load.

use std::collections::BTreeMap;
use std::path::Path;

use crate::aux_models::{
    DurationPredictor, DurationPredictorConfig, PhonemeClassifier, PhonemeClassifierConfig,
    TrainedEncoder, TrainedEncoderConfig,
};
use crate::harness::{checkpoint, Config, HarnessError};
use crate::nn::load_named;
use crate::numerics::{AdamState, Rng, Tensor};
use crate::score::{ConditionalScoreNet, ScoreNetConfig};

pub struct ModelBundle {
    pub score: ConditionalScoreNet,
    /// Guidance classifier trained on corrupted inputs.
    pub classifier: PhonemeClassifier,
    /// Evaluation decoder trained on clean inputs only.
    pub eval_classifier: PhonemeClassifier,
    pub duration: DurationPredictor,
    pub encoder: TrainedEncoder,
    /// Optimizer state of the last score-model training stage.
    pub optimizer: Option<AdamState>,
}

/// Shape block shared by all bundle members.
#[derive(Clone, Copy, Debug)]
pub struct BundleDims {
    pub channels: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub score_hidden: usize,
    pub score_depth: usize,
    pub classifier_hidden: usize,
    pub classifier_depth: usize,
    pub duration_hidden: usize,
    pub encoder_hidden: usize,
}

impl BundleDims {
    pub fn from_config(cfg: &Config) -> Result<BundleDims, HarnessError> {
        Ok(BundleDims {
            channels: cfg.get_usize("world_channels", 8)?,
            embed_dim: cfg.get_usize("embed_dim", 16)?,
            classes: cfg.get_usize("world_phonemes", 8)?,
            score_hidden: cfg.get_usize("score_hidden", 128)?,
            score_depth: cfg.get_usize("score_depth", 4)?,
            classifier_hidden: cfg.get_usize("classifier_hidden", 64)?,
            classifier_depth: cfg.get_usize("classifier_depth", 2)?,
            duration_hidden: cfg.get_usize("duration_hidden", 32)?,
            encoder_hidden: cfg.get_usize("encoder_hidden", 48)?,
        })
    }
}

impl ModelBundle {
    /// Freshly initialized bundle with the given shapes.
    pub fn initialize(dims: &BundleDims, rng: &Rng) -> ModelBundle {
        let init = rng.substream("init");
        ModelBundle {
            score: ConditionalScoreNet::new(
                ScoreNetConfig {
                    channels: dims.channels,
                    embed_dim: dims.embed_dim,
                    hidden: dims.score_hidden,
                    depth: dims.score_depth,
                },
                &mut init.substream("score"),
            ),
            classifier: PhonemeClassifier::new(
                PhonemeClassifierConfig {
                    channels: dims.channels,
                    embed_dim: dims.embed_dim,
                    classes: dims.classes,
                    hidden: dims.classifier_hidden,
                    depth: dims.classifier_depth,
                },
                &mut init.substream("classifier"),
            ),
            eval_classifier: PhonemeClassifier::new(
                PhonemeClassifierConfig {
                    channels: dims.channels,
                    embed_dim: dims.embed_dim,
                    classes: dims.classes,
                    hidden: dims.classifier_hidden,
                    depth: dims.classifier_depth,
                },
                &mut init.substream("eval_classifier"),
            ),
            duration: DurationPredictor::new(
                DurationPredictorConfig {
                    classes: dims.classes,
                    embed_dim: dims.embed_dim,
                    phoneme_embed: 8,
                    hidden: dims.duration_hidden,
                },
                &mut init.substream("duration"),
            ),
            encoder: TrainedEncoder::new(
                TrainedEncoderConfig {
                    channels: dims.channels,
                    embed_dim: dims.embed_dim,
                    hidden: dims.encoder_hidden,
                },
                &mut init.substream("encoder"),
            ),
            optimizer: None,
        }
    }

    pub fn dims(&self) -> BundleDims {
        BundleDims {
            channels: self.score.config.channels,
            embed_dim: self.score.config.embed_dim,
            classes: self.classifier.config.classes,
            score_hidden: self.score.config.hidden,
            score_depth: self.score.config.depth,
            classifier_hidden: self.classifier.config.hidden,
            classifier_depth: self.classifier.config.depth,
            duration_hidden: self.duration.config.hidden,
            encoder_hidden: self.encoder.config.hidden,
        }
    }

    pub fn to_arrays(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        let dims = self.dims();
        for (key, value) in [
            ("meta.channels", dims.channels),
            ("meta.embed_dim", dims.embed_dim),
            ("meta.classes", dims.classes),
            ("meta.score_hidden", dims.score_hidden),
            ("meta.score_depth", dims.score_depth),
            ("meta.classifier_hidden", dims.classifier_hidden),
            ("meta.classifier_depth", dims.classifier_depth),
            ("meta.duration_hidden", dims.duration_hidden),
            ("meta.encoder_hidden", dims.encoder_hidden),
        ] {
            out.insert(key.to_string(), Tensor::scalar(value as f64));
        }
        for (name, t) in self.score.named_params() {
            out.insert(name, t.clone());
        }
        for (name, t) in self.classifier.named_params() {
            out.insert(name, t.clone());
        }
        for (name, t) in self.eval_classifier.named_params() {
            out.insert(format!("eval.{name}"), t.clone());
        }
        for (name, t) in self.duration.named_params() {
            out.insert(name, t.clone());
        }
        for (name, t) in self.encoder.named_params() {
            out.insert(name, t.clone());
        }
        if let Some(opt) = &self.optimizer {
            out.extend(opt.to_arrays("opt"));
        }
        out
    }

    pub fn from_arrays(arrays: &BTreeMap<String, Tensor>) -> Result<ModelBundle, HarnessError> {
        let get_dim = |key: &str| -> Result<usize, HarnessError> {
            arrays
                .get(key)
                .map(|t| t.item() as usize)
                .ok_or_else(|| HarnessError::Invalid(format!("checkpoint missing '{key}'")))
        };
        let dims = BundleDims {
            channels: get_dim("meta.channels")?,
            embed_dim: get_dim("meta.embed_dim")?,
            classes: get_dim("meta.classes")?,
            score_hidden: get_dim("meta.score_hidden")?,
            score_depth: get_dim("meta.score_depth")?,
            classifier_hidden: get_dim("meta.classifier_hidden")?,
            classifier_depth: get_dim("meta.classifier_depth")?,
            duration_hidden: get_dim("meta.duration_hidden")?,
            encoder_hidden: get_dim("meta.encoder_hidden")?,
        };
        let mut bundle = ModelBundle::initialize(&dims, &Rng::new(0));
        load_named(bundle.score.named_params_mut(), arrays).map_err(HarnessError::Invalid)?;
        load_named(bundle.classifier.named_params_mut(), arrays).map_err(HarnessError::Invalid)?;
        {
            // The clean decoder's arrays carry an extra prefix.
            let mut renamed: BTreeMap<String, Tensor> = BTreeMap::new();
            for (k, v) in arrays.range("eval.".to_string()..) {
                let Some(stripped) = k.strip_prefix("eval.") else { break };
                renamed.insert(stripped.to_string(), v.clone());
            }
            load_named(bundle.eval_classifier.named_params_mut(), &renamed)
                .map_err(HarnessError::Invalid)?;
        }
        load_named(bundle.duration.named_params_mut(), arrays).map_err(HarnessError::Invalid)?;
        load_named(bundle.encoder.named_params_mut(), arrays).map_err(HarnessError::Invalid)?;
        bundle.optimizer = AdamState::from_arrays("opt", arrays);
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        checkpoint::save(path, &self.to_arrays())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelBundle, HarnessError> {
        let arrays = checkpoint::load(path)?;
        ModelBundle::from_arrays(&arrays)
    }
}
