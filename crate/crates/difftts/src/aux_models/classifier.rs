//! Frame-wise phoneme classifier over corrupted frames.
//!
//! Input per frame: the frame itself, sinusoidal features of the
//! corruption time t, and the speaker embedding. Output: per-frame
//! logits over K phoneme classes. Trained with cross-entropy against
//! exact alignments at uniformly drawn corruption times; the same
//! architecture trained at t = 0 only serves as the clean evaluation
//! decoder for synthesis metrics.

use std::collections::BTreeMap;

use crate::aux_models::AuxError;
use crate::guidance::ClassifierGradient;
use crate::nn::{grads_by_name, time_features, ConvBlock, ConvBlockVars, Linear, LinearVars, TIME_FEATURES};
use crate::numerics::{AdamState, Rng, Tape, Tensor, Var};
use crate::score::ScoreError;
use crate::sde::{forward_marginal, NoiseSchedule};
use crate::toyworld::Utterance;

#[derive(Clone, Copy, Debug)]
pub struct PhonemeClassifierConfig {
    pub channels: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl Default for PhonemeClassifierConfig {
    fn default() -> Self {
        PhonemeClassifierConfig {
            channels: 8,
            embed_dim: 16,
            classes: 8,
            hidden: 64,
            depth: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhonemeClassifier {
    pub config: PhonemeClassifierConfig,
    input: Linear,
    blocks: Vec<ConvBlock>,
    output: Linear,
}

pub struct ClassifierVars {
    input: LinearVars,
    blocks: Vec<ConvBlockVars>,
    output: LinearVars,
}

impl PhonemeClassifier {
    pub fn new(config: PhonemeClassifierConfig, rng: &mut Rng) -> PhonemeClassifier {
        let in_dim = config.channels + TIME_FEATURES + config.embed_dim;
        PhonemeClassifier {
            config,
            input: Linear::new(in_dim, config.hidden, rng),
            blocks: (0..config.depth).map(|_| ConvBlock::new(config.hidden, rng)).collect(),
            output: Linear::new(config.hidden, config.classes, rng),
        }
    }

    pub fn bind(&self, tape: &Tape) -> ClassifierVars {
        ClassifierVars {
            input: self.input.bind(tape),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            output: self.output.bind(tape),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.input.collect("classifier.in", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("classifier.blk{i}"), &mut out);
        }
        self.output.collect("classifier.out", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.input.collect_mut("classifier.in", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("classifier.blk{i}"), &mut out);
        }
        self.output.collect_mut("classifier.out", &mut out);
        out
    }

    fn bound_params(&self, vars: &ClassifierVars) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        vars.input.collect("classifier.in", &mut out);
        for (i, b) in vars.blocks.iter().enumerate() {
            b.collect(&format!("classifier.blk{i}"), &mut out);
        }
        vars.output.collect("classifier.out", &mut out);
        out
    }

    /// Raw logits on tape, differentiable in `x` and parameters.
    pub fn logits(
        &self,
        tape: &Tape,
        vars: &ClassifierVars,
        x: &Var,
        t: f64,
        speaker: &Tensor,
    ) -> Var {
        let rows = x.shape()[0];
        let tfeat = tape.constant(time_features(t)).broadcast_rows(rows);
        let embed = tape
            .constant(speaker.reshape(&[1, self.config.embed_dim]))
            .broadcast_rows(rows);
        let h0 = x.concat_cols(&tfeat).concat_cols(&embed);
        let mut h = vars.input.forward(&h0).tanh();
        for blk in &vars.blocks {
            h = blk.forward(&h);
        }
        vars.output.forward(&h)
    }

    fn check_inputs(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<(), AuxError> {
        if x.rows() == 0 || x.numel() == 0 {
            return Err(AuxError::EmptyInput("classifier frames"));
        }
        if let Some(labels) = labels {
            if labels.len() != x.rows() {
                return Err(AuxError::LabelLength {
                    want: x.rows(),
                    got: labels.len(),
                });
            }
            for &l in labels {
                if l >= self.config.classes {
                    return Err(AuxError::LabelOutOfRange(l, self.config.classes));
                }
            }
        }
        Ok(())
    }

    /// Per-frame log-probabilities, [L, K] with rows summing to one in
    /// probability space.
    pub fn classify_frames(
        &self,
        x: &Tensor,
        t: f64,
        speaker: &Tensor,
    ) -> Result<Tensor, AuxError> {
        self.check_inputs(x, None)?;
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let xv = tape.constant(x.clone());
        Ok(self.logits(&tape, &vars, &xv, t, speaker).log_softmax_rows().value())
    }

    /// Σ_frames log p(label_i | x, t, S).
    pub fn frame_logp_seq(
        &self,
        x: &Tensor,
        t: f64,
        speaker: &Tensor,
        labels: &[usize],
    ) -> Result<f64, AuxError> {
        self.check_inputs(x, Some(labels))?;
        let logp = self.classify_frames(x, t, speaker)?;
        Ok(labels
            .iter()
            .enumerate()
            .map(|(i, &l)| logp.get2(i, l))
            .sum())
    }

    /// Like [`Self::frame_logp_seq`], also returning the gradient with
    /// respect to the input frames.
    pub fn frame_logp_grad(
        &self,
        x: &Tensor,
        t: f64,
        speaker: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, Tensor), AuxError> {
        self.check_inputs(x, Some(labels))?;
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let xv = tape.leaf(x.clone());
        let logp = self.logits(&tape, &vars, &xv, t, speaker).log_softmax_rows();
        let mask = tape.constant(one_hot_mask(labels, self.config.classes));
        let total = logp.mul(&mask).sum();
        let value = total.value().item();
        let grads = total.backward().expect("scalar objective");
        Ok((value, grads.get(&xv).expect("input on tape")))
    }

    /// Argmax decoding of each frame.
    pub fn decode_frames(
        &self,
        x: &Tensor,
        t: f64,
        speaker: &Tensor,
    ) -> Result<Vec<usize>, AuxError> {
        let logp = self.classify_frames(x, t, speaker)?;
        Ok((0..logp.rows())
            .map(|r| {
                let row = logp.row(r);
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }
}

fn one_hot_mask(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::from_vec(&[labels.len(), classes], data)
}

impl ClassifierGradient for PhonemeClassifier {
    fn grad_logp(
        &self,
        x: &Tensor,
        t: f64,
        speaker: &Tensor,
        frame_labels: &[usize],
    ) -> Result<Tensor, ScoreError> {
        match self.frame_logp_grad(x, t, speaker, frame_labels) {
            Ok((_, grad)) => Ok(grad),
            Err(AuxError::Score(s)) => Err(s),
            // Label/shape mismatches inside a sampler run are programmer
            // errors; the request was validated before sampling started.
            Err(other) => panic!("classifier gradient failed: {other}"),
        }
    }
}

/// Settings for classifier training.
#[derive(Clone, Debug)]
pub struct ClassifierTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub crop_frames: usize,
    /// Train on clean frames at t = 0 only (evaluation decoder) instead
    /// of uniformly corrupted inputs.
    pub clean_only: bool,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            iterations: 2000,
            batch: 8,
            lr: 3e-3,
            crop_frames: 24,
            clean_only: false,
        }
    }
}

/// Cross-entropy training against exact alignments. Corruption times are
/// drawn uniformly on (0, 1] per sample (t = 0 when `clean_only`).
pub fn train_classifier(
    model: &mut PhonemeClassifier,
    data: &[(Utterance, Tensor)],
    schedule: &NoiseSchedule,
    config: &ClassifierTrainConfig,
    rng: &Rng,
) -> Result<Vec<f64>, AuxError> {
    assert!(!data.is_empty(), "no training data");
    let mut data_rng = rng.substream("classifier.data");
    let mut noise_rng = rng.substream("classifier.noise");
    let mut losses = Vec::with_capacity(config.iterations);
    let mut adam = AdamState::new(config.lr);
    for iter in 0..config.iterations {
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let mut total: Option<Var> = None;
        let mut frames_in_batch = 0usize;
        for _ in 0..config.batch {
            let (utt, embed) = &data[data_rng.below(data.len())];
            let max_start = utt.len_frames().saturating_sub(config.crop_frames);
            let start = if max_start > 0 { data_rng.below(max_start + 1) } else { 0 };
            let (x0, labels) = utt.crop(start, config.crop_frames);
            let t = if config.clean_only {
                0.0
            } else {
                let u = noise_rng.uniform();
                (1.0 - u).max(1e-6)
            };
            let x = if t == 0.0 {
                x0
            } else {
                let eps = crate::numerics::randn(x0.shape(), &mut noise_rng);
                forward_marginal(&x0, t, &eps, schedule)?
            };
            frames_in_batch += x.rows();
            let xv = tape.constant(x);
            let logp = model.logits(&tape, &vars, &xv, t, embed).log_softmax_rows();
            let mask = tape.constant(one_hot_mask(&labels, model.config.classes));
            let nll = logp.mul(&mask).sum().scale(-1.0);
            total = Some(match total {
                Some(acc) => acc.add(&nll),
                None => nll,
            });
        }
        let loss = total.unwrap().scale(1.0 / frames_in_batch as f64);
        let loss_value = loss.value().item();
        if !loss_value.is_finite() {
            return Err(AuxError::NonFiniteLoss(iter));
        }
        losses.push(loss_value);
        let grads = loss.backward().expect("scalar loss");
        let named = grads_by_name(&model.bound_params(&vars), &grads);
        apply_step(&mut adam, model.named_params_mut(), &named)?;
    }
    Ok(losses)
}

pub(crate) fn apply_step(
    adam: &mut AdamState,
    params: Vec<(String, &mut Tensor)>,
    grads: &BTreeMap<String, Tensor>,
) -> Result<(), crate::numerics::AdamError> {
    let mut slots: Vec<(&str, &mut Tensor)> = Vec::with_capacity(params.len());
    // Names owned by the caller's Vec; borrow them for the step.
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for ((_, slot), name) in params.into_iter().zip(names.iter()) {
        slots.push((name.as_str(), slot));
    }
    adam.step(&mut slots, grads)
}
