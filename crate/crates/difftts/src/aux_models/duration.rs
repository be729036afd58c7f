//! Per-phoneme duration predictor.
//!
//! Regresses log-duration from a learned phoneme embedding concatenated
//! with the speaker embedding; inference rounds exp(prediction) and
//! clamps to at least one frame.

use crate::aux_models::AuxError;
use crate::nn::{grads_by_name, xavier, Linear, LinearVars};
use crate::numerics::{AdamState, Rng, Tape, Tensor, Var};
use crate::toyworld::{ToyWorld, Utterance};

#[derive(Clone, Copy, Debug)]
pub struct DurationPredictorConfig {
    pub classes: usize,
    pub embed_dim: usize,
    pub phoneme_embed: usize,
    pub hidden: usize,
}

impl Default for DurationPredictorConfig {
    fn default() -> Self {
        DurationPredictorConfig {
            classes: 8,
            embed_dim: 16,
            phoneme_embed: 8,
            hidden: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DurationPredictor {
    pub config: DurationPredictorConfig,
    /// Learned phoneme embeddings, [K, phoneme_embed].
    emb: Tensor,
    l1: Linear,
    l2: Linear,
}

pub struct DurationVars {
    emb: Var,
    l1: LinearVars,
    l2: LinearVars,
}

impl DurationPredictor {
    pub fn new(config: DurationPredictorConfig, rng: &mut Rng) -> DurationPredictor {
        DurationPredictor {
            config,
            emb: xavier(config.classes, config.phoneme_embed, rng),
            l1: Linear::new(config.phoneme_embed + config.embed_dim, config.hidden, rng),
            l2: Linear::new(config.hidden, 1, rng),
        }
    }

    pub fn bind(&self, tape: &Tape) -> DurationVars {
        DurationVars {
            emb: tape.leaf(self.emb.clone()),
            l1: self.l1.bind(tape),
            l2: self.l2.bind(tape),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("duration.emb".to_string(), &self.emb)];
        self.l1.collect("duration.l1", &mut out);
        self.l2.collect("duration.l2", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.push(("duration.emb".to_string(), &mut self.emb));
        self.l1.collect_mut("duration.l1", &mut out);
        self.l2.collect_mut("duration.l2", &mut out);
        out
    }

    fn bound_params(&self, vars: &DurationVars) -> Vec<(String, Var)> {
        let mut out = vec![("duration.emb".to_string(), vars.emb.clone())];
        vars.l1.collect("duration.l1", &mut out);
        vars.l2.collect("duration.l2", &mut out);
        out
    }

    fn check_phonemes(&self, phonemes: &[usize]) -> Result<(), AuxError> {
        if phonemes.is_empty() {
            return Err(AuxError::EmptyInput("phoneme sequence"));
        }
        for &p in phonemes {
            if p >= self.config.classes {
                return Err(AuxError::LabelOutOfRange(p, self.config.classes));
            }
        }
        Ok(())
    }

    /// Predicted log-durations on tape, [P, 1]. The phoneme-embedding
    /// rows are gathered by selection matrix so gradients reach `emb`.
    pub fn predict_log_on_tape(
        &self,
        tape: &Tape,
        vars: &DurationVars,
        phonemes: &[usize],
        speaker: &Tensor,
    ) -> Var {
        let p = phonemes.len();
        let mut select = vec![0.0; p * self.config.classes];
        for (i, &k) in phonemes.iter().enumerate() {
            select[i * self.config.classes + k] = 1.0;
        }
        let select = tape.constant(Tensor::from_vec(&[p, self.config.classes], select));
        let rows = select.matmul(&vars.emb);
        let embed = tape
            .constant(speaker.reshape(&[1, self.config.embed_dim]))
            .broadcast_rows(p);
        let h = vars.l1.forward(&rows.concat_cols(&embed)).tanh();
        vars.l2.forward(&h)
    }

    /// Predicted log-durations, [P].
    pub fn predict_log(&self, phonemes: &[usize], speaker: &Tensor) -> Result<Vec<f64>, AuxError> {
        self.check_phonemes(phonemes)?;
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let out = self.predict_log_on_tape(&tape, &vars, phonemes, speaker);
        Ok(out.value().into_data())
    }

    /// Integer frame durations: round(exp(log-duration)), clamped ≥ 1.
    pub fn predict_durations(
        &self,
        phonemes: &[usize],
        speaker: &Tensor,
    ) -> Result<Vec<usize>, AuxError> {
        Ok(self
            .predict_log(phonemes, speaker)?
            .into_iter()
            .map(|logd| (logd.exp().round() as isize).max(1) as usize)
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct DurationTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for DurationTrainConfig {
    fn default() -> Self {
        DurationTrainConfig {
            iterations: 1500,
            batch: 32,
            lr: 5e-3,
        }
    }
}

/// L2 regression on log durations drawn from aligned utterances.
pub fn train_duration(
    model: &mut DurationPredictor,
    data: &[(Utterance, Tensor)],
    config: &DurationTrainConfig,
    rng: &Rng,
) -> Result<Vec<f64>, AuxError> {
    assert!(!data.is_empty(), "no training data");
    // Flatten to (phoneme, duration, embedding index) triples.
    let mut triples: Vec<(usize, usize, usize)> = Vec::new();
    for (di, (utt, _)) in data.iter().enumerate() {
        for (&k, &(_, len)) in utt.phonemes.iter().zip(&utt.spans) {
            triples.push((k, len, di));
        }
    }
    let mut data_rng = rng.substream("duration.data");
    let mut adam = AdamState::new(config.lr);
    let mut losses = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let tape = Tape::new();
        let vars = model.bind(&tape);
        // Group the batch by utterance embedding to batch rows per call.
        let mut total: Option<Var> = None;
        for _ in 0..config.batch {
            let (k, len, di) = triples[data_rng.below(triples.len())];
            let embed = &data[di].1;
            let pred = self_predict(model, &tape, &vars, k, embed);
            let target = tape.constant(Tensor::from_vec(&[1, 1], vec![(len as f64).ln()]));
            let sq = pred.sub(&target).square().sum();
            total = Some(match total {
                Some(acc) => acc.add(&sq),
                None => sq,
            });
        }
        let loss = total.unwrap().scale(1.0 / config.batch as f64);
        let loss_value = loss.value().item();
        if !loss_value.is_finite() {
            return Err(AuxError::NonFiniteLoss(iter));
        }
        losses.push(loss_value);
        let grads = loss.backward().expect("scalar loss");
        let named = grads_by_name(&model.bound_params(&vars), &grads);
        super::classifier::apply_step(&mut adam, model.named_params_mut(), &named)?;
    }
    Ok(losses)
}

fn self_predict(
    model: &DurationPredictor,
    tape: &Tape,
    vars: &DurationVars,
    phoneme: usize,
    speaker: &Tensor,
) -> Var {
    model.predict_log_on_tape(tape, vars, &[phoneme], speaker)
}

/// Renders ground-truth duration data for a set of speakers.
pub fn duration_dataset(
    world: &ToyWorld,
    speakers: &[usize],
    utterances_per_speaker: usize,
    rng: &Rng,
) -> Vec<(Utterance, Tensor)> {
    let mut out = Vec::new();
    let mut rrng = rng.substream("duration.render");
    for &s in speakers {
        let embed = world.oracle_embedding(s).expect("speaker in world");
        for _ in 0..utterances_per_speaker {
            let seq = world.random_phonemes(4, 8, &mut rrng);
            let utt = world.render(s, &seq, &mut rrng).expect("valid phonemes");
            out.push((utt, embed.clone()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (DurationPredictor, Tensor) {
        let mut rng = Rng::new(21).substream("init");
        let model = DurationPredictor::new(
            DurationPredictorConfig {
                classes: 4,
                embed_dim: 4,
                phoneme_embed: 3,
                hidden: 8,
            },
            &mut rng,
        );
        let e = {
            let v = crate::numerics::randn(&[4], &mut rng);
            v.scale(1.0 / v.l2_norm())
        };
        (model, e)
    }

    #[test]
    fn unknown_phoneme_rejected() {
        let (m, e) = tiny();
        assert!(matches!(
            m.predict_durations(&[0, 7], &e),
            Err(AuxError::LabelOutOfRange(7, 4))
        ));
        assert!(matches!(
            m.predict_durations(&[], &e),
            Err(AuxError::EmptyInput(_))
        ));
    }

    #[test]
    fn clamped_to_one_frame() {
        // Force a large negative prediction through the output bias.
        let (mut m, e) = tiny();
        m.l2.b.data_mut()[0] = -3.0;
        for w in m.l2.w.data_mut() {
            *w = 0.0;
        }
        let d = m.predict_durations(&[0, 1, 2], &e).unwrap();
        assert_eq!(d, vec![1, 1, 1]);
    }

    #[test]
    fn constant_predictor_gives_constant_durations() {
        let (mut m, e) = tiny();
        for w in m.l2.w.data_mut() {
            *w = 0.0;
        }
        m.l2.b.data_mut()[0] = (5.0f64).ln();
        let d = m.predict_durations(&[0, 1, 2, 3], &e).unwrap();
        assert_eq!(d, vec![5, 5, 5, 5]);
    }
}
