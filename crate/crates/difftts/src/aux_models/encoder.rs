//! Speaker encoders.
//!
//! Two implementations behind one interface: an oracle that maps the toy
//! world's latent speaker parameters straight to a unit vector (the test
//! default, so diffusion and guidance tests do not depend on encoder
//! training quality), and a trained frame-pooling network optimized with
//! a GE2E-style contrastive objective over rendered utterances.

use crate::aux_models::AuxError;
use crate::nn::{grads_by_name, Linear, LinearVars};
use crate::numerics::{AdamState, Rng, Tape, Tensor, Var};
use crate::toyworld::{ToyWorld, Utterance};

/// Common surface: any encoder yields a unit-norm embedding for an
/// utterance. Only the trained variant can embed bare frames (generated
/// samples carry no speaker identity for the oracle to look up).
pub enum SpeakerEncoder {
    Oracle(OracleEncoder),
    Trained(TrainedEncoder),
}

impl SpeakerEncoder {
    pub fn encode(&self, utt: &Utterance) -> Result<Tensor, AuxError> {
        match self {
            SpeakerEncoder::Oracle(o) => o.encode(utt),
            SpeakerEncoder::Trained(t) => t.encode_frames(&utt.frames),
        }
    }
}

/// Looks up the speaker latent captured at construction time.
#[derive(Clone, Debug)]
pub struct OracleEncoder {
    embeddings: Vec<Tensor>,
}

impl OracleEncoder {
    pub fn from_world(world: &ToyWorld) -> OracleEncoder {
        OracleEncoder {
            embeddings: (0..world.config.num_speakers)
                .map(|s| world.oracle_embedding(s).expect("speaker in world"))
                .collect(),
        }
    }

    pub fn embedding(&self, speaker: usize) -> Result<Tensor, AuxError> {
        self.embeddings
            .get(speaker)
            .cloned()
            .ok_or(AuxError::EmptyInput("unknown speaker for oracle encoder"))
    }

    pub fn encode(&self, utt: &Utterance) -> Result<Tensor, AuxError> {
        if utt.len_frames() == 0 {
            return Err(AuxError::EmptyInput("utterance frames"));
        }
        self.embedding(utt.speaker)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainedEncoderConfig {
    pub channels: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for TrainedEncoderConfig {
    fn default() -> Self {
        TrainedEncoderConfig {
            channels: 8,
            embed_dim: 16,
            hidden: 48,
        }
    }
}

/// Frame-pooling embedding network: per-frame features, mean pool over
/// frames, projection, L2 normalization.
#[derive(Clone, Debug)]
pub struct TrainedEncoder {
    pub config: TrainedEncoderConfig,
    l1: Linear,
    l2: Linear,
    out: Linear,
    /// GE2E similarity scale and bias.
    sim_w: Tensor,
    sim_b: Tensor,
}

pub struct EncoderVars {
    l1: LinearVars,
    l2: LinearVars,
    out: LinearVars,
    sim_w: Var,
    sim_b: Var,
}

impl TrainedEncoder {
    pub fn new(config: TrainedEncoderConfig, rng: &mut Rng) -> TrainedEncoder {
        TrainedEncoder {
            config,
            l1: Linear::new(config.channels, config.hidden, rng),
            l2: Linear::new(config.hidden, config.hidden, rng),
            out: Linear::new(config.hidden, config.embed_dim, rng),
            sim_w: Tensor::scalar(10.0),
            sim_b: Tensor::scalar(-5.0),
        }
    }

    pub fn bind(&self, tape: &Tape) -> EncoderVars {
        EncoderVars {
            l1: self.l1.bind(tape),
            l2: self.l2.bind(tape),
            out: self.out.bind(tape),
            sim_w: tape.leaf(self.sim_w.clone()),
            sim_b: tape.leaf(self.sim_b.clone()),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.l1.collect("spkenc.l1", &mut out);
        self.l2.collect("spkenc.l2", &mut out);
        self.out.collect("spkenc.out", &mut out);
        out.push(("spkenc.sim_w".to_string(), &self.sim_w));
        out.push(("spkenc.sim_b".to_string(), &self.sim_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.l1.collect_mut("spkenc.l1", &mut out);
        self.l2.collect_mut("spkenc.l2", &mut out);
        self.out.collect_mut("spkenc.out", &mut out);
        out.push(("spkenc.sim_w".to_string(), &mut self.sim_w));
        out.push(("spkenc.sim_b".to_string(), &mut self.sim_b));
        out
    }

    fn bound_params(&self, vars: &EncoderVars) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        vars.l1.collect("spkenc.l1", &mut out);
        vars.l2.collect("spkenc.l2", &mut out);
        vars.out.collect("spkenc.out", &mut out);
        out.push(("spkenc.sim_w".to_string(), vars.sim_w.clone()));
        out.push(("spkenc.sim_b".to_string(), vars.sim_b.clone()));
        out
    }

    /// Embedding on tape: [1, d], unit norm.
    pub fn embed_on_tape(&self, tape: &Tape, vars: &EncoderVars, frames: &Var) -> Var {
        let rows = frames.shape()[0];
        let h = vars.l2.forward(&vars.l1.forward(frames).tanh()).tanh();
        // Mean pool over frames via a constant averaging row.
        let pool = tape.constant(Tensor::full(&[1, rows], 1.0 / rows as f64));
        let pooled = pool.matmul(&h);
        let raw = vars.out.forward(&pooled);
        raw.mul_scalar_var(&raw.norm().recip())
    }

    /// Unit-norm embedding of bare frames, [d].
    pub fn encode_frames(&self, frames: &Tensor) -> Result<Tensor, AuxError> {
        if frames.rows() == 0 || frames.numel() == 0 {
            return Err(AuxError::EmptyInput("utterance frames"));
        }
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let fv = tape.constant(frames.clone());
        let e = self.embed_on_tape(&tape, &vars, &fv);
        Ok(e.value().reshape(&[self.config.embed_dim]))
    }
}

/// Cosine similarity between two embeddings.
pub fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    a.dot(b) / (a.l2_norm() * b.l2_norm()).max(1e-300)
}

#[derive(Clone, Debug)]
pub struct EncoderTrainConfig {
    pub iterations: usize,
    /// Speakers per batch.
    pub speakers: usize,
    /// Utterances per speaker per batch.
    pub utterances: usize,
    pub crop_frames: usize,
    pub lr: f64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            iterations: 1200,
            speakers: 6,
            utterances: 4,
            crop_frames: 20,
            lr: 2e-3,
        }
    }
}

/// GE2E-style contrastive training on rendered utterances of the world's
/// training speakers. Each utterance is scored against every speaker
/// centroid (its own centroid excludes itself) through a trainable
/// affine similarity, with softmax cross-entropy toward its speaker.
pub fn train_encoder(
    model: &mut TrainedEncoder,
    world: &ToyWorld,
    config: &EncoderTrainConfig,
    rng: &Rng,
) -> Result<Vec<f64>, AuxError> {
    let train = world.train_speakers();
    assert!(train.len() >= config.speakers, "not enough training speakers");
    let mut data_rng = rng.substream("spkenc.data");
    let mut adam = AdamState::new(config.lr);
    let mut losses = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        // Pick distinct speakers for this batch.
        let mut chosen: Vec<usize> = Vec::with_capacity(config.speakers);
        while chosen.len() < config.speakers {
            let s = train[data_rng.below(train.len())];
            if !chosen.contains(&s) {
                chosen.push(s);
            }
        }
        let tape = Tape::new();
        let vars = model.bind(&tape);
        // Embed utterances: embeds[k][i] for speaker k, utterance i.
        let mut embeds: Vec<Vec<Var>> = Vec::with_capacity(config.speakers);
        for &s in &chosen {
            let mut per_speaker = Vec::with_capacity(config.utterances);
            for _ in 0..config.utterances {
                let seq = world.random_phonemes(3, 6, &mut data_rng);
                let utt = world.render(s, &seq, &mut data_rng)?;
                let max_start = utt.len_frames().saturating_sub(config.crop_frames);
                let start = if max_start > 0 { data_rng.below(max_start + 1) } else { 0 };
                let (frames, _) = utt.crop(start, config.crop_frames);
                let fv = tape.constant(frames);
                per_speaker.push(model.embed_on_tape(&tape, &vars, &fv));
            }
            embeds.push(per_speaker);
        }
        // Centroids including all utterances, for cross-speaker terms.
        let centroids: Vec<Var> = embeds
            .iter()
            .map(|es| {
                let mut acc = es[0].clone();
                for e in &es[1..] {
                    acc = acc.add(e);
                }
                acc.scale(1.0 / es.len() as f64)
            })
            .collect();
        let mut total: Option<Var> = None;
        let mut count = 0usize;
        for (k, es) in embeds.iter().enumerate() {
            for (i, e) in es.iter().enumerate() {
                let mut sims = Vec::with_capacity(config.speakers);
                for (k2, c) in centroids.iter().enumerate() {
                    let target = if k2 == k {
                        // Exclude self from the own-speaker centroid.
                        let mut acc: Option<Var> = None;
                        for (j, other) in es.iter().enumerate() {
                            if j == i {
                                continue;
                            }
                            acc = Some(match acc {
                                Some(a) => a.add(other),
                                None => other.clone(),
                            });
                        }
                        acc.expect("at least two utterances per speaker")
                            .scale(1.0 / (es.len() - 1) as f64)
                    } else {
                        c.clone()
                    };
                    let dotp = e.mul(&target).sum();
                    let cos = dotp
                        .mul_scalar_var(&e.norm().recip())
                        .mul_scalar_var(&target.norm().recip());
                    sims.push(cos.mul_scalar_var(&vars.sim_w).add(&vars.sim_b));
                }
                let row = tape.from_scalars(&[1, config.speakers], &sims);
                let logp = row.log_softmax_rows();
                let mut mask = vec![0.0; config.speakers];
                mask[k] = 1.0;
                let mask = tape.constant(Tensor::from_vec(&[1, config.speakers], mask));
                let nll = logp.mul(&mask).sum().scale(-1.0);
                total = Some(match total {
                    Some(acc) => acc.add(&nll),
                    None => nll,
                });
                count += 1;
            }
        }
        let loss = total.unwrap().scale(1.0 / count as f64);
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
