//! Procedural synthetic frame world standing in for mel-spectrograms.
//!
//! A world is a set of speakers (per-channel affine transforms plus a
//! speaking rate), a phoneme inventory (separated template vectors with
//! nominal durations), and a renderer that emits utterances with exact
//! frame-level alignments. Analytic Gaussian benchmark distributions for
//! sampler and guidance verification live here too.

use crate::numerics::{randn, Rng, Tensor};
use crate::sde::NoiseSchedule;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("could not place {0} separated templates in {1} channels after 100 tries")]
    TemplateSeparation(usize, usize),
    #[error("world needs at least 2 speakers and 2 phonemes")]
    TooSmall,
    #[error("unknown speaker id {0}")]
    UnknownSpeaker(usize),
    #[error("unknown phoneme id {0}")]
    UnknownPhoneme(usize),
}

#[derive(Clone, Debug)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_speakers: usize,
    /// Phoneme inventory size K.
    pub num_phonemes: usize,
    /// Frame channel count C.
    pub channels: usize,
    /// Speaker embedding dimension d (for the oracle encoder).
    pub embed_dim: usize,
    /// Per-frame observation noise around the speaker-transformed template.
    pub sigma_obs: f64,
    /// Minimum pairwise distance between templates.
    pub delta_min: f64,
    /// Relative duration jitter (uniform ±j).
    pub duration_jitter: f64,
    /// Number of speakers reserved as held-out (never in training splits).
    pub holdout_speakers: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            num_speakers: 16,
            num_phonemes: 8,
            channels: 8,
            embed_dim: 16,
            sigma_obs: 0.1,
            delta_min: 1.0,
            duration_jitter: 0.2,
            holdout_speakers: 4,
        }
    }
}

/// Latent speaker: per-channel affine transform plus speaking rate.
#[derive(Clone, Debug)]
pub struct ToySpeaker {
    pub offsets: Vec<f64>,
    pub scales: Vec<f64>,
    pub rate: f64,
}

/// One rendered utterance with exact alignment.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub speaker: usize,
    pub phonemes: Vec<usize>,
    /// (start, len) spans partitioning [0, L) in order.
    pub spans: Vec<(usize, usize)>,
    /// Frames, [L, C].
    pub frames: Tensor,
}

impl Utterance {
    pub fn len_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Frame-level labels recovered from the alignment.
    pub fn frame_labels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len_frames());
        for (&k, &(_, len)) in self.phonemes.iter().zip(&self.spans) {
            out.extend(std::iter::repeat(k).take(len));
        }
        out
    }

    /// Contiguous crop of `len` frames starting at `start`, with labels.
    pub fn crop(&self, start: usize, len: usize) -> (Tensor, Vec<usize>) {
        let c = self.frames.cols();
        let labels = self.frame_labels();
        let end = (start + len).min(self.len_frames());
        let mut data = Vec::with_capacity((end - start) * c);
        for r in start..end {
            data.extend_from_slice(self.frames.row(r));
        }
        (
            Tensor::from_vec(&[end - start, c], data),
            labels[start..end].to_vec(),
        )
    }
}

/// Deterministic synthetic world.
#[derive(Clone, Debug)]
pub struct ToyWorld {
    pub config: WorldConfig,
    pub speakers: Vec<ToySpeaker>,
    /// K template vectors in R^C.
    pub templates: Vec<Vec<f64>>,
    /// Nominal per-phoneme duration in frames.
    pub durations: Vec<f64>,
    /// Fixed projection for the oracle speaker embedding, [embed_dim, 2C+1].
    oracle_proj: Tensor,
}

impl ToyWorld {
    /// Generates a world deterministically from its config.
    pub fn generate(config: WorldConfig) -> Result<ToyWorld, WorldError> {
        if config.num_speakers < 2 || config.num_phonemes < 2 {
            return Err(WorldError::TooSmall);
        }
        assert!(config.holdout_speakers < config.num_speakers);
        let root = Rng::new(config.seed);
        let mut trng = root.substream("world.templates");
        let templates = place_templates(
            config.num_phonemes,
            config.channels,
            config.delta_min,
            &mut trng,
        )?;
        let mut drng = root.substream("world.durations");
        let durations: Vec<f64> = (0..config.num_phonemes)
            .map(|_| drng.below(4) as f64 + 2.0)
            .collect();
        let mut speakers = Vec::with_capacity(config.num_speakers);
        for s in 0..config.num_speakers {
            let mut rng = root.substream_indexed("world.speaker", s as u64);
            let offsets: Vec<f64> = (0..config.channels).map(|_| 0.8 * rng.normal()).collect();
            let scales: Vec<f64> = (0..config.channels)
                .map(|_| rng.range_f64(0.7, 1.3))
                .collect();
            let rate = rng.range_f64(0.8, 1.25);
            speakers.push(ToySpeaker {
                offsets,
                scales,
                rate,
            });
        }
        let mut prng = root.substream("world.oracle_proj");
        let oracle_proj = randn(&[config.embed_dim, 2 * config.channels + 1], &mut prng);
        Ok(ToyWorld {
            config,
            speakers,
            templates,
            durations,
            oracle_proj,
        })
    }

    /// Speaker ids used for training splits.
    pub fn train_speakers(&self) -> Vec<usize> {
        (0..self.config.num_speakers - self.config.holdout_speakers).collect()
    }

    /// Held-out speaker ids; disjoint from the training split.
    pub fn holdout_speakers(&self) -> Vec<usize> {
        (self.config.num_speakers - self.config.holdout_speakers..self.config.num_speakers)
            .collect()
    }

    /// Speaker-transformed template mean for one phoneme.
    pub fn transformed_template(&self, speaker: usize, phoneme: usize) -> Result<Vec<f64>, WorldError> {
        let sp = self
            .speakers
            .get(speaker)
            .ok_or(WorldError::UnknownSpeaker(speaker))?;
        let tpl = self
            .templates
            .get(phoneme)
            .ok_or(WorldError::UnknownPhoneme(phoneme))?;
        Ok(tpl
            .iter()
            .enumerate()
            .map(|(c, &v)| sp.offsets[c] + sp.scales[c] * v)
            .collect())
    }

    /// Ground-truth duration draw for (speaker, phoneme).
    pub fn draw_duration(&self, speaker: usize, phoneme: usize, rng: &mut Rng) -> usize {
        let jitter = if self.config.duration_jitter > 0.0 {
            rng.range_f64(-self.config.duration_jitter, self.config.duration_jitter)
        } else {
            0.0
        };
        let raw = self.speakers[speaker].rate * self.durations[phoneme] * (1.0 + jitter);
        (raw.round() as isize).max(1) as usize
    }

    /// Renders an utterance with exact alignment.
    pub fn render(
        &self,
        speaker: usize,
        phonemes: &[usize],
        rng: &mut Rng,
    ) -> Result<Utterance, WorldError> {
        if speaker >= self.speakers.len() {
            return Err(WorldError::UnknownSpeaker(speaker));
        }
        for &p in phonemes {
            if p >= self.templates.len() {
                return Err(WorldError::UnknownPhoneme(p));
            }
        }
        let c = self.config.channels;
        let mut spans = Vec::with_capacity(phonemes.len());
        let mut frames: Vec<f64> = Vec::new();
        let mut cursor = 0usize;
        for &k in phonemes {
            let dur = self.draw_duration(speaker, k, rng);
            let mean = self.transformed_template(speaker, k)?;
            for _ in 0..dur {
                for ch in 0..c {
                    frames.push(mean[ch] + self.config.sigma_obs * rng.normal());
                }
            }
            spans.push((cursor, dur));
            cursor += dur;
        }
        Ok(Utterance {
            speaker,
            phonemes: phonemes.to_vec(),
            spans,
            frames: Tensor::from_vec(&[cursor, c], frames),
        })
    }

    /// Random phoneme sequence of the given length range.
    pub fn random_phonemes(&self, min_len: usize, max_len: usize, rng: &mut Rng) -> Vec<usize> {
        let len = min_len + rng.below(max_len - min_len + 1);
        (0..len).map(|_| rng.below(self.config.num_phonemes)).collect()
    }

    /// Deterministic unit-norm embedding of a speaker's latent parameters.
    pub fn oracle_embedding(&self, speaker: usize) -> Result<Tensor, WorldError> {
        let sp = self
            .speakers
            .get(speaker)
            .ok_or(WorldError::UnknownSpeaker(speaker))?;
        let mut latent = Vec::with_capacity(2 * self.config.channels + 1);
        latent.extend_from_slice(&sp.offsets);
        latent.extend(sp.scales.iter().map(|s| s - 1.0));
        latent.push(sp.rate.ln());
        let latent = Tensor::from_vec(&[2 * self.config.channels + 1, 1], latent);
        let raw = self.oracle_proj.matmul(&latent);
        let norm = raw.l2_norm();
        Ok(raw.scale(1.0 / norm).reshape(&[self.config.embed_dim]))
    }

    /// Bayes-optimal per-frame decoding for a known speaker: nearest
    /// transformed template under the isotropic observation model.
    pub fn bayes_decode(&self, speaker: usize, frames: &Tensor) -> Result<Vec<usize>, WorldError> {
        let means: Vec<Vec<f64>> = (0..self.templates.len())
            .map(|k| self.transformed_template(speaker, k))
            .collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(frames.rows());
        for r in 0..frames.rows() {
            let row = frames.row(r);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, mean) in means.iter().enumerate() {
                let d: f64 = row
                    .iter()
                    .zip(mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            out.push(best);
        }
        Ok(out)
    }
}

fn place_templates(
    k: usize,
    channels: usize,
    delta_min: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>, WorldError> {
    'attempt: for _ in 0..100 {
        let templates: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..channels).map(|_| rng.normal()).collect())
            .collect();
        for i in 0..k {
            for j in i + 1..k {
                let d: f64 = templates[i]
                    .iter()
                    .zip(&templates[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if d < delta_min {
                    continue 'attempt;
                }
            }
        }
        return Ok(templates);
    }
    Err(WorldError::TemplateSeparation(k, channels))
}

/// Analytic isotropic-Gaussian data distribution N(m, σ0² I) with
/// closed-form marginals and scores under the forward process.
#[derive(Clone, Debug)]
pub struct GaussianBenchmark {
    pub mean: Vec<f64>,
    pub sigma0: f64,
}

impl GaussianBenchmark {
    pub fn new(mean: Vec<f64>, sigma0: f64) -> GaussianBenchmark {
        assert!(sigma0 > 0.0, "sigma0 must be positive");
        GaussianBenchmark { mean, sigma0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws `n` samples as rows, [n, dim].
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for j in 0..d {
                data.push(self.mean[j] + self.sigma0 * rng.normal());
            }
        }
        Tensor::from_vec(&[n, d], data)
    }

    /// Variance of the forward marginal at time t: α²σ0² + λ(t).
    pub fn marginal_var(&self, t: f64, schedule: &NoiseSchedule) -> f64 {
        let alpha = schedule.mean_coeff(t).expect("t in range");
        alpha * alpha * self.sigma0 * self.sigma0 + schedule.lambda(t).expect("t > 0")
    }

    /// Closed-form score of the forward marginal, row-wise:
    /// −(x − α·m) / (α²σ0² + λ).
    pub fn score(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Tensor {
        let alpha = schedule.mean_coeff(t).expect("t in range");
        let var = self.marginal_var(t, schedule);
        let d = self.dim();
        assert_eq!(x.cols(), d, "dimension mismatch");
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let row = x.row(r);
            for j in 0..d {
                out.push(-(row[j] - alpha * self.mean[j]) / var);
            }
        }
        Tensor::from_vec(x.shape(), out)
    }

    /// Log-density of the forward marginal at a single row.
    pub fn log_density(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> f64 {
        let alpha = schedule.mean_coeff(t).expect("t in range");
        let var = self.marginal_var(t, schedule);
        let d = self.dim() as f64;
        let mut q = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            let diff = xj - alpha * self.mean[j];
            q += diff * diff;
        }
        -0.5 * q / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
    }
}

/// Symmetric two-component mixture ½ N(+m, σ0²I) + ½ N(−m, σ0²I), with the
/// marginal mixture score computed by log-sum-exp differentiation.
#[derive(Clone, Debug)]
pub struct SymmetricMixture {
    pub plus: GaussianBenchmark,
    pub minus: GaussianBenchmark,
}

impl SymmetricMixture {
    pub fn new(mean: Vec<f64>, sigma0: f64) -> SymmetricMixture {
        let neg = mean.iter().map(|v| -v).collect();
        SymmetricMixture {
            plus: GaussianBenchmark::new(mean, sigma0),
            minus: GaussianBenchmark::new(neg, sigma0),
        }
    }

    pub fn dim(&self) -> usize {
        self.plus.dim()
    }

    pub fn component(&self, label: usize) -> &GaussianBenchmark {
        match label {
            0 => &self.plus,
            1 => &self.minus,
            _ => panic!("mixture has two components"),
        }
    }

    /// Samples n rows, each from a uniformly chosen component.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.below(2);
            labels.push(label);
            let comp = self.component(label);
            for j in 0..d {
                data.push(comp.mean[j] + comp.sigma0 * rng.normal());
            }
        }
        (Tensor::from_vec(&[n, d], data), labels)
    }

    /// Marginal mixture score, row-wise, via posterior weights computed
    /// with log-sum-exp over components.
    pub fn marginal_score(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Tensor {
        let d = self.dim();
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let row = x.row(r);
            let lp = self.plus.log_density(row, t, schedule);
            let lm = self.minus.log_density(row, t, schedule);
            let max = lp.max(lm);
            let wp = (lp - max).exp();
            let wm = (lm - max).exp();
            let z = wp + wm;
            let sp = self.plus.score(&Tensor::from_vec(&[1, d], row.to_vec()), t, schedule);
            let sm = self
                .minus
                .score(&Tensor::from_vec(&[1, d], row.to_vec()), t, schedule);
            for j in 0..d {
                out.push((wp * sp.data()[j] + wm * sm.data()[j]) / z);
            }
        }
        Tensor::from_vec(x.shape(), out)
    }

    /// Log posterior probability of a component at one row.
    pub fn log_posterior(&self, x: &[f64], label: usize, t: f64, schedule: &NoiseSchedule) -> f64 {
        let lp = self.plus.log_density(x, t, schedule);
        let lm = self.minus.log_density(x, t, schedule);
        let max = lp.max(lm);
        let lse = max + ((lp - max).exp() + (lm - max).exp()).ln();
        match label {
            0 => lp - lse,
            1 => lm - lse,
            _ => panic!("mixture has two components"),
        }
    }

    /// Gradient of the log posterior w.r.t. x at one row, via posterior
    /// weights: ∇log p(y|x) = score_y − marginal score.
    pub fn posterior_grad(&self, x: &[f64], label: usize, t: f64, schedule: &NoiseSchedule) -> Vec<f64> {
        let d = self.dim();
        let row = Tensor::from_vec(&[1, d], x.to_vec());
        let comp = self.component(label).score(&row, t, schedule);
        let marg = self.marginal_score(&row, t, schedule);
        (0..d).map(|j| comp.data()[j] - marg.data()[j]).collect()
    }
}
