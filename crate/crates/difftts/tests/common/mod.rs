//! Shared fixtures for the integration suites: a trained two-speaker
//! Gaussian score model and the full trained toy-world stack. Training
//! happens once per test binary behind OnceLock.

#![allow(dead_code)]

use std::sync::OnceLock;

use difftts::aux_models::classifier::{train_classifier, ClassifierTrainConfig};
use difftts::aux_models::duration::{train_duration, DurationTrainConfig};
use difftts::aux_models::encoder::{train_encoder, EncoderTrainConfig};
use difftts::harness::bundle::{BundleDims, ModelBundle};
use difftts::numerics::{randn, Rng, Tensor};
use difftts::score::{ConditionalScoreNet, ScoreNetConfig};
use difftts::sde::NoiseSchedule;
use difftts::toyworld::{SymmetricMixture, ToyWorld, Utterance, WorldConfig};
use difftts::training::{cfg_stage, pretrain, Stage, TrainConfig, TrainItem};

pub fn unit_embed(dim: usize, seed: u64) -> Tensor {
    let v = randn(&[dim], &mut Rng::new(seed).substream("unit_embed"));
    v.scale(1.0 / v.l2_norm())
}

/// Two-speaker Gaussian world (means ±m) with a score net trained through
/// both stages. Used by the CFG-protocol checks.
pub struct GaussianPair {
    pub mix: SymmetricMixture,
    pub net: ConditionalScoreNet,
    pub embeddings: [Tensor; 2],
    pub schedule: NoiseSchedule,
    pub dropout_fraction: f64,
}

pub fn train_gaussian_pair() -> &'static GaussianPair {
    static PAIR: OnceLock<GaussianPair> = OnceLock::new();
    PAIR.get_or_init(|| {
        let schedule = NoiseSchedule::default();
        let mix = SymmetricMixture::new(vec![1.2, -0.8], 0.5);
        let root = Rng::new(2024);
        let embeddings = [unit_embed(8, 1), unit_embed(8, 2)];
        let mut data = Vec::new();
        let mut drng = root.substream("data");
        for _ in 0..2000 {
            let (x, labels) = mix.sample(1, &mut drng);
            data.push(TrainItem {
                frames: x,
                embedding: embeddings[labels[0]].clone(),
            });
        }
        let mut net = ConditionalScoreNet::new(
            ScoreNetConfig {
                channels: 2,
                embed_dim: 8,
                hidden: 32,
                depth: 2,
            },
            &mut root.substream("init"),
        );
        let mut pre = TrainConfig::for_stage(Stage::PretrainConditional);
        pre.iterations = 6000;
        pre.batch = 32;
        pre.lr = 1e-3;
        pre.crop_frames = 1;
        pre.t_min = 0.05;
        pretrain(&mut net, &data, &schedule, &pre, &root.substream("train")).unwrap();
        let mut cfgc = TrainConfig::for_stage(Stage::CfgStage);
        cfgc.iterations = 6000;
        cfgc.batch = 32;
        cfgc.lr = 1e-3;
        cfgc.crop_frames = 1;
        cfgc.t_min = 0.05;
        let out = cfg_stage(&mut net, &data, &schedule, &cfgc, &root.substream("train.cfg")).unwrap();
        let dropout_fraction =
            out.report.null_replacements as f64 / out.report.samples_total as f64;
        GaussianPair {
            mix,
            net,
            embeddings,
            schedule,
            dropout_fraction,
        }
    })
}

/// Fully trained toy-world stack shared by the heavy pipeline criteria.
pub struct Stack {
    pub world: ToyWorld,
    pub bundle: ModelBundle,
    pub schedule: NoiseSchedule,
    /// Two rendered reference utterances of the first held-out speaker.
    pub reference: Vec<Utterance>,
}

pub fn trained_stack() -> &'static Stack {
    static STACK: OnceLock<Stack> = OnceLock::new();
    STACK.get_or_init(|| {
        let world = ToyWorld::generate(WorldConfig {
            seed: 7,
            num_speakers: 12,
            holdout_speakers: 3,
            ..Default::default()
        })
        .unwrap();
        let schedule = NoiseSchedule::default();
        let root = Rng::new(99);
        let dims = BundleDims {
            channels: world.config.channels,
            embed_dim: world.config.embed_dim,
            classes: world.config.num_phonemes,
            score_hidden: 48,
            score_depth: 2,
            classifier_hidden: 64,
            classifier_depth: 2,
            duration_hidden: 32,
            encoder_hidden: 48,
        };
        let mut bundle = ModelBundle::initialize(&dims, &root);
        let mut drng = root.substream("gen");
        let mut data: Vec<(Utterance, Tensor)> = Vec::new();
        for s in world.train_speakers() {
            for _ in 0..40 {
                let seq = world.random_phonemes(4, 8, &mut drng);
                let utt = world.render(s, &seq, &mut drng).unwrap();
                let e = world.oracle_embedding(s).unwrap();
                data.push((utt, e));
            }
        }
        let clf_cfg = ClassifierTrainConfig {
            iterations: 6000,
            ..Default::default()
        };
        train_classifier(
            &mut bundle.classifier,
            &data,
            &schedule,
            &clf_cfg,
            &root.substream("clf"),
        )
        .unwrap();
        let eval_cfg = ClassifierTrainConfig {
            iterations: 1500,
            clean_only: true,
            ..Default::default()
        };
        train_classifier(
            &mut bundle.eval_classifier,
            &data,
            &schedule,
            &eval_cfg,
            &root.substream("eclf"),
        )
        .unwrap();
        train_duration(
            &mut bundle.duration,
            &data,
            &DurationTrainConfig::default(),
            &root.substream("dur"),
        )
        .unwrap();
        train_encoder(
            &mut bundle.encoder,
            &world,
            &EncoderTrainConfig::default(),
            &root.substream("enc"),
        )
        .unwrap();
        let items: Vec<TrainItem> = data
            .iter()
            .map(|(u, e)| TrainItem {
                frames: u.frames.clone(),
                embedding: e.clone(),
            })
            .collect();
        let mut pre = TrainConfig::for_stage(Stage::PretrainConditional);
        pre.iterations = 14000;
        pre.batch = 24;
        pre.lr = 7e-4;
        pre.crop_frames = 16;
        pre.t_min = 0.05;
        pretrain(&mut bundle.score, &items, &schedule, &pre, &root.substream("score")).unwrap();
        let mut cfgc = TrainConfig::for_stage(Stage::CfgStage);
        cfgc.iterations = 6000;
        cfgc.batch = 24;
        cfgc.lr = 7e-4;
        cfgc.crop_frames = 16;
        cfgc.t_min = 0.05;
        let out = cfg_stage(
            &mut bundle.score,
            &items,
            &schedule,
            &cfgc,
            &root.substream("score.cfg"),
        )
        .unwrap();
        bundle.optimizer = Some(out.optimizer);
        let target = world.holdout_speakers()[0];
        let mut ref_rng = root.substream("refs");
        let reference = (0..2)
            .map(|_| {
                let seq = world.random_phonemes(6, 10, &mut ref_rng);
                world.render(target, &seq, &mut ref_rng).unwrap()
            })
            .collect();
        Stack {
            world,
            bundle,
            schedule,
            reference,
        }
    })
}

/// Constant-duration predictor used where duration quality is irrelevant.
pub fn constant_duration_predictor(
    classes: usize,
    embed_dim: usize,
    frames: usize,
) -> difftts::aux_models::DurationPredictor {
    let mut model = difftts::aux_models::DurationPredictor::new(
        difftts::aux_models::DurationPredictorConfig {
            classes,
            embed_dim,
            phoneme_embed: 4,
            hidden: 8,
        },
        &mut Rng::new(0).substream("const_dur"),
    );
    for (name, t) in model.named_params_mut() {
        if name == "duration.l2.w" {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        if name == "duration.l2.b" {
            t.data_mut()[0] = (frames as f64).ln();
        }
    }
    model
}
