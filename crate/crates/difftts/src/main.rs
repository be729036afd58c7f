//! Command-line driver: data generation, the training stages, guided
//! sampling, the speaker-scale sweep, and the fine-tuning grid.
//!
//! Exit codes: 0 success, 2 usage error (clap default), 1 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use difftts::harness::dataset::SpeakerEntry;
use difftts::harness::experiment::{self, finetune_grid_cells, gamma_sweep_cells, run_experiment};
use difftts::harness::{self, Config, DatasetFile, ModelBundle};
use difftts::numerics::Rng;
use difftts::synthesis::{synthesize, ModelSet, SynthesisRequest};
use difftts::toyworld::Utterance;

#[derive(Parser)]
#[command(name = "difftts", version, about = "Guided diffusion TTS on a synthetic frame world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every random draw derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and reference datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Training dataset output (defaults to the config's data_path).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the auxiliary models and the conditional score model.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Output bundle checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a pretrained bundle with the classifier-free stage.
    CfgTrain {
        #[command(flatten)]
        common: Common,
        /// Input bundle checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the score model on a reference recording.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference dataset file (holdout-speaker utterances).
        #[arg(long)]
        reference: PathBuf,
        /// Fine-tuning steps.
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize one utterance with guided sampling.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Speaker classifier-free scale.
        #[arg(long, value_name = "F")]
        gamma_s: Option<f64>,
        /// Text gradient scale.
        #[arg(long, value_name = "F")]
        gamma_t: Option<f64>,
        /// Reverse steps.
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
        /// Prior temperature.
        #[arg(long, value_name = "F")]
        temperature: Option<f64>,
        /// Output sample file; diagnostics go to <out>.diag.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the speaker classifier-free scale and emit metrics.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fine-tuning iterations × optimizer grid and emit metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        None => Ok(Config::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            Ok(Config::parse(&text)?)
        }
    }
}

fn load_reference(path: &Path) -> Result<(DatasetFile, Vec<Utterance>)> {
    let ds = DatasetFile::load(path)
        .with_context(|| format!("reading reference {}", path.display()))?;
    if ds.records.is_empty() {
        bail!("reference file has no utterances");
    }
    let speaker = ds.records[0].speaker;
    let records: Vec<Utterance> = ds
        .records
        .iter()
        .filter(|u| u.speaker == speaker)
        .cloned()
        .collect();
    Ok((ds, records))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let world = harness::world_from_config(&cfg, common.seed)?;
            let rng = Rng::new(common.seed);
            let train = experiment::render_training_split(&world, &cfg, &rng)?;
            let reference = experiment::render_reference_split(&world, &cfg, &rng)?;
            let holdout = world.holdout_speakers();
            let speakers: Vec<SpeakerEntry> = (0..world.config.num_speakers)
                .map(|id| SpeakerEntry {
                    id,
                    holdout: holdout.contains(&id),
                    speaker: world.speakers[id].clone(),
                })
                .collect();
            let data_path = out.unwrap_or_else(|| PathBuf::from(cfg.get_str("data_path", "data.gtd")));
            let ref_path = PathBuf::from(cfg.get_str("reference_path", "reference.gtd"));
            let train_file = DatasetFile {
                channels: world.config.channels,
                phoneme_classes: world.config.num_phonemes,
                speakers: speakers.clone(),
                records: train,
            };
            train_file.save(&data_path)?;
            let ref_file = DatasetFile {
                channels: world.config.channels,
                phoneme_classes: world.config.num_phonemes,
                speakers,
                records: reference,
            };
            ref_file.save(&ref_path)?;
            println!(
                "wrote {} training utterances to {} and {} reference utterances to {}",
                train_file.records.len(),
                data_path.display(),
                ref_file.records.len(),
                ref_path.display()
            );
            Ok(())
        }
        Command::Pretrain { common, out } => {
            let cfg = load_config(&common)?;
            let world = harness::world_from_config(&cfg, common.seed)?;
            let schedule = harness::schedule_from_config(&cfg)?;
            let data_path = PathBuf::from(cfg.get_str("data_path", "data.gtd"));
            let ds = DatasetFile::load(&data_path)
                .with_context(|| format!("reading dataset {}", data_path.display()))?;
            let dims = harness::bundle::BundleDims::from_config(&cfg)?;
            let rng = Rng::new(common.seed);
            let mut bundle = ModelBundle::initialize(&dims, &rng);
            let data = experiment::attach_embeddings(&world, &bundle, &cfg, &ds.records)?;
            let report = experiment::train_bundle(&mut bundle, &world, &data, &cfg, &schedule, &rng)?;
            bundle.save(&out)?;
            let report_path = out.with_extension("train.csv");
            harness::write_atomic(&report_path, report.to_csv().as_bytes())?;
            println!(
                "pretrained bundle saved to {} ({} score iterations, final loss {:.4})",
                out.display(),
                report.losses.len(),
                report.losses.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::CfgTrain {
            common,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&common)?;
            let world = harness::world_from_config(&cfg, common.seed)?;
            let schedule = harness::schedule_from_config(&cfg)?;
            let data_path = PathBuf::from(cfg.get_str("data_path", "data.gtd"));
            let ds = DatasetFile::load(&data_path)?;
            let mut bundle = ModelBundle::load(&checkpoint)?;
            let data = experiment::attach_embeddings(&world, &bundle, &cfg, &ds.records)?;
            let rng = Rng::new(common.seed);
            let report = experiment::run_cfg_stage(&mut bundle, &data, &cfg, &schedule, &rng)?;
            bundle.save(&out)?;
            let report_path = out.with_extension("train.csv");
            harness::write_atomic(&report_path, report.to_csv().as_bytes())?;
            println!(
                "classifier-free stage saved to {} ({} iterations)",
                out.display(),
                report.losses.len()
            );
            Ok(())
        }
        Command::Finetune {
            common,
            checkpoint,
            reference,
            iterations,
            out,
        } => {
            let cfg = load_config(&common)?;
            let world = harness::world_from_config(&cfg, common.seed)?;
            let schedule = harness::schedule_from_config(&cfg)?;
            let mut bundle = ModelBundle::load(&checkpoint)?;
            let (_, records) = load_reference(&reference)?;
            let embedding = experiment::reference_embedding(&world, &bundle, &cfg, &records[0])?;
            let frames: Vec<_> = records.iter().map(|u| u.frames.clone()).collect();
            let reset = cfg.get_bool("reset_optimizer", true)?;
            let rng = Rng::new(common.seed).substream("finetune");
            let (model, report, optimizer) = experiment::finetune_score(
                &bundle, &frames, &embedding, &cfg, &schedule, iterations, reset, &rng,
            )?;
            bundle.score = model;
            bundle.optimizer = Some(optimizer);
            bundle.save(&out)?;
            let report_path = out.with_extension("train.csv");
            harness::write_atomic(&report_path, report.to_csv().as_bytes())?;
            println!(
                "fine-tuned {} steps (reset_optimizer = {reset}); saved to {}",
                report.losses.len(),
                out.display()
            );
            Ok(())
        }
        Command::Sample {
            common,
            checkpoint,
            reference,
            gamma_s,
            gamma_t,
            steps,
            temperature,
            out,
        } => {
            let cfg = load_config(&common)?;
            let world = harness::world_from_config(&cfg, common.seed)?;
            let schedule = harness::schedule_from_config(&cfg)?;
            let mut sampler = harness::sampler_from_config(&cfg)?;
            let mut guidance = harness::guidance_from_config(&cfg)?;
            if let Some(g) = gamma_s {
                guidance.gamma_s = g;
            }
            if let Some(g) = gamma_t {
                guidance.gamma_t = g;
            }
            if let Some(n) = steps {
                sampler.steps = n;
            }
            if let Some(tau) = temperature {
                sampler.temperature = tau;
            }
            let bundle = ModelBundle::load(&checkpoint)?;
            let (ds, records) = load_reference(&reference)?;
            let embedding = experiment::reference_embedding(&world, &bundle, &cfg, &records[0])?;
            let sentences =
                experiment::evaluation_sentences(&cfg, bundle.classifier.config.classes, common.seed)?;
            let request = SynthesisRequest {
                phonemes: sentences[0].clone(),
                speaker_embedding: embedding.clone(),
                guidance,
                sampler,
                schedule,
                models: ModelSet {
                    score: &bundle.score,
                    classifier: &bundle.classifier,
                    duration: &bundle.duration,
                },
                adapted_model: false,
            };
            let mut rng = Rng::new(common.seed).substream("sample");
            let result = synthesize(&request, &mut rng)?;
            // Store the sample with its predicted alignment.
            let mut spans = Vec::with_capacity(request.phonemes.len());
            let mut cursor = 0usize;
            for &d in &result.durations {
                spans.push((cursor, d));
                cursor += d;
            }
            let sample_file = DatasetFile {
                channels: ds.channels,
                phoneme_classes: ds.phoneme_classes,
                speakers: ds.speakers.clone(),
                records: vec![Utterance {
                    speaker: records[0].speaker,
                    phonemes: request.phonemes.clone(),
                    spans,
                    frames: result.frames.clone(),
                }],
            };
            sample_file.save(&out)?;
            let mut diag = String::from("step,t,score_norm,guidance_norm,ratio,skipped\n");
            for d in &result.diagnostics {
                let ratio = if d.score_norm > 0.0 {
                    d.guidance_term_norm / d.score_norm
                } else {
                    0.0
                };
                diag.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    d.step, d.t, d.score_norm, d.guidance_term_norm, ratio, d.skipped
                ));
            }
            harness::write_atomic(&out.with_extension("diag.csv"), diag.as_bytes())?;
            println!(
                "synthesized {} frames ({} phonemes) to {}",
                result.frames.shape()[0],
                request.phonemes.len(),
                out.display()
            );
            Ok(())
        }
        Command::Sweep {
            common,
            checkpoint,
            reference,
            out,
        } => {
            let cfg = load_config(&common)?;
            let world = harness::world_from_config(&cfg, common.seed)?;
            let bundle = ModelBundle::load(&checkpoint)?;
            let (_, records) = load_reference(&reference)?;
            let cells = gamma_sweep_cells(&cfg)?;
            let rows = run_experiment(&bundle, &world, &records, &cfg, &cells, common.seed, &out)?;
            println!("sweep wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            reference,
            out,
        } => {
            let cfg = load_config(&common)?;
            let world = harness::world_from_config(&cfg, common.seed)?;
            let bundle = ModelBundle::load(&checkpoint)?;
            let (_, records) = load_reference(&reference)?;
            let cells = finetune_grid_cells(&cfg)?;
            let rows = run_experiment(&bundle, &world, &records, &cfg, &cells, common.seed, &out)?;
            println!("eval wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
    }
}
