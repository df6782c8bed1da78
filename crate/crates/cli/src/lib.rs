//! Command-line entry point covering the full pipeline: synthetic data
//! generation, staged pretraining, full-model training, video generation,
//! evaluation, ablations, and difference-map emission.
//!
//! Configuration resolves in order: compiled-in defaults, an optional
//! `--config` TOML file of flat dotted keys, then trailing `key=value`
//! overrides. Every run writes a `run.json` provenance record with the
//! resolved configuration. `TCSAN_THREADS` bounds worker parallelism
//! (0 or unset picks the core count).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tcsan_core::config::{key_specs, Config};
use tcsan_core::data::synth::{synth_dataset_to_dir, SynthConfig};
use tcsan_core::data::{load_manifest, load_wav, DatasetManifest, Split};
use tcsan_core::error::Error as CoreError;
use tcsan_core::metrics::EvalReport;
use tcsan_core::networks::ConvPyramid;
use tcsan_core::training::{
    generate_video, pretrain_au_classifier, pretrain_audio2au, run_ablation, train_full,
    AblationVariant, Checkpoint, RngState, TrainSetup,
};

/// Version string recorded in provenance files.
pub fn version_string() -> String {
    format!("tcsan-{}", env!("CARGO_PKG_VERSION"))
}

fn config_key_help() -> String {
    let mut out =
        String::from("Config keys (set via --config file or trailing key=value overrides):\n");
    for spec in key_specs() {
        out.push_str(&format!(
            "  {:24} default {:10} {}\n",
            spec.key, spec.default, spec.help
        ));
    }
    out
}

#[derive(Parser)]
#[command(
    name = "tcsan",
    version,
    about = "Talking head generation driven by audio and speech-related facial action units"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file of flat dotted config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trailing key=value overrides (win over the config file).
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<Config> {
        let mut cfg = Config::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural synthetic dataset.
    #[command(name = "synth-data", after_help = config_key_help())]
    SynthData {
        /// Training clips (test clips are max(1, clips/4) extra).
        #[arg(long, default_value_t = 4)]
        clips: usize,
        /// Frames per clip.
        #[arg(long, default_value_t = 30)]
        frames: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain the audio-to-AU module on a dataset manifest.
    #[command(name = "pretrain-a2au", after_help = config_key_help())]
    PretrainA2au {
        /// Dataset manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain the AU classifier and report per-AU scores.
    #[command(name = "pretrain-auclf", after_help = config_key_help())]
    PretrainAuclf {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the full generator from pretrained components.
    #[command(after_help = config_key_help())]
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained audio-to-AU checkpoint.
        #[arg(long)]
        a2au: PathBuf,
        /// Pretrained AU classifier checkpoint.
        #[arg(long)]
        auclf: PathBuf,
        /// Externally supplied frozen perceptual weights (optional).
        #[arg(long)]
        perc: Option<PathBuf>,
        /// Resume from a full-model checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Drive an identity image with audio and write the frames.
    #[command(after_help = config_key_help())]
    Generate {
        /// Full-model checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Identity face image (PNG).
        #[arg(long)]
        identity: PathBuf,
        /// Driving audio (16-bit PCM WAV).
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output frame rate; defaults to the checkpoint's data.fps.
        #[arg(long)]
        fps: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint against a dataset split.
    #[command(after_help = config_key_help())]
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate (train or test).
        #[arg(long, default_value = "test")]
        split: String,
        /// Score with this pretrained AU classifier instead of the
        /// checkpoint's own (fine-tuned) one.
        #[arg(long)]
        auclf: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one experiment variant and evaluate it on the test split.
    #[command(after_help = config_key_help())]
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        a2au: PathBuf,
        #[arg(long)]
        auclf: PathBuf,
        /// Variant: full, baseline, rec-per, rec-per-id, tcsan, tcsan-au, audio2au.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Emit per-frame difference maps between two frame directories.
    Diffmap {
        /// Directory of generated frames (PNG).
        #[arg(long)]
        generated: PathBuf,
        /// Directory of reference frames (PNG).
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run the CLI; returns the process exit code (0 success, 1 runtime failure,
/// 2 usage error).
pub fn run(argv: &[String]) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_run_record(
    out_dir: &Path,
    subcommand: &str,
    argv: &[String],
    cfg: Option<&Config>,
    seed: u64,
    started: Instant,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut config_map = serde_json::Map::new();
    if let Some(cfg) = cfg {
        for spec in key_specs() {
            config_map.insert(
                spec.key.to_string(),
                serde_json::Value::String(cfg.get(spec.key).unwrap_or_default()),
            );
        }
    }
    let record = serde_json::json!({
        "subcommand": subcommand,
        "argv": argv,
        "resolved_config": config_map,
        "seed": seed,
        "version": version_string(),
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    std::fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    Ok(())
}

fn load_split_checked(
    manifest: &DatasetManifest,
    split: Split,
    fps: f64,
) -> anyhow::Result<Vec<tcsan_core::data::SampleClip>> {
    let clips = manifest.load_split(split, fps)?;
    if clips.is_empty() {
        anyhow::bail!("manifest has no {} clips", split.as_str());
    }
    Ok(clips)
}

fn losses_csv(losses: &[tcsan_core::training::StepLoss]) -> String {
    let mut out = String::from("step,total,rec,id,per,au\n");
    for l in losses {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            l.step, l.total, l.rec, l.id, l.per, l.au
        ));
    }
    out
}

fn write_eval_report(out_dir: &Path, name: &str, report: &EvalReport) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join(format!("eval_{name}.csv")),
        format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row()),
    )?;
    std::fs::write(out_dir.join(format!("eval_{name}.txt")), report.to_kv())?;
    Ok(())
}

fn dispatch(cmd: Command, argv: &[String]) -> anyhow::Result<()> {
    let started = Instant::now();
    match cmd {
        Command::SynthData {
            clips,
            frames,
            seed,
            out,
            cfg,
        } => {
            let config = cfg.resolve()?;
            let synth = SynthConfig {
                clips,
                frames_per_clip: frames,
                seed,
                fps: config.data.fps,
                sample_rate: config.data.sample_rate,
            };
            let (manifest, path) = synth_dataset_to_dir(&synth, &out)?;
            log::info!("wrote {} clips and {}", manifest.clips.len(), path.display());
            write_run_record(&out, "synth-data", argv, Some(&config), seed, started)?;
        }
        Command::PretrainA2au { data, out, cfg } => {
            let config = cfg.resolve()?;
            let manifest = load_manifest(&data)?;
            let train = load_split_checked(&manifest, Split::Train, config.data.fps)?;
            let outcome = pretrain_audio2au(&train, &config.train, &config.model)?;
            let (first, last) = outcome.smoothed_endpoints(20);
            log::info!(
                "audio-to-AU pretraining: {} steps, smoothed loss {first:.4} -> {last:.4}",
                outcome.steps
            );
            std::fs::create_dir_all(&out)?;
            let mut csv = String::from("step,au_loss\n");
            for (i, l) in outcome.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.6}\n"));
            }
            std::fs::write(out.join("losses.csv"), csv)?;
            let steps = outcome.steps;
            let ckpt = outcome.into_checkpoint(config.to_flat_text());
            ckpt.save(&out.join(format!("ckpt_{steps:08}.bin")))?;
            write_run_record(&out, "pretrain-a2au", argv, Some(&config), config.train.seed, started)?;
        }
        Command::PretrainAuclf { data, out, cfg } => {
            let config = cfg.resolve()?;
            let manifest = load_manifest(&data)?;
            let train = load_split_checked(&manifest, Split::Train, config.data.fps)?;
            let test = manifest.load_split(Split::Test, config.data.fps)?;
            let (outcome, report) =
                pretrain_au_classifier(&train, &test, &config.train, &config.model)?;
            log::info!(
                "AU classifier pretraining: train avg acc {:.2}%, test avg acc {}",
                report.train.avg_accuracy * 100.0,
                report
                    .test
                    .as_ref()
                    .map(|t| format!("{:.2}%", t.avg_accuracy * 100.0))
                    .unwrap_or_else(|| "n/a".into())
            );
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.csv"), report.to_csv())?;
            let steps = outcome.steps;
            let ckpt = outcome.into_checkpoint(config.to_flat_text());
            ckpt.save(&out.join(format!("ckpt_{steps:08}.bin")))?;
            write_run_record(&out, "pretrain-auclf", argv, Some(&config), config.train.seed, started)?;
        }
        Command::Train {
            data,
            a2au,
            auclf,
            perc,
            resume,
            out,
            cfg,
        } => {
            let config = cfg.resolve()?;
            let manifest = load_manifest(&data)?;
            let train = load_split_checked(&manifest, Split::Train, config.data.fps)?;
            let a2au_ckpt = Checkpoint::load(&a2au)?;
            let auclf_ckpt = Checkpoint::load(&auclf)?;
            let perceptual = match perc {
                Some(path) => ConvPyramid::from_params(Checkpoint::load(&path)?.params)?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ 0xA11CE);
                    ConvPyramid::init(&config.model, &mut rng)
                }
            };
            let resume_ckpt = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let mut train_cfg = config.train.clone();
            train_cfg.loss_weights = config.variant.loss_weights(&config.loss);
            let setup = TrainSetup {
                train_cfg: &train_cfg,
                tcsan_cfg: &config.tcsan,
                model_cfg: &config.model,
                variant: config.variant.generator(),
                a2au: &a2au_ckpt.params,
                auclf: &auclf_ckpt.params,
                perceptual: &perceptual,
                config_text: config.to_flat_text(),
            };
            std::fs::create_dir_all(&out)?;
            let outcome = train_full(&train, &setup, Some(&out), resume_ckpt)?;
            std::fs::write(out.join("losses.csv"), losses_csv(&outcome.losses))?;
            log::info!(
                "training finished at step {}; final total loss {:.4}",
                outcome.step,
                outcome.losses.last().map(|l| l.total).unwrap_or(f64::NAN)
            );
            write_run_record(&out, "train", argv, Some(&config), config.train.seed, started)?;
        }
        Command::Generate {
            ckpt,
            identity,
            audio,
            out,
            fps,
            cfg,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let config = if cfg.config.is_some() || !cfg.overrides.is_empty() {
                cfg.resolve()?
            } else {
                Config::from_flat_text(&checkpoint.config_text)?
            };
            let fps = fps.unwrap_or(config.data.fps);
            let identity_img = tcsan_core::data::load_frame_png(&identity)?;
            let track = load_wav(&audio)?;
            let frames = generate_video(
                &identity_img,
                &track,
                &checkpoint.params,
                config.variant.generator(),
                &config.tcsan,
                &config.model,
                fps,
            )?;
            let frames_dir = out.join("frames");
            std::fs::create_dir_all(&frames_dir)?;
            for (i, f) in frames.iter().enumerate() {
                tcsan_core::data::save_frame_png(&frames_dir.join(format!("{i:06}.png")), f)?;
            }
            log::info!("wrote {} frames to {}", frames.len(), frames_dir.display());
            write_run_record(&out, "generate", argv, Some(&config), config.train.seed, started)?;
        }
        Command::Evaluate {
            ckpt,
            data,
            split,
            auclf,
            out,
            cfg,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let config = if cfg.config.is_some() || !cfg.overrides.is_empty() {
                cfg.resolve()?
            } else {
                Config::from_flat_text(&checkpoint.config_text)?
            };
            let split = Split::parse(&split)?;
            let manifest = load_manifest(&data)?;
            let clips = load_split_checked(&manifest, split, config.data.fps)?;
            let judge = match auclf {
                Some(path) => Checkpoint::load(&path)?.params,
                None => checkpoint.params.clone(),
            };
            let mut generated = Vec::with_capacity(clips.len());
            for clip in &clips {
                generated.push(generate_video(
                    &clip.identity_frame,
                    &clip.audio,
                    &checkpoint.params,
                    config.variant.generator(),
                    &config.tcsan,
                    &config.model,
                    clip.fps,
                )?);
            }
            let report = tcsan_core::metrics::evaluate_many(
                &generated,
                &clips,
                &judge,
                "auclf",
                &config.model,
                0.5,
            )?;
            log::info!(
                "{}: PSNR {:.3} SSIM {:.3} avg F1 {:.3} avg acc {:.2}%",
                split.as_str(),
                report.psnr_mean,
                report.ssim_mean,
                report.avg_f1,
                report.avg_accuracy * 100.0
            );
            write_eval_report(&out, split.as_str(), &report)?;
            write_run_record(&out, "evaluate", argv, Some(&config), config.train.seed, started)?;
        }
        Command::Ablate {
            data,
            a2au,
            auclf,
            variant,
            out,
            cfg,
        } => {
            let mut config = cfg.resolve()?;
            config.variant = AblationVariant::parse(&variant)?;
            let manifest = load_manifest(&data)?;
            let train = load_split_checked(&manifest, Split::Train, config.data.fps)?;
            let test = load_split_checked(&manifest, Split::Test, config.data.fps)?;
            let a2au_ckpt = Checkpoint::load(&a2au)?;
            let auclf_ckpt = Checkpoint::load(&auclf)?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ 0xA11CE);
            let perceptual = ConvPyramid::init(&config.model, &mut rng);
            let (report, outcome) = run_ablation(
                &train,
                &test,
                config.variant,
                &config.train,
                &config.tcsan,
                &config.model,
                &a2au_ckpt.params,
                &auclf_ckpt.params,
                &perceptual,
                config.data.fps,
            )?;
            log::info!(
                "variant {}: PSNR {:.3} SSIM {:.3} avg F1 {:.3} avg acc {:.2}%",
                config.variant.name(),
                report.psnr_mean,
                report.ssim_mean,
                report.avg_f1,
                report.avg_accuracy * 100.0
            );
            std::fs::create_dir_all(&out)?;
            write_eval_report(&out, config.variant.name(), &report)?;
            let ckpt = Checkpoint {
                step: outcome.step,
                config_text: config.to_flat_text(),
                rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
                params: outcome.params.clone(),
                groups: outcome.groups,
            };
            ckpt.save(&out.join(format!("ckpt_{:08}.bin", outcome.step)))?;
            write_run_record(&out, "ablate", argv, Some(&config), config.train.seed, started)?;
        }
        Command::Diffmap {
            generated,
            reference,
            out,
        } => {
            let list = |dir: &Path| -> anyhow::Result<Vec<PathBuf>> {
                let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| CoreError::data(dir, e.to_string()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "png"))
                    .collect();
                v.sort();
                Ok(v)
            };
            let gen = list(&generated)?;
            let refs = list(&reference)?;
            if gen.len() != refs.len() || gen.is_empty() {
                anyhow::bail!(
                    "frame count mismatch: {} generated vs {} reference",
                    gen.len(),
                    refs.len()
                );
            }
            std::fs::create_dir_all(&out)?;
            for (i, (g, r)) in gen.iter().zip(&refs).enumerate() {
                let a = tcsan_core::data::load_frame_png(g)?;
                let b = tcsan_core::data::load_frame_png(r)?;
                let map = tcsan_core::metrics::difference_map(&a, &b);
                tcsan_core::data::write_grayscale_png(&out.join(format!("diff_{i:06}.png")), &map)?;
            }
            log::info!("wrote {} difference maps", gen.len());
            write_run_record(&out, "diffmap", argv, None, 0, started)?;
        }
    }
    Ok(())
}
