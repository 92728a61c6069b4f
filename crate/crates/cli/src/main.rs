use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use talkface_core::inference::{evaluate, infer, noise_sweep, sweep_csv, write_report, InferenceRequest};
use talkface_core::landmark_space::fit_basis;
use talkface_core::landmark_space::PcaBasis;
use talkface_core::media::dataset::{Dataset, Split};
use talkface_core::media::ingest::{preprocess, IngestConfig};
use talkface_core::media::mfcc::MfccConfig;
use talkface_core::media::synth::{generate_synthetic_dataset, SyntheticConfig};
use talkface_core::metrics::{LandmarkSource, LmdOptions};
use talkface_core::trainer::{
    ablation_matrix, load_atnet, load_probe, load_vgnet, train_atnet, train_probe, train_vgnet, validate_atnet, Stage,
    TrainConfig,
};
use talkface_core::{Error, Result};

#[derive(Parser)]
#[command(name = "talkface", version, about = "Audio-driven talking face generation")]
struct Cli {
    /// Seed for every random draw; overrides `seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat TOML training configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Refuse wall-clock budgets so that reruns reproduce every artifact.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align recorded sequences with precomputed landmarks into a dataset.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Render the synthetic corpus.
    SynthData {
        #[arg(long, default_value_t = 20)]
        identities: usize,
        #[arg(long, default_value_t = 16)]
        length: usize,
        #[arg(long, default_value_t = 3)]
        sequences: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit the landmark PCA basis on the training split.
    FitPca {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Comma-separated per-component boost weights, applied on reconstruction.
        #[arg(long)]
        boost: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    Train(TrainArgs),
    /// Audio plus one face image to frames.
    Infer {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        atnet: PathBuf,
        #[arg(long)]
        vgnet: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
        /// Also write the attention and motion streams.
        #[arg(long)]
        dump_attention: bool,
        /// Mux frames and audio into out/video.mp4 with ffmpeg when it is installed.
        #[arg(long)]
        mux: bool,
    },
    /// PSNR, SSIM and LMD on the test split.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum, default_value_t = Mode::GtLandmarks)]
        mode: Mode,
        #[arg(long)]
        atnet: Option<PathBuf>,
        #[arg(long)]
        basis: Option<PathBuf>,
        /// Also write per-sequence rows as CSV (always written to sequences.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evaluation under Gaussian noise on the input landmarks.
    SweepNoise {
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated noise standard deviations in pixels.
        #[arg(long, default_value = "0,1,2,4,8")]
        sigmas: String,
    },
    /// Train and evaluate every ablation variant.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Wall-clock minutes per variant.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long)]
        lmd_raw: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Basis file; required for atnet, recorded in the vgnet checkpoint when given.
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Comma-separated features to switch off: dma, mmcrnn, dal, rd, or baseline.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Wall-clock budget in minutes.
    #[arg(long)]
    budget: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vgnet: PathBuf,
    /// Landmark probe checkpoint used to read landmarks off frames.
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Disable centroid alignment in LMD.
    #[arg(long)]
    lmd_raw: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Atnet,
    Vgnet,
    Probe,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    GtLandmarks,
    PredictedLandmarks,
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::from_toml(
            &fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        )?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_limits(cfg: &mut TrainConfig, steps: Option<usize>, budget: Option<f64>, deterministic: bool) -> Result<()> {
    if steps.is_some() {
        cfg.max_steps = steps;
    }
    if budget.is_some() {
        cfg.budget_minutes = budget;
    }
    if deterministic && cfg.budget_minutes.is_some() {
        return Err(Error::Config("a wall-clock budget is not reproducible; use a step limit with --deterministic".into()));
    }
    Ok(())
}

/// Distances are reported in pixels of a 128-wide canonical frame whatever the dataset size.
fn lmd_options(raw: bool) -> LmdOptions {
    LmdOptions { align_centroid: !raw, ..Default::default() }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad {what} value {s:?}"))))
        .collect()
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess { input, output, fps, size } => {
            let cfg = IngestConfig { fps: *fps, image_size: *size, mfcc: MfccConfig::default() };
            let n = preprocess(input, output, &cfg)?;
            info!("wrote {n} sequences to {}", output.display());
        }
        Command::SynthData { identities, length, sequences, size, output } => {
            let cfg = SyntheticConfig {
                identities: *identities,
                length: *length,
                sequences_per_identity: *sequences,
                image_size: *size,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let manifest = generate_synthetic_dataset(&cfg, output)?;
            info!("wrote {} identities to {}", manifest.identities.len(), output.display());
        }
        Command::FitPca { data, k, boost, out } => {
            let dataset = Dataset::open(data)?;
            let shapes: Vec<_> = dataset.load_all(Some(Split::Train))?.into_iter().flat_map(|s| s.landmarks).collect();
            let mut basis = fit_basis(&shapes, *k)?;
            if let Some(b) = boost {
                basis.set_boost(parse_list(b, "boost")?)?;
            }
            basis.save(out)?;
            info!("k = {k}, retained variance {:.4}", basis.retained_variance());
        }
        Command::Train(args) => {
            let mut cfg = train_config(cli)?;
            cfg.stage = match args.stage {
                StageArg::Atnet => Stage::Atnet,
                StageArg::Vgnet => Stage::Vgnet,
                StageArg::Probe => Stage::Probe,
            };
            if let Some(list) = &args.ablate {
                cfg.apply_ablation(list)?;
            }
            apply_limits(&mut cfg, args.steps, args.budget, cli.deterministic)?;
            cfg.validate()?;
            let dataset = Dataset::open(&args.data)?;
            fs::create_dir_all(&args.out)?;
            fs::write(args.out.join("config.toml"), cfg.to_toml())?;
            let outcome = match cfg.stage {
                Stage::Atnet => {
                    let path = args.basis.as_ref().ok_or_else(|| Error::Config("atnet training needs --basis".into()))?;
                    let basis = PcaBasis::load(path)?;
                    let outcome = train_atnet(&dataset, &basis, &cfg, &args.out)?;
                    let (_, net) = load_atnet(&outcome.checkpoint, &basis)?;
                    let v = validate_atnet(&dataset, &basis, &net)?;
                    info!("atnet validation mse {:.6} (constant-mean baseline {:.6})", v.mse, v.baseline_mse);
                    outcome
                }
                Stage::Vgnet => {
                    let hash = match &args.basis {
                        Some(p) => Some(PcaBasis::load(p)?.hash()),
                        None => None,
                    };
                    train_vgnet(&dataset, &cfg, &args.out, hash)?
                }
                Stage::Probe => train_probe(&dataset, &cfg, &args.out)?,
            };
            if outcome.stopped_by_budget {
                warn!("stopped by the wall-clock budget after {} steps", outcome.steps);
            }
            info!("{} steps, final loss {:.6}, checkpoint {}", outcome.steps, outcome.final_loss, outcome.checkpoint.display());
        }
        Command::Infer { audio, image, landmarks, basis, atnet, vgnet, out, fps, dump_attention, mux } => {
            let request = InferenceRequest {
                audio_path: audio.clone(),
                example_image_path: image.clone(),
                example_landmarks_path: landmarks.clone(),
                basis_path: basis.clone(),
                atnet_ckpt: atnet.clone(),
                vgnet_ckpt: vgnet.clone(),
                output_dir: out.clone(),
                dump_attention: *dump_attention,
                fps: *fps,
                mfcc: MfccConfig::default(),
            };
            let summary = infer(&request)?;
            info!("throughput {:.2} frames/s", summary.throughput_fps);
            if *mux {
                mux_video(out, audio, *fps);
            }
        }
        Command::Eval { eval: e, mode, atnet, basis, csv } => {
            let dataset = Dataset::open(&e.data)?;
            let (_, vg) = load_vgnet(&e.vgnet)?;
            let (_, probe) = load_probe(&e.probe)?;
            let lmd = lmd_options(e.lmd_raw);
            let (report, rows) = match mode {
                Mode::GtLandmarks => evaluate(&dataset, &vg, None, &probe, LandmarkSource::GtLandmarks, &lmd)?,
                Mode::PredictedLandmarks => {
                    let (Some(a), Some(b)) = (atnet, basis) else {
                        return Err(Error::Config("predicted-landmarks mode needs --atnet and --basis".into()));
                    };
                    let basis = PcaBasis::load(b)?;
                    let (_, at) = load_atnet(a, &basis)?;
                    evaluate(&dataset, &vg, Some((&at, &basis)), &probe, LandmarkSource::PredictedLandmarks, &lmd)?
                }
            };
            write_report(&e.out, &report, &rows)?;
            if let Some(path) = csv {
                fs::write(path, talkface_core::metrics::rows_to_csv(&rows))?;
            }
            info!("psnr {:.3} ssim {:.4} lmd {:.4} over {} sequences", report.psnr, report.ssim, report.lmd, report.n_sequences);
        }
        Command::SweepNoise { eval: e, sigmas } => {
            let dataset = Dataset::open(&e.data)?;
            let (_, vg) = load_vgnet(&e.vgnet)?;
            let (_, probe) = load_probe(&e.probe)?;
            let sigmas = parse_list(sigmas, "sigma")?;
            let rows = noise_sweep(&dataset, &vg, &probe, &sigmas, cli.seed.unwrap_or(0), &lmd_options(e.lmd_raw))?;
            fs::create_dir_all(&e.out)?;
            fs::write(e.out.join("sweep.csv"), sweep_csv(&rows))?;
            write_json(&e.out.join("sweep.json"), &rows)?;
        }
        Command::Ablate { data, probe, out, steps, budget, lmd_raw } => {
            let mut cfg = train_config(cli)?;
            apply_limits(&mut cfg, *steps, *budget, cli.deterministic)?;
            let dataset = Dataset::open(data)?;
            let (_, probe) = load_probe(probe)?;
            let rows = ablation_matrix(&dataset, &cfg, &probe, &lmd_options(*lmd_raw), out)?;
            let mut csv = String::from("variant,dma,mmcrnn,dal,rd,atvg_p,steps,psnr,ssim,lmd\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{:.6},{:.6},{:.6}\n",
                    r.variant, r.dma, r.mmcrnn, r.dal, r.rd, r.atvg_p, r.steps, r.report.psnr, r.report.ssim, r.report.lmd
                ));
            }
            fs::write(out.join("ablation.csv"), csv)?;
            write_json(&out.join("ablation.json"), &rows)?;
        }
    }
    Ok(())
}

/// Best effort; a missing or failing ffmpeg only produces a warning.
fn mux_video(out: &Path, audio: &Path, fps: f64) {
    let status = std::process::Command::new("ffmpeg")
        .args(["-y", "-loglevel", "error", "-framerate", &fps.to_string(), "-i"])
        .arg(out.join("frames").join("%06d.png"))
        .arg("-i")
        .arg(audio)
        .args(["-c:v", "libx264", "-pix_fmt", "yuv420p", "-shortest"])
        .arg(out.join("video.mp4"))
        .status();
    match status {
        Ok(s) if s.success() => info!("wrote {}", out.join("video.mp4").display()),
        Ok(s) => warn!("ffmpeg exited with {s}"),
        Err(e) => warn!("ffmpeg not available: {e}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
