//! Command-line front end: each subcommand runs one pipeline stage (or the
//! whole pipeline) from JSON configs and checkpoint directories.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime/training error,
//! 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zerodiff::bundle::{generate_synthetic, load_bundle, save_bundle};
use zerodiff::checkpoint::{load_extractors, load_models, save_extractors, save_models};
use zerodiff::diffusion::build_vp_schedule;
use zerodiff::extractors::finetune;
use zerodiff::io::{read_matrix, read_u32s, write_json, write_matrix, write_u32s};
use zerodiff::networks::{init_models, ModelDims};
use zerodiff::pipeline::{
    resolve_out, run_diag, run_experiment, run_protocol, ExperimentConfig,
};
use zerodiff::trainer::{
    resume_training, train_dfg, train_dfg_checkpointed, train_drg, train_drg_checkpointed,
    TrainData,
};
use zerodiff::zsl::{evaluate_with_synth, synthesize, MetricsReport, SynthesizedSet};
use zerodiff::{Error, Result};

#[derive(Parser)]
#[command(name = "zerodiff", about = "Diffusion-augmented generative zero-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON experiment config; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune and freeze the feature/representation extractors.
    Finetune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train and freeze the representation generator.
    TrainDrg {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        extractors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from the stage state saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Stage 2: train and freeze the feature generator.
    TrainDfg {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        extractors: PathBuf,
        /// Model checkpoint from train-drg.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from the stage state saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Synthesize unseen-class features from frozen generators.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train final classifiers and report T1 / U / S / H.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        extractors: PathBuf,
        /// Synthesized set directory from synth.
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline end to end.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep keep-ratios and seeds, one run per cell.
    Protocol {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated keep ratios, e.g. 1.0,0.5,0.1
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.5, 0.1])]
        ratios: Vec<f64>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Critic-gap diagnostics from saved checkpoints.
    Diag {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        extractors: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_train_data(
    bundle_dir: &Path,
    extractors_dir: &Path,
) -> Result<(zerodiff::bundle::DatasetBundle, zerodiff::extractors::ExtractorPair, TrainData)> {
    let bundle = load_bundle(&resolve_out(bundle_dir))?;
    let (extractors, _) = load_extractors(&resolve_out(extractors_dir))?;
    let data = TrainData::from_bundle(&bundle, &extractors)?;
    Ok((bundle, extractors, data))
}

fn save_synth_set(dir: &Path, set: &SynthesizedSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    write_matrix(&dir.join("features.f32"), &set.features)?;
    write_matrix(&dir.join("representations.f32"), &set.representations)?;
    write_u32s(&dir.join("labels.u32"), &set.labels)
}

fn load_synth_set(dir: &Path) -> Result<SynthesizedSet> {
    Ok(SynthesizedSet {
        features: read_matrix(&dir.join("features.f32"))?,
        representations: read_matrix(&dir.join("representations.f32"))?,
        labels: read_u32s(&dir.join("labels.u32"))?,
    })
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let bundle = generate_synthetic(&cfg.synth)?;
            let out = resolve_out(&out);
            save_bundle(&bundle, &out)?;
            println!("wrote bundle with {} samples to {}", bundle.labels.len(), out.display());
        }
        Command::Finetune { config, bundle, out } => {
            let cfg = config.load()?;
            let bundle = load_bundle(&resolve_out(&bundle))?;
            let pair = finetune(&bundle, &cfg.train, cfg.train.seed)?;
            let out = resolve_out(&out);
            save_extractors(&out, &pair, &cfg.train)?;
            println!("wrote frozen extractors to {}", out.display());
        }
        Command::TrainDrg { config, bundle, extractors, out, resume } => {
            let cfg = config.load()?;
            let (bundle, _, data) = load_train_data(&bundle, &extractors)?;
            let out = resolve_out(&out);
            let trace = if resume {
                let (_, _, trace) = resume_training(&out, &data, None)?;
                trace
            } else {
                let dims = ModelDims::from_config(bundle.attributes.ncols(), &cfg.train);
                let mut models = init_models(dims, cfg.train.seed)?;
                let seed = cfg.train.seed.wrapping_add(1);
                let trace = if cfg.train.checkpoint_every > 0 {
                    train_drg_checkpointed(&data, &mut models, &cfg.train, seed, &out)?
                } else {
                    train_drg(&data, &mut models, &cfg.train, seed)?
                };
                save_models(&out, &models, &cfg.train)?;
                trace
            };
            std::fs::write(out.join("drg_trace.ndjson"), trace.to_ndjson())
                .map_err(|e| Error::io(out.display().to_string(), e))?;
            println!("wrote DRG checkpoint to {}", out.display());
        }
        Command::TrainDfg { config, bundle, extractors, models, out, resume } => {
            let cfg = config.load()?;
            let (_, _, data) = load_train_data(&bundle, &extractors)?;
            let out = resolve_out(&out);
            let trace = if resume {
                let (_, _, trace) = resume_training(&out, &data, None)?;
                trace
            } else {
                let (mut models, _) = load_models(&resolve_out(&models))?;
                let seed = cfg.train.seed.wrapping_add(2);
                let trace = if cfg.train.checkpoint_every > 0 {
                    train_dfg_checkpointed(&data, &mut models, &cfg.train, seed, &out)?
                } else {
                    train_dfg(&data, &mut models, &cfg.train, seed)?
                };
                save_models(&out, &models, &cfg.train)?;
                trace
            };
            std::fs::write(out.join("dfg_trace.ndjson"), trace.to_ndjson())
                .map_err(|e| Error::io(out.display().to_string(), e))?;
            println!("wrote DFG checkpoint to {}", out.display());
        }
        Command::Synth { config, bundle, models, out } => {
            let cfg = config.load()?;
            let bundle = load_bundle(&resolve_out(&bundle))?;
            let (models, _) = load_models(&resolve_out(&models))?;
            let schedule =
                build_vp_schedule(cfg.train.t_max, cfg.train.beta_min, cfg.train.beta_max)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(3));
            let set = synthesize(
                &models.r,
                &models.g,
                &bundle.attributes,
                &bundle.unseen_classes,
                cfg.train.n_syn,
                cfg.train.t_te,
                &schedule,
                &mut rng,
            )?;
            let out = resolve_out(&out);
            save_synth_set(&out, &set)?;
            println!("wrote {} synthesized samples to {}", set.labels.len(), out.display());
        }
        Command::Eval { config, bundle, extractors, synth, out } => {
            let cfg = config.load()?;
            let bundle = load_bundle(&resolve_out(&bundle))?;
            let (extractors, _) = load_extractors(&resolve_out(&extractors))?;
            let set = load_synth_set(&resolve_out(&synth))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(4));
            let report = evaluate_with_synth(&bundle, &extractors, &set, &cfg.train, &mut rng)?;
            let out = resolve_out(&out);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            write_json(&out.join("metrics.json"), &report)?;
            std::fs::write(
                out.join("metrics.csv"),
                format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()),
            )
            .map_err(|e| Error::io(out.display().to_string(), e))?;
            print_report(&report);
        }
        Command::Run { config, out } => {
            let cfg = config.load()?;
            let res = run_experiment(&cfg, &out)?;
            print_report(&res.report);
        }
        Command::Protocol { config, ratios, seeds, out } => {
            let cfg = config.load()?;
            if ratios.is_empty() || seeds.is_empty() {
                return Err(Error::Config("protocol needs at least one ratio and seed".into()));
            }
            if ratios.iter().any(|&r| !(0.0 < r && r <= 1.0)) {
                return Err(Error::Config("keep ratios must lie in (0, 1]".into()));
            }
            let rows = run_protocol(&cfg, &ratios, &seeds, &out)?;
            for r in &rows {
                match (&r.error, r.h) {
                    (Some(e), _) => println!("ratio {} seed {}: failed: {e}", r.keep_ratio, r.seed),
                    (None, Some(h)) => println!(
                        "ratio {} seed {}: T1 {:.2} H {h:.2}",
                        r.keep_ratio,
                        r.seed,
                        r.t1_zsl.unwrap_or(f64::NAN)
                    ),
                    _ => {}
                }
            }
        }
        Command::Diag { bundle, extractors, models, seed } => {
            let report = run_diag(&bundle, &extractors, &models, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn print_report(report: &MetricsReport) {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    println!(
        "T1 {}  U {}  S {}  H {}",
        fmt(report.t1_zsl),
        fmt(report.u),
        fmt(report.s),
        fmt(report.h)
    );
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidInput(_)
        | Error::DimMismatch(_)
        | Error::StepOutOfRange { .. } => 1,
        Error::Io { .. } | Error::Malformed { .. } | Error::Json(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version are not errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
