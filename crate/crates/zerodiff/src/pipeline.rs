//! End-to-end experiment orchestration: data generation, extractor
//! finetuning, two-stage generator training, synthesis and evaluation, with
//! every stage writing artifacts under one output directory.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{
    apply_keep_ratio, generate_synthetic, load_bundle, save_bundle, DatasetBundle, KeepRatioPlan,
    SynthConfig,
};
use crate::checkpoint::{load_extractors, load_models, save_extractors, save_models};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::extractors::{finetune, ExtractorPair};
use crate::networks::{init_models, ModelDims, ModelSet};
use crate::trainer::{
    train_dfg, train_dfg_checkpointed, train_drg, train_drg_checkpointed, TrainData, TrainTrace,
};
use crate::zsl::{run_zsl_eval, MetricsReport};

/// Environment variable naming the root directory for artifacts; relative
/// output paths resolve beneath it.
pub const ARTIFACT_ROOT_ENV: &str = "ZERODIFF_ARTIFACTS";

/// Resolve an output path against the artifact root env var (absolute paths
/// pass through).
pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(ARTIFACT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Full experiment description: how to obtain the bundle and how to train.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Load this bundle directory instead of generating synthetic data.
    pub bundle_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = crate::io::read_json(path)?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Outputs of one full run.
pub struct RunOutputs {
    pub report: MetricsReport,
    pub drg_trace: TrainTrace,
    pub dfg_trace: TrainTrace,
    pub keep_plan: Option<KeepRatioPlan>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn obtain_bundle(config: &ExperimentConfig) -> Result<DatasetBundle> {
    match &config.bundle_path {
        Some(p) => load_bundle(&resolve_out(p)),
        None => generate_synthetic(&config.synth),
    }
}

/// Train generators on an already-prepared bundle/extractor pair. Returns
/// the frozen model set and both traces. When `ckpt` is given and
/// `checkpoint_every > 0`, resumable stage checkpoints are written under
/// `ckpt/drg` and `ckpt/dfg`.
pub fn train_generators(
    bundle: &DatasetBundle,
    extractors: &ExtractorPair,
    train: &TrainConfig,
    ckpt: Option<&Path>,
) -> Result<(ModelSet, TrainTrace, TrainTrace)> {
    let data = TrainData::from_bundle(bundle, extractors)?;
    let dims = ModelDims::from_config(bundle.attributes.ncols(), train);
    let mut models = init_models(dims, train.seed)?;
    let ckpt = ckpt.filter(|_| train.checkpoint_every > 0);
    let (drg_trace, dfg_trace) = match ckpt {
        Some(dir) => (
            train_drg_checkpointed(
                &data,
                &mut models,
                train,
                train.seed.wrapping_add(1),
                &dir.join("drg"),
            )?,
            train_dfg_checkpointed(
                &data,
                &mut models,
                train,
                train.seed.wrapping_add(2),
                &dir.join("dfg"),
            )?,
        ),
        None => (
            train_drg(&data, &mut models, train, train.seed.wrapping_add(1))?,
            train_dfg(&data, &mut models, train, train.seed.wrapping_add(2))?,
        ),
    };
    Ok((models, drg_trace, dfg_trace))
}

/// Run the whole pipeline, writing every stage artifact under `out`:
/// bundle/, extractors/, models/, drg_trace.ndjson, dfg_trace.ndjson,
/// metrics.json, metrics.csv and the resolved config.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunOutputs> {
    config.train.validate()?;
    let out = resolve_out(out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    crate::io::write_json(&out.join("config.json"), config)?;

    let mut bundle = obtain_bundle(config)?;
    let train = &config.train;

    let extractors = finetune(&bundle, train, train.seed)?;
    save_extractors(&out.join("extractors"), &extractors, train)?;

    let mut n_syn = train.n_syn;
    let mut keep_plan = None;
    if train.keep_ratio < 1.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(10));
        let (kept, plan) = apply_keep_ratio(&bundle, train.keep_ratio, train.n_syn, &mut rng)?;
        n_syn = plan.n_syn_scaled;
        keep_plan = Some(plan);
        bundle = kept;
    }
    save_bundle(&bundle, &out.join("bundle"))?;

    let (models, drg_trace, dfg_trace) = train_generators(&bundle, &extractors, train, Some(&out.join("checkpoints")))?;
    save_models(&out.join("models"), &models, train)?;
    write_text(&out.join("drg_trace.ndjson"), &drg_trace.to_ndjson())?;
    write_text(&out.join("dfg_trace.ndjson"), &dfg_trace.to_ndjson())?;

    let report = run_zsl_eval(
        &bundle,
        &extractors,
        &models.r,
        &models.g,
        train,
        n_syn,
        train.seed.wrapping_add(3),
    )?;
    crate::io::write_json(&out.join("metrics.json"), &report)?;
    write_text(
        &out.join("metrics.csv"),
        &format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()),
    )?;
    Ok(RunOutputs { report, drg_trace, dfg_trace, keep_plan })
}

/// One row of the degradation protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub keep_ratio: f64,
    pub seed: u64,
    pub t1_zsl: Option<f64>,
    pub u: Option<f64>,
    pub s: Option<f64>,
    pub h: Option<f64>,
    pub error: Option<String>,
}

/// Sweep keep-ratios and seeds, one full run per cell; failures are recorded
/// in the row rather than aborting the sweep. Writes protocol.csv.
pub fn run_protocol(
    config: &ExperimentConfig,
    ratios: &[f64],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<ProtocolRow>> {
    let out = resolve_out(out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut rows = Vec::new();
    for &ratio in ratios {
        for &seed in seeds {
            let mut cell = config.clone();
            cell.train.keep_ratio = ratio;
            cell.train.seed = seed;
            let cell_out = out.join(format!("ratio_{ratio}_seed_{seed}"));
            let row = match run_experiment(&cell, &cell_out) {
                Ok(res) => ProtocolRow {
                    keep_ratio: ratio,
                    seed,
                    t1_zsl: res.report.t1_zsl,
                    u: res.report.u,
                    s: res.report.s,
                    h: res.report.h,
                    error: None,
                },
                Err(e) => ProtocolRow {
                    keep_ratio: ratio,
                    seed,
                    t1_zsl: None,
                    u: None,
                    s: None,
                    h: None,
                    error: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
    }
    let mut csv = String::from("keep_ratio,seed,t1_zsl,u,s,h,error\n");
    for r in &rows {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.keep_ratio,
            r.seed,
            fmt(r.t1_zsl),
            fmt(r.u),
            fmt(r.s),
            fmt(r.h),
            r.error.clone().unwrap_or_default()
        ));
    }
    write_text(&out.join("protocol.csv"), &csv)?;
    crate::io::write_json(&out.join("protocol.json"), &rows)?;
    Ok(rows)
}

/// Diagnostic report comparing critic scores across splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagReport {
    pub delta_adv: f64,
    pub delta_diff: f64,
}

pub fn run_diag(
    bundle_dir: &Path,
    extractors_dir: &Path,
    models_dir: &Path,
    seed: u64,
) -> Result<DiagReport> {
    let bundle = load_bundle(&resolve_out(bundle_dir))?;
    let (extractors, _) = load_extractors(&resolve_out(extractors_dir))?;
    let (models, config) = load_models(&resolve_out(models_dir))?;
    let (delta_adv, delta_diff) =
        crate::trainer::critic_gap_diagnostics(&models, &bundle, &extractors, &config, seed)?;
    Ok(DiagReport { delta_adv, delta_diff })
}
