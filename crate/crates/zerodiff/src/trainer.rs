//! Two-stage generator training: stage 1 trains the representation generator
//! (DRG) against two critics and freezes it, stage 2 trains the feature
//! generator (DFG) against three mutually-distilling critics. Adam optimizes
//! every network; training is a pure function of (bundle, config, seed), and
//! the full optimizer/rng state can be checkpointed mid-stage and resumed
//! with an identical continuation.

use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::{DatasetBundle, SplitTag};
use crate::checkpoint::{load_models, save_models};
use crate::config::TrainConfig;
use crate::diffusion::{build_vp_schedule, forward_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::extractors::ExtractorPair;
use crate::losses::{
    critic_objective, gradient_penalty, mutual_loss_grads, CriticTerms, Lambdas,
};
use crate::networks::{Critic, ModelSet};
use crate::nn::{Adam, Mlp, MlpGrads};

/// Per-outer-iteration training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub terms: CriticTerms,
    pub gen_objective: f64,
    pub wall_ms: f64,
}

/// Append-only loss/diagnostic trace, serializable as newline-delimited JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            records.push(serde_json::from_str(line)?);
        }
        Ok(Self { records })
    }
}

/// Training-view of a bundle: extracted features/representations and per-row
/// attributes for the train_seen split only. Constructing this is the only
/// way trainer code touches the data, so test-split samples can never enter
/// a gradient.
pub struct TrainData {
    pub v0: Array2<f64>,
    pub r0: Array2<f64>,
    pub attrs: Array2<f64>,
    pub labels: Vec<u32>,
}

impl TrainData {
    pub fn from_bundle(bundle: &DatasetBundle, extractors: &ExtractorPair) -> Result<Self> {
        let idx = bundle.indices_with_split(SplitTag::TrainSeen);
        if idx.is_empty() {
            return Err(Error::InvalidInput("bundle has no train_seen samples".into()));
        }
        let (v_all, r_all) = extractors.extract_all(bundle)?;
        let attrs = Array2::from_shape_fn((idx.len(), bundle.attributes.ncols()), |(i, j)| {
            bundle.attributes[[bundle.labels[idx[i]] as usize, j]]
        });
        Ok(Self {
            v0: v_all.select(Axis(0), &idx),
            r0: r_all.select(Axis(0), &idx),
            attrs,
            labels: idx.iter().map(|&i| bundle.labels[i]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Which training stage a serialized state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Drg,
    Dfg,
}

/// Complete mid-stage training state: optimizer moments, rng stream position
/// and the trace so far. Together with the model checkpoint this resumes to
/// an identical continuation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageState {
    pub stage: Stage,
    pub next_iter: usize,
    pub adams: Vec<Adam>,
    pub rng: ChaCha8Rng,
    pub trace: TrainTrace,
}

impl StageState {
    fn new(stage: Stage, models: &ModelSet, config: &TrainConfig, seed: u64) -> Self {
        let nets: Vec<&Mlp> = match stage {
            Stage::Drg => vec![&models.r.mlp, &models.d_adv_prime.mlp, &models.d_diff_prime.mlp],
            Stage::Dfg => {
                vec![&models.g.mlp, &models.d_adv.mlp, &models.d_diff.mlp, &models.d_rep.mlp]
            }
        };
        let adams = nets
            .iter()
            .map(|m| Adam::new(config.lr, config.adam_beta1, config.adam_beta2, m.param_count()))
            .collect();
        Self {
            stage,
            next_iter: 0,
            adams,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: TrainTrace::default(),
        }
    }
}

fn randn<R: Rng>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

/// Noise x_0 to steps t-1 and t along one forward chain (t-1 = 0 yields x_0).
fn chain_pair<R: Rng>(
    schedule: &DiffusionSchedule,
    x0: &Array2<f64>,
    t: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let x_tm1 = if t == 1 { x0.clone() } else { forward_sample(schedule, x0, t - 1, rng)?.x_t };
    let beta = schedule.beta(t);
    let mut x_t = x_tm1.mapv(|v| v * (1.0 - beta).sqrt());
    x_t.mapv_inplace(|v| v + beta.sqrt() * rng.sample::<f64, _>(StandardNormal));
    Ok((x_tm1, x_t))
}

/// Renoise a generated clean batch to step t-1 given x_t, keeping the affine
/// coefficient on x_0_hat for gradient flow. At t = 1 this is the identity.
fn renoise<R: Rng>(
    schedule: &DiffusionSchedule,
    x0_hat: &Array2<f64>,
    x_t: &Array2<f64>,
    t: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, f64)> {
    if t == 1 {
        return Ok((x0_hat.clone(), 1.0));
    }
    let (c0, ct, beta_tilde) = schedule.posterior_coeffs(t)?;
    let sigma = beta_tilde.sqrt();
    let mut out = x0_hat.mapv(|v| v * c0) + x_t.mapv(|v| v * ct);
    out.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    Ok((out, c0))
}

/// Mean critic score plus d(mean)/d(params) scaled by `sign`, and the input
/// gradient with the same scaling.
fn score_mean_grads(mlp: &Mlp, x: &Array2<f64>, sign: f64) -> (f64, MlpGrads, Array2<f64>) {
    let cache = mlp.forward(x);
    let mean = cache.output.mean().unwrap();
    let seed = Array2::from_elem((x.nrows(), 1), sign / x.nrows() as f64);
    let (grads, gin) = mlp.backward(&cache, &seed);
    (mean, grads, gin)
}

fn adam_apply(adam: &mut Adam, mlp: &mut Mlp, grads: &MlpGrads) -> Result<()> {
    let mut theta = Vec::with_capacity(mlp.param_count());
    mlp.to_flat(&mut theta);
    let mut flat = Vec::with_capacity(theta.len());
    grads.to_flat(&mut flat);
    adam.step(&mut theta, &flat)?;
    mlp.from_flat(&theta);
    Ok(())
}

/// One critic update: minimize `coeff_w * W + lambda_gp * GP` (the usual
/// case is coeff_w = -1, i.e. maximize W - lambda_gp * GP). Returns (W, GP).
fn critic_step<R: Rng>(
    critic: &mut Critic,
    adam: &mut Adam,
    real: &Array2<f64>,
    fake: &Array2<f64>,
    coeff_w: f64,
    lambda_gp: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let (w_real, g_real, _) = score_mean_grads(&critic.mlp, real, 1.0);
    let (w_fake, g_fake, _) = score_mean_grads(&critic.mlp, fake, -1.0);
    let w = w_real - w_fake;
    let (gp, gp_grads) = gradient_penalty(critic, real, fake, rng)?;
    let mut total = g_real;
    total.add_scaled(&g_fake, 1.0);
    total.scale(coeff_w);
    total.add_scaled(&gp_grads, lambda_gp);
    adam_apply(adam, &mut critic.mlp, &total)?;
    Ok((w, gp))
}

fn check_finite_terms(terms: &CriticTerms, iter: usize) -> Result<()> {
    if terms.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iter, what: format!("critic terms {terms:?}") })
    }
}

/// Write a resumable checkpoint: model parameters plus the stage state.
pub fn save_stage(
    dir: &Path,
    models: &ModelSet,
    config: &TrainConfig,
    state: &StageState,
) -> Result<()> {
    save_models(dir, models, config)?;
    crate::io::write_json(&dir.join("state.json"), state)
}

fn maybe_checkpoint(
    ckpt: Option<&Path>,
    models: &ModelSet,
    config: &TrainConfig,
    state: &StageState,
) -> Result<()> {
    if let Some(dir) = ckpt {
        if config.checkpoint_every > 0 && state.next_iter % config.checkpoint_every == 0 {
            save_stage(dir, models, config, state)?;
        }
    }
    Ok(())
}

fn run_drg(
    data: &TrainData,
    models: &mut ModelSet,
    config: &TrainConfig,
    st: &mut StageState,
    ckpt: Option<&Path>,
) -> Result<()> {
    let schedule = build_vp_schedule(config.t_max, config.beta_min, config.beta_max)?;
    let dims = models.r.dims;
    let bsz = config.batch_size.min(data.len());
    let start = std::time::Instant::now();
    models.r.frozen = false;

    for iter in st.next_iter..config.n_gen_iters {
        let batch: Vec<usize> = index_sample(&mut st.rng, data.len(), bsz).into_vec();
        let r0 = data.r0.select(Axis(0), &batch);
        let a = data.attrs.select(Axis(0), &batch);
        let rng = &mut st.rng;

        let mut last_terms = None;
        for _ in 0..config.critic_steps {
            let t = rng.gen_range(1..=config.t_max);
            let (r_tm1, r_t) = chain_pair(&schedule, &r0, t, rng)?;
            let z = randn(rng, (bsz, dims.d_z));
            let r0_fake = models.r.generate(&a, t, &r_t, &z)?;
            let (r_tm1_fake, _) = renoise(&schedule, &r0_fake, &r_t, t, rng)?;

            let real_adv = models.d_adv_prime.assemble(&[&r0, &a], None)?;
            let fake_adv = models.d_adv_prime.assemble(&[&r0_fake, &a], None)?;
            let real_diff = models.d_diff_prime.assemble(&[&r_tm1, &r_t, &a], Some(t))?;
            let fake_diff = models.d_diff_prime.assemble(&[&r_tm1_fake, &r_t, &a], Some(t))?;

            let (w_adv, gp_adv) = critic_step(
                &mut models.d_adv_prime,
                &mut st.adams[1],
                &real_adv,
                &fake_adv,
                -1.0,
                config.lambda_gp_adv,
                rng,
            )?;
            let (w_diff, gp_diff) = critic_step(
                &mut models.d_diff_prime,
                &mut st.adams[2],
                &real_diff,
                &fake_diff,
                -1.0,
                config.lambda_gp_diff,
                rng,
            )?;
            let terms = CriticTerms {
                w_adv,
                w_diff,
                w_rep: None,
                gp_adv,
                gp_diff,
                gp_rep: None,
                l_mu: None,
                kappa_gamma: schedule.kappa(t).powf(config.gamma),
            };
            check_finite_terms(&terms, iter)?;
            last_terms = Some(terms);
        }

        // generator step: maximize fake scores of both critics
        let t = rng.gen_range(1..=config.t_max);
        let (_, r_t) = chain_pair(&schedule, &r0, t, rng)?;
        let z = randn(rng, (bsz, dims.d_z));
        let gen_in = models.r.assemble(&a, t, &r_t, &z)?;
        let gen_cache = models.r.mlp.forward(&gen_in);
        let r0_fake = gen_cache.output.clone();
        let (r_tm1_fake, c0) = renoise(&schedule, &r0_fake, &r_t, t, rng)?;

        let fake_adv = models.d_adv_prime.assemble(&[&r0_fake, &a], None)?;
        let fake_diff = models.d_diff_prime.assemble(&[&r_tm1_fake, &r_t, &a], Some(t))?;
        let (m_adv, _, gin_adv) = score_mean_grads(&models.d_adv_prime.mlp, &fake_adv, -1.0);
        let (m_diff, _, gin_diff) = score_mean_grads(&models.d_diff_prime.mlp, &fake_diff, -1.0);
        let mut d_r0 = gin_adv.slice(s![.., ..dims.d_r]).to_owned();
        d_r0.scaled_add(c0, &gin_diff.slice(s![.., ..dims.d_r]));
        let (g_grads, _) = models.r.mlp.backward(&gen_cache, &d_r0);
        if !g_grads.is_finite() {
            return Err(Error::Diverged { iter, what: "generator gradients".into() });
        }
        adam_apply(&mut st.adams[0], &mut models.r.mlp, &g_grads)?;

        if let Some(terms) = last_terms {
            st.trace.records.push(TraceRecord {
                iter,
                terms,
                gen_objective: -(m_adv + m_diff),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        st.next_iter = iter + 1;
        maybe_checkpoint(ckpt, models, config, st)?;
    }
    models.r.frozen = true;
    Ok(())
}

fn run_dfg(
    data: &TrainData,
    models: &mut ModelSet,
    config: &TrainConfig,
    st: &mut StageState,
    ckpt: Option<&Path>,
) -> Result<()> {
    if !models.r.frozen {
        return Err(Error::InvalidInput("train the DRG before the DFG".into()));
    }
    let schedule = build_vp_schedule(config.t_max, config.beta_min, config.beta_max)?;
    let dims = models.g.dims;
    let lambdas = Lambdas {
        gp_adv: config.lambda_gp_adv,
        gp_diff: config.lambda_gp_diff,
        gp_rep: config.lambda_gp_rep,
        mu: config.lambda_mu,
    };
    let bsz = config.batch_size.min(data.len());
    let start = std::time::Instant::now();
    models.g.frozen = false;

    for iter in st.next_iter..config.n_gen_iters {
        let batch: Vec<usize> = index_sample(&mut st.rng, data.len(), bsz).into_vec();
        let v0 = data.v0.select(Axis(0), &batch);
        let r0 = data.r0.select(Axis(0), &batch);
        let a = data.attrs.select(Axis(0), &batch);
        let rng = &mut st.rng;

        let mut last_terms = None;
        for _ in 0..config.critic_steps {
            let t = rng.gen_range(1..=config.t_max);
            let (v_tm1, v_t) = chain_pair(&schedule, &v0, t, rng)?;
            let z = randn(rng, (bsz, dims.d_z));
            let v0_fake = models.g.generate(&a, &r0, t, &v_t, &z)?;
            let (v_tm1_fake, _) = renoise(&schedule, &v0_fake, &v_t, t, rng)?;
            let kappa_gamma = schedule.kappa(t).powf(config.gamma);

            let real_adv = models.d_adv.assemble(&[&v0, &a], None)?;
            let fake_adv = models.d_adv.assemble(&[&v0_fake, &a], None)?;

            if config.adv_only {
                let (w_adv, gp_adv) = critic_step(
                    &mut models.d_adv,
                    &mut st.adams[1],
                    &real_adv,
                    &fake_adv,
                    -1.0,
                    lambdas.gp_adv,
                    rng,
                )?;
                let terms = CriticTerms {
                    w_adv,
                    w_diff: 0.0,
                    w_rep: None,
                    gp_adv,
                    gp_diff: 0.0,
                    gp_rep: None,
                    l_mu: None,
                    kappa_gamma,
                };
                check_finite_terms(&terms, iter)?;
                last_terms = Some(terms);
                continue;
            }

            let real_diff = models.d_diff.assemble(&[&v_tm1, &v_t, &r0, &a], Some(t))?;
            let fake_diff = models.d_diff.assemble(&[&v_tm1_fake, &v_t, &r0, &a], Some(t))?;
            let real_rep = models.d_rep.assemble(&[&v0, &r0], None)?;
            let fake_rep = models.d_rep.assemble(&[&v0_fake, &r0], None)?;

            // current Wasserstein estimates decide the mutual-loss coupling
            let w_adv_now = wasserstein_of(&models.d_adv.mlp, &real_adv, &fake_adv);
            let w_diff_now = wasserstein_of(&models.d_diff.mlp, &real_diff, &fake_diff);
            let w_rep_now = wasserstein_of(&models.d_rep.mlp, &real_rep, &fake_rep);
            let (l_mu, dmu) =
                mutual_loss_grads(w_adv_now, w_diff_now, w_rep_now, schedule.kappa(t), config.gamma);

            let (w_adv, gp_adv) = critic_step(
                &mut models.d_adv,
                &mut st.adams[1],
                &real_adv,
                &fake_adv,
                -1.0 + lambdas.mu * dmu[0],
                lambdas.gp_adv,
                rng,
            )?;
            let (w_diff, gp_diff) = critic_step(
                &mut models.d_diff,
                &mut st.adams[2],
                &real_diff,
                &fake_diff,
                -1.0 + lambdas.mu * dmu[1],
                lambdas.gp_diff,
                rng,
            )?;
            let (w_rep, gp_rep) = critic_step(
                &mut models.d_rep,
                &mut st.adams[3],
                &real_rep,
                &fake_rep,
                -1.0 + lambdas.mu * dmu[2],
                lambdas.gp_rep,
                rng,
            )?;
            let terms = CriticTerms {
                w_adv,
                w_diff,
                w_rep: Some(w_rep),
                gp_adv,
                gp_diff,
                gp_rep: Some(gp_rep),
                l_mu: Some(l_mu),
                kappa_gamma,
            };
            check_finite_terms(&terms, iter)?;
            last_terms = Some(terms);
        }

        // generator step
        let t = rng.gen_range(1..=config.t_max);
        let (_, v_t) = chain_pair(&schedule, &v0, t, rng)?;
        let z = randn(rng, (bsz, dims.d_z));
        let gen_in = models.g.assemble(&a, &r0, t, &v_t, &z)?;
        let gen_cache = models.g.mlp.forward(&gen_in);
        let v0_fake = gen_cache.output.clone();
        let (v_tm1_fake, c0) = renoise(&schedule, &v0_fake, &v_t, t, rng)?;

        let fake_adv = models.d_adv.assemble(&[&v0_fake, &a], None)?;
        let (m_adv, _, gin_adv) = score_mean_grads(&models.d_adv.mlp, &fake_adv, -1.0);
        let mut d_v0 = gin_adv.slice(s![.., ..dims.d_v]).to_owned();
        let mut gen_obj = -m_adv;
        if !config.adv_only {
            let fake_diff = models.d_diff.assemble(&[&v_tm1_fake, &v_t, &r0, &a], Some(t))?;
            let fake_rep = models.d_rep.assemble(&[&v0_fake, &r0], None)?;
            let (m_diff, _, gin_diff) = score_mean_grads(&models.d_diff.mlp, &fake_diff, -1.0);
            let (m_rep, _, gin_rep) = score_mean_grads(&models.d_rep.mlp, &fake_rep, -1.0);
            d_v0.scaled_add(c0, &gin_diff.slice(s![.., ..dims.d_v]));
            d_v0.scaled_add(1.0, &gin_rep.slice(s![.., ..dims.d_v]));
            gen_obj -= m_diff + m_rep;
        }
        let (g_grads, _) = models.g.mlp.backward(&gen_cache, &d_v0);
        if !g_grads.is_finite() {
            return Err(Error::Diverged { iter, what: "generator gradients".into() });
        }
        adam_apply(&mut st.adams[0], &mut models.g.mlp, &g_grads)?;

        if let Some(terms) = last_terms {
            st.trace.records.push(TraceRecord {
                iter,
                terms,
                gen_objective: gen_obj,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        st.next_iter = iter + 1;
        maybe_checkpoint(ckpt, models, config, st)?;
    }
    models.g.frozen = true;
    Ok(())
}

/// Stage 1: train the representation generator against D'_adv and D'_diff,
/// then freeze it.
pub fn train_drg(
    data: &TrainData,
    models: &mut ModelSet,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainTrace> {
    config.validate()?;
    let mut st = StageState::new(Stage::Drg, models, config, seed);
    run_drg(data, models, config, &mut st, None)?;
    Ok(st.trace)
}

/// Stage 1 with resumable checkpoints written to `dir` every
/// `checkpoint_every` iterations and at completion.
pub fn train_drg_checkpointed(
    data: &TrainData,
    models: &mut ModelSet,
    config: &TrainConfig,
    seed: u64,
    dir: &Path,
) -> Result<TrainTrace> {
    config.validate()?;
    let mut st = StageState::new(Stage::Drg, models, config, seed);
    run_drg(data, models, config, &mut st, Some(dir))?;
    save_stage(dir, models, config, &st)?;
    Ok(st.trace)
}

/// Stage 2: train the feature generator against D_adv, D_diff and D_rep with
/// the mutual-learning loss, conditioning on real representations. Freezes
/// the generator when done.
pub fn train_dfg(
    data: &TrainData,
    models: &mut ModelSet,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainTrace> {
    config.validate()?;
    let mut st = StageState::new(Stage::Dfg, models, config, seed);
    run_dfg(data, models, config, &mut st, None)?;
    Ok(st.trace)
}

/// Stage 2 with resumable checkpoints.
pub fn train_dfg_checkpointed(
    data: &TrainData,
    models: &mut ModelSet,
    config: &TrainConfig,
    seed: u64,
    dir: &Path,
) -> Result<TrainTrace> {
    config.validate()?;
    let mut st = StageState::new(Stage::Dfg, models, config, seed);
    run_dfg(data, models, config, &mut st, Some(dir))?;
    save_stage(dir, models, config, &st)?;
    Ok(st.trace)
}

/// Resume a checkpointed stage to completion. `n_gen_iters_override` lets a
/// caller extend a finished stage. Returns the models, the effective config
/// and the accumulated trace.
pub fn resume_training(
    dir: &Path,
    data: &TrainData,
    n_gen_iters_override: Option<usize>,
) -> Result<(ModelSet, TrainConfig, TrainTrace)> {
    let (mut models, mut config) = load_models(dir)?;
    let mut st: StageState = crate::io::read_json(&dir.join("state.json"))?;
    if let Some(n) = n_gen_iters_override {
        config.n_gen_iters = n;
    }
    match st.stage {
        Stage::Drg => run_drg(data, &mut models, &config, &mut st, Some(dir))?,
        Stage::Dfg => run_dfg(data, &mut models, &config, &mut st, Some(dir))?,
    }
    save_stage(dir, &models, &config, &st)?;
    Ok((models, config, st.trace))
}

fn wasserstein_of(mlp: &Mlp, real: &Array2<f64>, fake: &Array2<f64>) -> f64 {
    mlp.apply(real).mean().unwrap() - mlp.apply(fake).mean().unwrap()
}

/// Critic-gap diagnostics: the adversarial critic's score gap between
/// train_seen and test_seen features, and the diffusion critic's real-fake
/// gap on noised train features averaged over t.
pub fn critic_gap_diagnostics(
    models: &ModelSet,
    bundle: &DatasetBundle,
    extractors: &ExtractorPair,
    config: &TrainConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let schedule = build_vp_schedule(config.t_max, config.beta_min, config.beta_max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test_idx = bundle.indices_with_split(SplitTag::TestSeen);
    if test_idx.is_empty() {
        return Err(Error::InvalidInput("empty seen-test split".into()));
    }
    let (v_all, r_all) = extractors.extract_all(bundle)?;
    let attr_rows = |idx: &[usize]| {
        Array2::from_shape_fn((idx.len(), bundle.attributes.ncols()), |(i, j)| {
            bundle.attributes[[bundle.labels[idx[i]] as usize, j]]
        })
    };
    let train_idx = bundle.indices_with_split(SplitTag::TrainSeen);
    let v_tr = v_all.select(Axis(0), &train_idx);
    let r_tr = r_all.select(Axis(0), &train_idx);
    let a_tr = attr_rows(&train_idx);
    let v_te = v_all.select(Axis(0), &test_idx);
    let a_te = attr_rows(&test_idx);

    let s_tr = models.d_adv.score(&[&v_tr, &a_tr], None)?.mean().unwrap();
    let s_te = models.d_adv.score(&[&v_te, &a_te], None)?.mean().unwrap();
    let delta_adv = s_tr - s_te;

    let dims = models.g.dims;
    let mut delta_diff = 0.0;
    for t in 1..=config.t_max {
        let (v_tm1, v_t) = chain_pair(&schedule, &v_tr, t, &mut rng)?;
        let z = randn(&mut rng, (v_tr.nrows(), dims.d_z));
        let v0_fake = models.g.generate(&a_tr, &r_tr, t, &v_t, &z)?;
        let (v_tm1_fake, _) = renoise(&schedule, &v0_fake, &v_t, t, &mut rng)?;
        let s_real =
            models.d_diff.score(&[&v_tm1, &v_t, &r_tr, &a_tr], Some(t))?.mean().unwrap();
        let s_fake =
            models.d_diff.score(&[&v_tm1_fake, &v_t, &r_tr, &a_tr], Some(t))?.mean().unwrap();
        delta_diff += s_real - s_fake;
    }
    delta_diff /= config.t_max as f64;
    Ok((delta_adv, delta_diff))
}

/// Value-level evaluation of all DFG critic terms on one batch (no updates);
/// used by diagnostics and tests.
#[allow(clippy::too_many_arguments)]
pub fn compute_dfg_terms<R: Rng>(
    models: &ModelSet,
    schedule: &DiffusionSchedule,
    v0: &Array2<f64>,
    r0: &Array2<f64>,
    a: &Array2<f64>,
    t: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<CriticTerms> {
    let (v_tm1, v_t) = chain_pair(schedule, v0, t, rng)?;
    let z = randn(rng, (v0.nrows(), models.g.dims.d_z));
    let v0_fake = models.g.generate(a, r0, t, &v_t, &z)?;
    let (v_tm1_fake, _) = renoise(schedule, &v0_fake, &v_t, t, rng)?;
    let real_adv = models.d_adv.assemble(&[v0, a], None)?;
    let fake_adv = models.d_adv.assemble(&[&v0_fake, a], None)?;
    let real_diff = models.d_diff.assemble(&[&v_tm1, &v_t, r0, a], Some(t))?;
    let fake_diff = models.d_diff.assemble(&[&v_tm1_fake, &v_t, r0, a], Some(t))?;
    let real_rep = models.d_rep.assemble(&[v0, r0], None)?;
    let fake_rep = models.d_rep.assemble(&[&v0_fake, r0], None)?;
    let w_adv = wasserstein_of(&models.d_adv.mlp, &real_adv, &fake_adv);
    let w_diff = wasserstein_of(&models.d_diff.mlp, &real_diff, &fake_diff);
    let w_rep = wasserstein_of(&models.d_rep.mlp, &real_rep, &fake_rep);
    let (gp_adv, _) = gradient_penalty(&models.d_adv, &real_adv, &fake_adv, rng)?;
    let (gp_diff, _) = gradient_penalty(&models.d_diff, &real_diff, &fake_diff, rng)?;
    let (gp_rep, _) = gradient_penalty(&models.d_rep, &real_rep, &fake_rep, rng)?;
    let kappa = schedule.kappa(t);
    let (l_mu, _) = mutual_loss_grads(w_adv, w_diff, w_rep, kappa, gamma);
    Ok(CriticTerms {
        w_adv,
        w_diff,
        w_rep: Some(w_rep),
        gp_adv,
        gp_diff,
        gp_rep: Some(gp_rep),
        l_mu: Some(l_mu),
        kappa_gamma: kappa.powf(gamma),
    })
}

/// The scalar objective the critics maximize on one batch, for tests.
pub fn dfg_critic_objective(terms: &CriticTerms, lambdas: &Lambdas) -> f64 {
    critic_objective(terms, lambdas)
}
