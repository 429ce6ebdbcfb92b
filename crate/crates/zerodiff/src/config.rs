//! Hyperparameter containers shared across the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All training-stage hyperparameters. Defaults are the desk-scale settings
/// used throughout the test suite.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    // diffusion schedule
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    // optimizer
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    // generator/critic alternation
    pub n_gen_iters: usize,
    pub critic_steps: usize,
    // loss weights
    pub lambda_gp_adv: f64,
    pub lambda_gp_diff: f64,
    pub lambda_gp_rep: f64,
    pub lambda_mu: f64,
    pub gamma: f64,
    // architecture
    pub d_z: usize,
    pub d_v: usize,
    pub d_r: usize,
    pub hidden: usize,
    pub t_embed_dim: usize,
    // extractor fine-tuning
    pub n_ft: usize,
    pub tau: f64,
    pub extractor_lr: f64,
    pub extractor_hidden: usize,
    // synthesis and final classifier
    pub n_syn: usize,
    pub t_te: usize,
    pub n_te: usize,
    pub classifier_lr: f64,
    // protocol
    pub keep_ratio: f64,
    pub seed: u64,
    /// Iterations between checkpoint snapshots; 0 disables mid-run snapshots.
    pub checkpoint_every: usize,
    /// Drop the mutual loss and the diff/rep critics (adv-only ablation).
    pub adv_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_max: 4,
            beta_min: 0.1,
            beta_max: 20.0,
            lr: 5e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 64,
            n_gen_iters: 600,
            critic_steps: 5,
            lambda_gp_adv: 10.0,
            lambda_gp_diff: 10.0,
            lambda_gp_rep: 10.0,
            lambda_mu: 0.1,
            gamma: 1.0,
            d_z: 32,
            d_v: 64,
            d_r: 32,
            hidden: 128,
            t_embed_dim: 16,
            n_ft: 600,
            tau: 0.1,
            extractor_lr: 1e-3,
            extractor_hidden: 128,
            n_syn: 300,
            t_te: 1,
            n_te: 500,
            classifier_lr: 1e-3,
            keep_ratio: 1.0,
            seed: 9182,
            checkpoint_every: 0,
            adv_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max) {
            return Err(Error::Config("need 0 < beta_min <= beta_max".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("tau", self.tau),
            ("extractor_lr", self.extractor_lr),
            ("classifier_lr", self.classifier_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_gp_adv", self.lambda_gp_adv),
            ("lambda_gp_diff", self.lambda_gp_diff),
            ("lambda_gp_rep", self.lambda_gp_rep),
            ("lambda_mu", self.lambda_mu),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("critic_steps", self.critic_steps),
            ("d_z", self.d_z),
            ("d_v", self.d_v),
            ("d_r", self.d_r),
            ("hidden", self.hidden),
            ("t_embed_dim", self.t_embed_dim),
            ("extractor_hidden", self.extractor_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keep_ratio must be in (0,1], got {}",
                self.keep_ratio
            )));
        }
        if self.t_te == 0 || self.t_te > self.t_max {
            return Err(Error::Config(format!(
                "t_te must be in 1..={}, got {}",
                self.t_max, self.t_te
            )));
        }
        Ok(())
    }
}
