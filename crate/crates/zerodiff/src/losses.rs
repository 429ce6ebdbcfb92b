//! Adversarial, denoising, representation and mutual-learning loss pieces.
//!
//! Critics maximize `W - lambda_gp * GP` per view minus `lambda_mu * L_mu`;
//! the generator maximizes its fake scores. Gradient-carrying paths are
//! exposed as (value, parameter-gradient) pairs so the trainer can compose
//! objectives without an autodiff graph.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Critic;
use crate::nn::MlpGrads;

/// One batch worth of critic-side quantities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticTerms {
    pub w_adv: f64,
    pub w_diff: f64,
    /// Absent in the two-critic (DRG) variant.
    pub w_rep: Option<f64>,
    pub gp_adv: f64,
    pub gp_diff: f64,
    pub gp_rep: Option<f64>,
    pub l_mu: Option<f64>,
    pub kappa_gamma: f64,
}

impl CriticTerms {
    pub fn is_finite(&self) -> bool {
        let opt = |v: &Option<f64>| v.map_or(true, f64::is_finite);
        self.w_adv.is_finite()
            && self.w_diff.is_finite()
            && self.gp_adv.is_finite()
            && self.gp_diff.is_finite()
            && self.kappa_gamma.is_finite()
            && opt(&self.w_rep)
            && opt(&self.gp_rep)
            && opt(&self.l_mu)
    }
}

/// Gradient-penalty and mutual-learning weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Lambdas {
    pub gp_adv: f64,
    pub gp_diff: f64,
    pub gp_rep: f64,
    pub mu: f64,
}

/// Mean critic score on real inputs minus mean on fake inputs, from
/// pre-assembled input matrices.
pub fn wasserstein_term(critic: &Critic, real: &Array2<f64>, fake: &Array2<f64>) -> Result<f64> {
    if real.nrows() == 0 || fake.nrows() == 0 {
        return Err(Error::InvalidInput("empty batch in wasserstein term".into()));
    }
    if real.nrows() != fake.nrows() {
        return Err(Error::DimMismatch(format!(
            "real batch {} vs fake batch {}",
            real.nrows(),
            fake.nrows()
        )));
    }
    let s_real = critic.mlp.apply(real).mean().unwrap();
    let s_fake = critic.mlp.apply(fake).mean().unwrap();
    Ok(s_real - s_fake)
}

/// WGAN-GP penalty with per-row interpolation `alpha * real + (1-alpha) * fake`
/// of the penalized (first) block only; conditioning columns come from the
/// real rows. Returns the penalty and its gradient w.r.t. the critic
/// parameters (the double-backprop path).
pub fn gradient_penalty<R: Rng>(
    critic: &Critic,
    real: &Array2<f64>,
    fake: &Array2<f64>,
    rng: &mut R,
) -> Result<(f64, MlpGrads)> {
    if real.raw_dim() != fake.raw_dim() {
        return Err(Error::DimMismatch(format!(
            "real {:?} vs fake {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let pen = critic.kind.pen_dims(&critic.dims);
    let mut x = real.clone();
    for i in 0..x.nrows() {
        let alpha: f64 = rng.gen_range(0.0..1.0);
        for j in 0..pen {
            x[[i, j]] = alpha * real[[i, j]] + (1.0 - alpha) * fake[[i, j]];
        }
    }
    let (gp, grads) = critic.mlp.gradient_penalty(&x, pen);
    if !gp.is_finite() || !grads.is_finite() {
        return Err(Error::InvalidInput("non-finite gradient in penalty".into()));
    }
    Ok((gp, grads))
}

/// `kappa^gamma (|w_diff - w_adv| + |w_diff - w_rep|) + |w_adv - w_rep|`.
pub fn mutual_loss(w_adv: f64, w_diff: f64, w_rep: f64, kappa_t: f64, gamma: f64) -> f64 {
    kappa_t.powf(gamma) * ((w_diff - w_adv).abs() + (w_diff - w_rep).abs())
        + (w_adv - w_rep).abs()
}

/// Subgradients of [`mutual_loss`] w.r.t. (w_adv, w_diff, w_rep).
pub fn mutual_loss_grads(
    w_adv: f64,
    w_diff: f64,
    w_rep: f64,
    kappa_t: f64,
    gamma: f64,
) -> (f64, [f64; 3]) {
    let kg = kappa_t.powf(gamma);
    let s = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let l = mutual_loss(w_adv, w_diff, w_rep, kappa_t, gamma);
    let d_adv = -kg * s(w_diff - w_adv) + s(w_adv - w_rep);
    let d_diff = kg * (s(w_diff - w_adv) + s(w_diff - w_rep));
    let d_rep = -kg * s(w_diff - w_rep) - s(w_adv - w_rep);
    (l, [d_adv, d_diff, d_rep])
}

/// The quantity the three DFG critics jointly maximize.
pub fn critic_objective(terms: &CriticTerms, lambdas: &Lambdas) -> f64 {
    let mut obj = terms.w_adv - lambdas.gp_adv * terms.gp_adv + terms.w_diff
        - lambdas.gp_diff * terms.gp_diff;
    if let (Some(w_rep), Some(gp_rep)) = (terms.w_rep, terms.gp_rep) {
        obj += w_rep - lambdas.gp_rep * gp_rep;
    }
    if let Some(l_mu) = terms.l_mu {
        obj -= lambdas.mu * l_mu;
    }
    obj
}

/// The quantity the generator minimizes: negated mean fake scores across the
/// given critic outputs.
pub fn generator_objective(fake_scores: &[&Array2<f64>]) -> f64 {
    -fake_scores.iter().map(|s| s.mean().unwrap()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{init_models, CriticKind, ModelDims};
    use crate::nn::{Activation, Linear, Mlp};
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dims() -> ModelDims {
        ModelDims { d_a: 3, d_v: 3, d_r: 2, d_z: 2, hidden: 8, t_embed: 4, t_max: 4 }
    }

    fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
    }

    /// A critic whose network is D(x) = w . x (Adv layout: 3 penalized + 3
    /// conditioning columns).
    fn linear_critic(w: Vec<f64>) -> Critic {
        let d = dims();
        let n = w.len();
        Critic {
            kind: CriticKind::Adv,
            mlp: Mlp {
                layers: vec![Linear {
                    w: Array2::from_shape_vec((n, 1), w).unwrap(),
                    b: Array1::zeros(1),
                }],
                acts: vec![Activation::Identity],
            },
            dims: d,
        }
    }

    #[test]
    fn wasserstein_identical_batches_is_zero() {
        let m = init_models(dims(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, (5, 6));
        assert_eq!(wasserstein_term(&m.d_adv, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn wasserstein_constant_critic_is_zero() {
        let mut m = init_models(dims(), 1).unwrap();
        let last = m.d_adv.mlp.layers.last_mut().unwrap();
        last.w.fill(0.0);
        last.b.fill(3.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let real = randn(&mut rng, (5, 6));
        let fake = randn(&mut rng, (5, 6));
        assert_abs_diff_eq!(wasserstein_term(&m.d_adv, &real, &fake).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn wasserstein_sum_critic_hand_case() {
        // D(x) = sum(x) over 3 penalized dims (conditioning weights zero),
        // real = ones, fake = zeros -> 3.0
        let critic = linear_critic(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let real = Array2::ones((4, 6));
        let fake = Array2::zeros((4, 6));
        assert_abs_diff_eq!(wasserstein_term(&critic, &real, &fake).unwrap(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn wasserstein_rejects_empty_batch() {
        let m = init_models(dims(), 1).unwrap();
        let empty = Array2::zeros((0, 6));
        assert!(wasserstein_term(&m.d_adv, &empty, &empty).is_err());
    }

    #[test]
    fn gradient_penalty_unit_norm_linear_critic_is_zero() {
        // ||w|| = 1 over the penalized block
        let critic = linear_critic(vec![0.6, 0.8, 0.0, 0.3, -0.2, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real = randn(&mut rng, (6, 6));
        let fake = randn(&mut rng, (6, 6));
        let (gp, _) = gradient_penalty(&critic, &real, &fake, &mut rng).unwrap();
        assert_abs_diff_eq!(gp, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_penalty_norm_three_linear_critic() {
        let critic = linear_critic(vec![2.0, -1.0, 2.0, 0.5, 0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let real = randn(&mut rng, (6, 6));
        let fake = randn(&mut rng, (6, 6));
        let (gp, grads) = gradient_penalty(&critic, &real, &fake, &mut rng).unwrap();
        assert_abs_diff_eq!(gp, 4.0, epsilon = 1e-9);
        // closed-form parameter gradient 2 (||w|| - 1) w / ||w|| on the
        // penalized weights, zero on conditioning weights
        let expect = [2.0 * 2.0 * 2.0 / 3.0, 2.0 * 2.0 * -1.0 / 3.0, 2.0 * 2.0 * 2.0 / 3.0];
        let got = &grads.layers[0].0;
        for j in 0..3 {
            assert_abs_diff_eq!(got[[j, 0]], expect[j], epsilon = 1e-6);
        }
        for j in 3..6 {
            assert_abs_diff_eq!(got[[j, 0]], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn gradient_penalty_shape_mismatch_rejected() {
        let m = init_models(dims(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = randn(&mut rng, (4, 6));
        let fake = randn(&mut rng, (3, 6));
        assert!(gradient_penalty(&m.d_adv, &real, &fake, &mut rng).is_err());
    }

    #[test]
    fn mutual_loss_aligned_critics_is_zero() {
        assert_eq!(mutual_loss(2.0, 2.0, 2.0, 0.5, 1.0), 0.0);
    }

    #[test]
    fn mutual_loss_hand_case() {
        // kappa^1 (|2-1| + |2-0|) + |1-0| = 0.5*3 + 1 = 2.5
        assert_abs_diff_eq!(mutual_loss(1.0, 2.0, 0.0, 0.5, 1.0), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn mutual_loss_high_gamma_limit() {
        let l = mutual_loss(1.0, 5.0, 0.0, 0.5, 200.0);
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-12); // only |w_adv - w_rep| survives
    }

    #[test]
    fn mutual_loss_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (a, d, r): (f64, f64, f64) =
                (rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            let k: f64 = rng.gen_range(0.0..1.0);
            let l1 = mutual_loss(a, d, r, k, 1.0);
            let l2 = mutual_loss(r, d, a, k, 1.0);
            assert!(l1 >= 0.0);
            assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
        }
    }

    #[test]
    fn mutual_loss_grads_match_finite_differences() {
        let (k, g) = (0.37, 1.3);
        let (w_adv, w_diff, w_rep) = (0.8, -0.4, 1.9);
        let (_, grads) = mutual_loss_grads(w_adv, w_diff, w_rep, k, g);
        let h = 1e-7;
        let fd = [
            (mutual_loss(w_adv + h, w_diff, w_rep, k, g) - mutual_loss(w_adv - h, w_diff, w_rep, k, g)) / (2.0 * h),
            (mutual_loss(w_adv, w_diff + h, w_rep, k, g) - mutual_loss(w_adv, w_diff - h, w_rep, k, g)) / (2.0 * h),
            (mutual_loss(w_adv, w_diff, w_rep + h, k, g) - mutual_loss(w_adv, w_diff, w_rep - h, k, g)) / (2.0 * h),
        ];
        for (a, b) in grads.iter().zip(fd.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn critic_objective_zero_critics_gives_penalty_floor() {
        // constant-zero critics: every W = 0, every gradient is zero so each
        // penalty is (0-1)^2 = 1, and L_mu = 0
        let terms = CriticTerms {
            w_adv: 0.0,
            w_diff: 0.0,
            w_rep: Some(0.0),
            gp_adv: 1.0,
            gp_diff: 1.0,
            gp_rep: Some(1.0),
            l_mu: Some(0.0),
            kappa_gamma: 0.5,
        };
        let lambdas = Lambdas { gp_adv: 10.0, gp_diff: 10.0, gp_rep: 10.0, mu: 1.0 };
        assert_abs_diff_eq!(critic_objective(&terms, &lambdas), -30.0, epsilon = 1e-12);
    }

    #[test]
    fn lambda_mu_zero_decouples_objectives() {
        let terms = CriticTerms {
            w_adv: 1.0,
            w_diff: 2.0,
            w_rep: Some(3.0),
            gp_adv: 0.1,
            gp_diff: 0.2,
            gp_rep: Some(0.3),
            l_mu: Some(7.0),
            kappa_gamma: 0.5,
        };
        let lambdas = Lambdas { gp_adv: 10.0, gp_diff: 10.0, gp_rep: 10.0, mu: 0.0 };
        let total = critic_objective(&terms, &lambdas);
        let sum_independent = (1.0 - 10.0 * 0.1) + (2.0 - 10.0 * 0.2) + (3.0 - 10.0 * 0.3);
        assert_abs_diff_eq!(total, sum_independent, epsilon = 1e-12);
    }

    #[test]
    fn generator_objective_is_negated_fake_means() {
        let s1 = Array2::from_elem((4, 1), 2.0);
        let s2 = Array2::from_elem((4, 1), -0.5);
        assert_abs_diff_eq!(generator_objective(&[&s1, &s2]), -1.5, epsilon = 1e-12);
    }
}
