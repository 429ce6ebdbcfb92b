//! Generator and critic network contracts: conditioning by concatenation,
//! sinusoidal step embeddings, and the full model set for both training
//! stages.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{time_embedding, Activation, Mlp};

/// Dimensions every network in the set is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_a: usize,
    pub d_v: usize,
    pub d_r: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub t_embed: usize,
    pub t_max: usize,
}

impl ModelDims {
    pub fn from_config(d_a: usize, config: &TrainConfig) -> Self {
        Self {
            d_a,
            d_v: config.d_v,
            d_r: config.d_r,
            d_z: config.d_z,
            hidden: config.hidden,
            t_embed: config.t_embed_dim,
            t_max: config.t_max,
        }
    }
}

fn concat_cols(parts: &[&Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views)
        .map_err(|e| Error::DimMismatch(format!("concatenation failed: {e}")))
}

fn check_finite(name: &str, m: &Array2<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} contains non-finite values")))
    }
}

fn check_cols(name: &str, m: &Array2<f64>, want: usize) -> Result<()> {
    if m.ncols() != want {
        return Err(Error::DimMismatch(format!("{name} has {} cols, expected {want}", m.ncols())));
    }
    Ok(())
}

/// Broadcast a step embedding over a batch.
fn t_embed_rows(t: usize, dims: &ModelDims, batch: usize) -> Array2<f64> {
    let e = time_embedding(t, dims.t_max, dims.t_embed);
    let mut out = Array2::zeros((batch, dims.t_embed));
    for mut row in out.rows_mut() {
        row.assign(&e);
    }
    out
}

/// DFG generator: (a, r_0, t, v_t, z) -> fake clean feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub mlp: Mlp,
    pub dims: ModelDims,
    pub frozen: bool,
}

impl Generator {
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        let d_in = dims.d_a + dims.d_r + dims.t_embed + dims.d_v + dims.d_z;
        let mlp = Mlp::init(
            &[d_in, dims.hidden, dims.hidden, dims.d_v],
            vec![Activation::Tanh, Activation::Tanh, Activation::Identity],
            rng,
        )?;
        Ok(Self { mlp, dims, frozen: false })
    }

    pub fn assemble(
        &self,
        a: &Array2<f64>,
        r_0: &Array2<f64>,
        t: usize,
        v_t: &Array2<f64>,
        z: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if t == 0 || t > self.dims.t_max {
            return Err(Error::StepOutOfRange { t, max: self.dims.t_max });
        }
        check_cols("a", a, self.dims.d_a)?;
        check_cols("r_0", r_0, self.dims.d_r)?;
        check_cols("v_t", v_t, self.dims.d_v)?;
        check_cols("z", z, self.dims.d_z)?;
        for (name, m) in [("a", a), ("r_0", r_0), ("v_t", v_t), ("z", z)] {
            check_finite(name, m)?;
        }
        let te = t_embed_rows(t, &self.dims, a.nrows());
        concat_cols(&[a, r_0, &te, v_t, z])
    }

    pub fn generate(
        &self,
        a: &Array2<f64>,
        r_0: &Array2<f64>,
        t: usize,
        v_t: &Array2<f64>,
        z: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.mlp.apply(&self.assemble(a, r_0, t, v_t, z)?))
    }
}

/// DRG generator: (a, t, r_t, z) -> fake clean representation.
#[derive(Debug, Clone, PartialEq)]
pub struct RepGenerator {
    pub mlp: Mlp,
    pub dims: ModelDims,
    pub frozen: bool,
}

impl RepGenerator {
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        let d_in = dims.d_a + dims.t_embed + dims.d_r + dims.d_z;
        let mlp = Mlp::init(
            &[d_in, dims.hidden, dims.hidden, dims.d_r],
            vec![Activation::Tanh, Activation::Tanh, Activation::Identity],
            rng,
        )?;
        Ok(Self { mlp, dims, frozen: false })
    }

    pub fn assemble(
        &self,
        a: &Array2<f64>,
        t: usize,
        r_t: &Array2<f64>,
        z: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if t == 0 || t > self.dims.t_max {
            return Err(Error::StepOutOfRange { t, max: self.dims.t_max });
        }
        check_cols("a", a, self.dims.d_a)?;
        check_cols("r_t", r_t, self.dims.d_r)?;
        check_cols("z", z, self.dims.d_z)?;
        for (name, m) in [("a", a), ("r_t", r_t), ("z", z)] {
            check_finite(name, m)?;
        }
        let te = t_embed_rows(t, &self.dims, a.nrows());
        concat_cols(&[a, &te, r_t, z])
    }

    pub fn generate(
        &self,
        a: &Array2<f64>,
        t: usize,
        r_t: &Array2<f64>,
        z: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.mlp.apply(&self.assemble(a, t, r_t, z)?))
    }
}

/// The five critic conditioning layouts. The first block is the penalized
/// input for the gradient penalty; the remaining blocks condition the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticKind {
    /// (v_0, a)
    Adv,
    /// (v_{t-1}, v_t, r_0, a, t)
    Diff,
    /// (v_0, r_0)
    Rep,
    /// (r_0, a)
    AdvPrime,
    /// (r_{t-1}, r_t, a, t)
    DiffPrime,
}

impl CriticKind {
    /// Column widths of the input blocks, excluding the step embedding.
    pub fn block_dims(self, dims: &ModelDims) -> Vec<usize> {
        match self {
            CriticKind::Adv => vec![dims.d_v, dims.d_a],
            CriticKind::Diff => vec![dims.d_v, dims.d_v, dims.d_r, dims.d_a],
            CriticKind::Rep => vec![dims.d_v, dims.d_r],
            CriticKind::AdvPrime => vec![dims.d_r, dims.d_a],
            CriticKind::DiffPrime => vec![dims.d_r, dims.d_r, dims.d_a],
        }
    }

    pub fn takes_step(self) -> bool {
        matches!(self, CriticKind::Diff | CriticKind::DiffPrime)
    }

    /// Width of the penalized (first) block.
    pub fn pen_dims(self, dims: &ModelDims) -> usize {
        self.block_dims(dims)[0]
    }

    fn in_dim(self, dims: &ModelDims) -> usize {
        let base: usize = self.block_dims(dims).iter().sum();
        base + if self.takes_step() { dims.t_embed } else { 0 }
    }
}

/// A scalar-output Wasserstein critic with no output nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub kind: CriticKind,
    pub mlp: Mlp,
    pub dims: ModelDims,
}

impl Critic {
    pub fn init<R: Rng>(kind: CriticKind, dims: ModelDims, rng: &mut R) -> Result<Self> {
        let mlp = Mlp::init(
            &[kind.in_dim(&dims), dims.hidden, dims.hidden, 1],
            vec![Activation::LeakyRelu, Activation::LeakyRelu, Activation::Identity],
            rng,
        )?;
        Ok(Self { kind, mlp, dims })
    }

    /// Concatenate the conditioning blocks (and the step embedding where the
    /// variant takes one), checking arity and dimensions.
    pub fn assemble(&self, blocks: &[&Array2<f64>], t: Option<usize>) -> Result<Array2<f64>> {
        let want = self.kind.block_dims(&self.dims);
        if blocks.len() != want.len() {
            return Err(Error::DimMismatch(format!(
                "{:?} critic takes {} input blocks, got {}",
                self.kind,
                want.len(),
                blocks.len()
            )));
        }
        for (i, (b, w)) in blocks.iter().zip(&want).enumerate() {
            check_cols(&format!("block {i}"), b, *w)?;
            check_finite(&format!("block {i}"), b)?;
        }
        match (self.kind.takes_step(), t) {
            (true, Some(t)) => {
                if t == 0 || t > self.dims.t_max {
                    return Err(Error::StepOutOfRange { t, max: self.dims.t_max });
                }
                let te = t_embed_rows(t, &self.dims, blocks[0].nrows());
                let mut parts: Vec<&Array2<f64>> = blocks.to_vec();
                parts.push(&te);
                concat_cols(&parts)
            }
            (false, None) => concat_cols(blocks),
            (true, None) => Err(Error::InvalidInput(format!(
                "{:?} critic needs a diffusion step",
                self.kind
            ))),
            (false, Some(_)) => Err(Error::InvalidInput(format!(
                "{:?} critic takes no diffusion step",
                self.kind
            ))),
        }
    }

    /// Per-row critic score.
    pub fn score(&self, blocks: &[&Array2<f64>], t: Option<usize>) -> Result<Array2<f64>> {
        Ok(self.mlp.apply(&self.assemble(blocks, t)?))
    }
}

/// Every trainable network in the two-stage pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub g: Generator,
    pub r: RepGenerator,
    pub d_adv: Critic,
    pub d_diff: Critic,
    pub d_rep: Critic,
    pub d_adv_prime: Critic,
    pub d_diff_prime: Critic,
}

/// Initialize all networks with scaled-uniform fan-in initialization,
/// deterministically from the seed.
pub fn init_models(dims: ModelDims, seed: u64) -> Result<ModelSet> {
    if dims.d_z == 0 || dims.d_a == 0 || dims.d_v == 0 || dims.d_r == 0 {
        return Err(Error::Config("model dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ModelSet {
        g: Generator::init(dims, &mut rng)?,
        r: RepGenerator::init(dims, &mut rng)?,
        d_adv: Critic::init(CriticKind::Adv, dims, &mut rng)?,
        d_diff: Critic::init(CriticKind::Diff, dims, &mut rng)?,
        d_rep: Critic::init(CriticKind::Rep, dims, &mut rng)?,
        d_adv_prime: Critic::init(CriticKind::AdvPrime, dims, &mut rng)?,
        d_diff_prime: Critic::init(CriticKind::DiffPrime, dims, &mut rng)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand_distr::StandardNormal;

    fn dims() -> ModelDims {
        ModelDims { d_a: 6, d_v: 8, d_r: 4, d_z: 5, hidden: 16, t_embed: 8, t_max: 4 }
    }

    fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_models(dims(), 42).unwrap();
        let b = init_models(dims(), 42).unwrap();
        assert_eq!(a, b);
        let c = init_models(dims(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_latent_dim_rejected() {
        let mut d = dims();
        d.d_z = 0;
        assert!(init_models(d, 0).is_err());
    }

    #[test]
    fn initialized_critic_output_scale_is_sane() {
        let m = init_models(dims(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = randn(&mut rng, (256, 8));
        let a = randn(&mut rng, (256, 6));
        let s = m.d_adv.score(&[&v, &a], None).unwrap();
        let mean = s.mean().unwrap();
        let std = (s.mapv(|x| (x - mean) * (x - mean)).mean().unwrap()).sqrt();
        assert!(std > 0.01 && std < 100.0, "critic init std {std}");
    }

    #[test]
    fn generator_batch_consistency() {
        let m = init_models(dims(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = 5;
        let (a, r0, vt, z) =
            (randn(&mut rng, (b, 6)), randn(&mut rng, (b, 4)), randn(&mut rng, (b, 8)), randn(&mut rng, (b, 5)));
        let batched = m.g.generate(&a, &r0, 2, &vt, &z).unwrap();
        for i in 0..b {
            let row = |m: &Array2<f64>| m.slice(s![i..i + 1, ..]).to_owned();
            let single = m.g.generate(&row(&a), &row(&r0), 2, &row(&vt), &row(&z)).unwrap();
            for (x, y) in batched.row(i).iter().zip(single.row(0).iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generator_rejects_bad_inputs() {
        let m = init_models(dims(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, r0, vt, z) =
            (randn(&mut rng, (2, 6)), randn(&mut rng, (2, 4)), randn(&mut rng, (2, 8)), randn(&mut rng, (2, 5)));
        assert!(m.g.generate(&a, &r0, 0, &vt, &z).is_err());
        assert!(m.g.generate(&a, &r0, 5, &vt, &z).is_err());
        let mut bad = a.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(m.g.generate(&bad, &r0, 2, &vt, &z).is_err());
        let wrong = randn(&mut rng, (2, 7));
        assert!(m.g.generate(&wrong, &r0, 2, &vt, &z).is_err());
    }

    #[test]
    fn zero_final_layer_scores_zero() {
        let mut m = init_models(dims(), 4).unwrap();
        let last = m.d_rep.mlp.layers.last_mut().unwrap();
        last.w.fill(0.0);
        last.b.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = randn(&mut rng, (3, 8));
        let r = randn(&mut rng, (3, 4));
        let s = m.d_rep.score(&[&v, &r], None).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn critic_arity_and_step_requirements() {
        let m = init_models(dims(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = randn(&mut rng, (3, 8));
        let a = randn(&mut rng, (3, 6));
        let r = randn(&mut rng, (3, 4));
        // diff critic called with adv-shaped inputs
        assert!(m.d_diff.score(&[&v, &a], Some(2)).is_err());
        // missing / spurious step argument
        assert!(m.d_diff.score(&[&v, &v, &r, &a], None).is_err());
        assert!(m.d_adv.score(&[&v, &a], Some(2)).is_err());
        // correct call works
        assert!(m.d_diff.score(&[&v, &v, &r, &a], Some(2)).is_ok());
    }

    #[test]
    fn critic_scores_permutation_invariant_per_row() {
        let m = init_models(dims(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = randn(&mut rng, (4, 8));
        let a = randn(&mut rng, (4, 6));
        let s = m.d_adv.score(&[&v, &a], None).unwrap();
        let perm = [3usize, 1, 0, 2];
        let sp = m
            .d_adv
            .score(&[&v.select(Axis(0), &perm), &a.select(Axis(0), &perm)], None)
            .unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((sp[[i, 0]] - s[[p, 0]]).abs() < 1e-14);
        }
    }

    #[test]
    fn parameter_counts_match_declared_architecture() {
        let d = dims();
        let m = init_models(d, 1).unwrap();
        let mlp_count = |ins: usize, h: usize, out: usize| {
            ins * h + h + h * h + h + h * out + out
        };
        assert_eq!(m.g.mlp.param_count(), mlp_count(6 + 4 + 8 + 8 + 5, 16, 8));
        assert_eq!(m.r.mlp.param_count(), mlp_count(6 + 8 + 4 + 5, 16, 4));
        assert_eq!(m.d_adv.mlp.param_count(), mlp_count(8 + 6, 16, 1));
        assert_eq!(m.d_diff.mlp.param_count(), mlp_count(8 + 8 + 4 + 6 + 8, 16, 1));
        assert_eq!(m.d_rep.mlp.param_count(), mlp_count(8 + 4, 16, 1));
        assert_eq!(m.d_adv_prime.mlp.param_count(), mlp_count(4 + 6, 16, 1));
        assert_eq!(m.d_diff_prime.mlp.param_count(), mlp_count(4 + 4 + 6 + 8, 16, 1));
    }
}
