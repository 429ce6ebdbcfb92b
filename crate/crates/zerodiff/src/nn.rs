//! Minimal dense-network machinery: linear layers, MLPs with explicit
//! backward passes, input gradients, a double-backprop path for gradient
//! penalties, and the Adam optimizer.
//!
//! Everything runs in f64. Parameter gradients are produced as structures
//! mirroring the network so they can be flattened for the optimizer and for
//! finite-difference checks.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    /// max(x, 0.2 x); the WGAN critic nonlinearity.
    LeakyRelu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn f(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    0.2 * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn df(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.2
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    pub fn d2f(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu | Activation::Identity => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

/// Weights are stored input-major so the forward pass is `x.dot(&w) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub acts: Vec<Activation>,
}

/// Per-layer caches from a forward pass: layer inputs and pre-activations.
pub struct ForwardCache {
    pub inputs: Vec<Array2<f64>>,
    pub preacts: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Parameter gradients mirroring an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        let layers = mlp
            .layers
            .iter()
            .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
            .collect();
        Self { layers }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.scaled_add(scale, ow);
            b.scaled_add(scale, ob);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * s);
            b.mapv_inplace(|v| v * s);
        }
    }

    pub fn to_flat(&self, out: &mut Vec<f64>) {
        out.clear();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| {
            w.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite())
        })
    }
}

impl Mlp {
    /// Scaled-uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init<R: Rng>(dims: &[usize], acts: Vec<Activation>, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.len() - 1 != acts.len() {
            return Err(Error::Config("mlp needs dims.len() == acts.len() + 1 >= 2".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..bound));
            let b = Array1::from_shape_simple_fn(fan_out, || rng.gen_range(-bound..bound));
            layers.push(Linear { w, b });
        }
        Ok(Self { layers, acts })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> ForwardCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (layer, act) in self.layers.iter().zip(&self.acts) {
            let z = a.dot(&layer.w) + &layer.b;
            inputs.push(a);
            a = z.mapv(|v| act.f(v));
            preacts.push(z);
        }
        ForwardCache { inputs, preacts, output: a }
    }

    /// Forward pass without caches.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut a = x.clone();
        for (layer, act) in self.layers.iter().zip(&self.acts) {
            a = (a.dot(&layer.w) + &layer.b).mapv(|v| act.f(v));
        }
        a
    }

    /// Reverse pass: returns parameter gradients and the gradient w.r.t. the
    /// network input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> (MlpGrads, Array2<f64>) {
        let mut grads = MlpGrads::zeros_like(self);
        let mut grad_a = grad_out.clone();
        for l in (0..self.layers.len()).rev() {
            let act = self.acts[l];
            let dz = &grad_a * &cache.preacts[l].mapv(|v| act.df(v));
            grads.layers[l].0 = cache.inputs[l].t().dot(&dz);
            grads.layers[l].1 = dz.sum_axis(Axis(0));
            grad_a = dz.dot(&self.layers[l].w.t());
        }
        (grads, grad_a)
    }

    /// Per-row gradient of a scalar-output network w.r.t. its input.
    pub fn input_gradient(&self, cache: &ForwardCache) -> Array2<f64> {
        assert_eq!(self.out_dim(), 1, "input_gradient expects a scalar-output network");
        let ones = Array2::ones((cache.output.nrows(), 1));
        let mut grad_a = ones;
        for l in (0..self.layers.len()).rev() {
            let act = self.acts[l];
            let dz = &grad_a * &cache.preacts[l].mapv(|v| act.df(v));
            grad_a = dz.dot(&self.layers[l].w.t());
        }
        grad_a
    }

    /// Gradient penalty `mean_i (||g_i|| - 1)^2` over the first `pen_dims`
    /// input coordinates, where `g_i` is the input gradient of row `i`, and
    /// its gradient w.r.t. the network parameters (double backprop).
    pub fn gradient_penalty(&self, x: &Array2<f64>, pen_dims: usize) -> (f64, MlpGrads) {
        assert!(pen_dims >= 1 && pen_dims <= self.in_dim());
        let batch = x.nrows() as f64;
        let cache = self.forward(x);
        let g = self.input_gradient(&cache);

        // penalty value and the seed u = dp/dg (zero on conditioning coords)
        let mut penalty = 0.0;
        let mut u = Array2::zeros(x.raw_dim());
        for (i, row) in g.rows().into_iter().enumerate() {
            let norm: f64 = row.iter().take(pen_dims).map(|v| v * v).sum::<f64>().sqrt();
            penalty += (norm - 1.0) * (norm - 1.0);
            if norm > 0.0 {
                let c = 2.0 * (norm - 1.0) / norm / batch;
                for j in 0..pen_dims {
                    u[[i, j]] = c * g[[i, j]];
                }
            }
        }
        penalty /= batch;

        // forward tangent pass in direction u: sum_i <u_i, g_i> = sum_i s_dot_i
        let l_count = self.layers.len();
        let mut tan_inputs = Vec::with_capacity(l_count); // a_dot_{l-1}
        let mut tan_preacts = Vec::with_capacity(l_count); // z_dot_l
        let mut a_dot = u;
        for l in 0..l_count {
            let z_dot = a_dot.dot(&self.layers[l].w);
            tan_inputs.push(a_dot);
            a_dot = &z_dot * &cache.preacts[l].mapv(|v| self.acts[l].df(v));
            tan_preacts.push(z_dot);
        }

        // reverse pass of J = sum_i s_dot_i through primal and tangent branches
        let mut grads = MlpGrads::zeros_like(self);
        let mut adj_a_dot = Array2::ones(a_dot.raw_dim());
        let mut adj_a: Array2<f64> = Array2::zeros(a_dot.raw_dim());
        for l in (0..l_count).rev() {
            let act = self.acts[l];
            let dphi = cache.preacts[l].mapv(|v| act.df(v));
            let adj_z_dot = &adj_a_dot * &dphi;
            let mut adj_z = &adj_a * &dphi;
            if matches!(act, Activation::Tanh) {
                let d2phi = cache.preacts[l].mapv(|v| act.d2f(v));
                adj_z = adj_z + &adj_a_dot * &d2phi * &tan_preacts[l];
            }
            grads.layers[l].0 = tan_inputs[l].t().dot(&adj_z_dot) + cache.inputs[l].t().dot(&adj_z);
            grads.layers[l].1 = adj_z.sum_axis(Axis(0));
            adj_a_dot = adj_z_dot.dot(&self.layers[l].w.t());
            adj_a = adj_z.dot(&self.layers[l].w.t());
        }
        (penalty, grads)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn to_flat(&self, out: &mut Vec<f64>) {
        out.clear();
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
    }

    pub fn from_flat(&mut self, src: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = src[k];
                k += 1;
            }
            for v in l.b.iter_mut() {
                *v = src[k];
                k += 1;
            }
        }
        assert_eq!(k, src.len());
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, n_params: usize) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidInput("non-finite gradient in optimizer step".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a diffusion step, normalized to [0, 1] inside the
/// frequency sweep.
pub fn time_embedding(t: usize, t_max: usize, dim: usize) -> Array1<f64> {
    let pos = t as f64 / t_max as f64;
    let mut out = Array1::zeros(dim);
    for k in 0..dim / 2 {
        let freq = (10_000f64).powf(-(k as f64) / (dim / 2) as f64);
        out[2 * k] = (pos * freq * std::f64::consts::PI * 2.0).sin();
        out[2 * k + 1] = (pos * freq * std::f64::consts::PI * 2.0).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy_mlp(rng: &mut ChaCha8Rng, acts: [Activation; 3]) -> Mlp {
        Mlp::init(&[5, 8, 8, 1], acts.to_vec(), rng).unwrap()
    }

    fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &mut Vec<f64>, i: usize, h: f64) -> f64 {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(x);
        x[i] = orig - h;
        let fm = f(x);
        x[i] = orig;
        (fp - fm) / (2.0 * h)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for acts in [
            [Activation::Tanh, Activation::Tanh, Activation::Identity],
            [Activation::LeakyRelu, Activation::LeakyRelu, Activation::Identity],
        ] {
            let mlp = toy_mlp(&mut rng, acts);
            let x = Array2::from_shape_simple_fn((4, 5), || rng.sample::<f64, _>(StandardNormal));
            // scalar loss: sum of outputs
            let cache = mlp.forward(&x);
            let seed = Array2::ones(cache.output.raw_dim());
            let (grads, gin) = mlp.backward(&cache, &seed);
            let mut flat_g = Vec::new();
            grads.to_flat(&mut flat_g);
            let mut theta = Vec::new();
            mlp.to_flat(&mut theta);
            let mut probe = mlp.clone();
            let mut f = |p: &[f64]| {
                probe.from_flat(p);
                probe.apply(&x).sum()
            };
            for i in (0..theta.len()).step_by(7) {
                let fd = central_diff(&mut f, &mut theta, i, 1e-6);
                assert!(
                    (fd - flat_g[i]).abs() <= 1e-6 * (1.0 + fd.abs().max(flat_g[i].abs())),
                    "param {i}: fd {fd} analytic {}",
                    flat_g[i]
                );
            }
            // input gradient against finite differences
            for (r, c) in [(0usize, 0usize), (2, 3)] {
                let mut xp = x.clone();
                xp[[r, c]] += 1e-6;
                let fp = mlp.apply(&xp).sum();
                xp[[r, c]] -= 2e-6;
                let fm = mlp.apply(&xp).sum();
                let fd = (fp - fm) / 2e-6;
                assert!((fd - gin[[r, c]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn input_gradient_matches_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = toy_mlp(&mut rng, [Activation::LeakyRelu, Activation::Tanh, Activation::Identity]);
        let x = Array2::from_shape_simple_fn((6, 5), || rng.sample::<f64, _>(StandardNormal));
        let cache = mlp.forward(&x);
        let g1 = mlp.input_gradient(&cache);
        let (_, g2) = mlp.backward(&cache, &Array2::ones((6, 1)));
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_penalty_linear_critic_closed_form() {
        // single-layer linear critic D(x) = w.x + b: input gradient is w, so
        // the penalty is (||w|| - 1)^2 and its parameter gradient is
        // 2 (||w|| - 1) w / ||w||.
        let w = vec![2.0, -1.0, 2.0]; // norm 3
        let mut mlp = Mlp {
            layers: vec![Linear { w: Array2::from_shape_vec((3, 1), w.clone()).unwrap(), b: Array1::zeros(1) }],
            acts: vec![Activation::Identity],
        };
        let x = Array2::from_shape_vec((4, 3), (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        let (gp, grads) = mlp.gradient_penalty(&x, 3);
        assert!((gp - 4.0).abs() < 1e-9);
        let expect: Vec<f64> = w.iter().map(|v| 2.0 * (3.0 - 1.0) * v / 3.0).collect();
        for (a, b) in grads.layers[0].0.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        // unit-norm critic: penalty 0
        mlp.layers[0].w = Array2::from_shape_vec((3, 1), vec![0.6, 0.8, 0.0]).unwrap();
        let (gp, _) = mlp.gradient_penalty(&x, 3);
        assert!(gp.abs() < 1e-12);
    }

    #[test]
    fn gradient_penalty_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for acts in [
            [Activation::Tanh, Activation::Tanh, Activation::Identity],
            [Activation::LeakyRelu, Activation::LeakyRelu, Activation::Identity],
        ] {
            let mlp = toy_mlp(&mut rng, acts);
            let x = Array2::from_shape_simple_fn((4, 5), || rng.sample::<f64, _>(StandardNormal));
            let pen_dims = 3;
            let (_, grads) = mlp.gradient_penalty(&x, pen_dims);
            let mut flat_g = Vec::new();
            grads.to_flat(&mut flat_g);
            let mut theta = Vec::new();
            mlp.to_flat(&mut theta);
            let mut probe = mlp.clone();
            let mut f = |p: &[f64]| {
                probe.from_flat(p);
                probe.gradient_penalty(&x, pen_dims).0
            };
            for i in (0..theta.len()).step_by(5) {
                let fd = central_diff(&mut f, &mut theta, i, 1e-6);
                let denom = 1.0 + fd.abs().max(flat_g[i].abs());
                assert!(
                    (fd - flat_g[i]).abs() <= 1e-3 * denom,
                    "acts {acts:?} param {i}: fd {fd} analytic {}",
                    flat_g[i]
                );
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_rejects_bad_dims() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = Mlp::init(&[4, 3, 1], vec![Activation::Tanh, Activation::Identity], &mut r1).unwrap();
        let b = Mlp::init(&[4, 3, 1], vec![Activation::Tanh, Activation::Identity], &mut r2).unwrap();
        assert_eq!(a, b);
        assert!(Mlp::init(&[4, 0, 1], vec![Activation::Tanh, Activation::Identity], &mut r1).is_err());
        assert!(Mlp::init(&[4], vec![], &mut r1).is_err());
    }

    #[test]
    fn adam_first_step_is_bias_corrected_unit_update() {
        // constant gradient 1: first step is -lr regardless of betas
        let mut adam = Adam::new(0.1, 0.5, 0.999, 1);
        let mut p = vec![0.0];
        adam.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-7, "{}", p[0]);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = Adam::new(0.1, 0.9, 0.999, 3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1);
        let mut p = vec![0.0];
        assert!(adam.step(&mut p, &[f64::NAN]).is_err());
    }

    #[test]
    fn adam_state_round_trip_continuation() {
        let grad_at = |p: f64| 2.0 * p; // d/dp of p^2
        let mut a = Adam::new(0.05, 0.9, 0.999, 1);
        let mut p = vec![1.0];
        for _ in 0..10 {
            let g = grad_at(p[0]);
            a.step(&mut p, &[g]).unwrap();
        }
        let json = serde_json::to_string(&a).unwrap();
        let mut b: Adam = serde_json::from_str(&json).unwrap();
        let mut q = p.clone();
        for _ in 0..10 {
            let g = grad_at(p[0]);
            a.step(&mut p, &[g]).unwrap();
            let g = grad_at(q[0]);
            b.step(&mut q, &[g]).unwrap();
        }
        assert_eq!(p, q);
    }

    #[test]
    fn time_embedding_shape_and_range() {
        let e = time_embedding(3, 4, 16);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(time_embedding(1, 4, 16), time_embedding(2, 4, 16));
    }
}
