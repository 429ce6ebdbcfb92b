//! Fine-tuning stage: a cross-entropy feature extractor and a supervised
//! contrastive representation extractor over raw vectors, trained on
//! train_seen and then frozen. Precomputed-feature bundles get a pass-through
//! pair so downstream stages behave identically.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bundle::{DatasetBundle, SplitTag};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp};

/// Mean cross-entropy of softmax(logits) against integer labels, and its
/// gradient w.r.t. the logits.
pub fn ce_loss(logits: &Array2<f64>, labels: &[u32]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::DimMismatch(format!("{b} logit rows, {} labels", labels.len())));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    let mut grad = Array2::zeros((b, c));
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = labels[i] as usize;
        if y >= c {
            return Err(Error::InvalidInput(format!("label {y} out of range for {c} classes")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[y] - max);
        for j in 0..c {
            grad[[i, j]] = (exps[j] / z - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Supervised contrastive loss with one sampled positive per anchor: rows of
/// different label form the negative set. Anchors without a positive are
/// skipped; a batch with no valid anchor is an error. Also returns the
/// gradient w.r.t. the (unit-norm) projection rows.
pub fn sc_loss<R: Rng>(
    projections: &Array2<f64>,
    labels: &[u32],
    tau: f64,
    rng: &mut R,
) -> Result<(f64, Array2<f64>)> {
    let b = projections.nrows();
    if labels.len() != b {
        return Err(Error::DimMismatch(format!("{b} rows, {} labels", labels.len())));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    for row in projections.rows() {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("projection row has norm {n}, expected 1")));
        }
    }
    let mut grad = Array2::zeros(projections.raw_dim());
    let mut loss = 0.0;
    let mut valid = 0usize;
    for i in 0..b {
        let positives: Vec<usize> =
            (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let Some(&p) = positives.as_slice().choose(rng) else { continue };
        valid += 1;
        let negatives: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();
        let sim = |j: usize| projections.row(i).dot(&projections.row(j));
        let s_pos = sim(p) / tau;
        // log-sum-exp over {positive} ∪ negatives
        let mut scores = vec![s_pos];
        scores.extend(negatives.iter().map(|&j| sim(j) / tau));
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += max + z.ln() - s_pos;
        // gradients: dL/ds_k = softmax_k - [k == positive]
        let others: Vec<usize> = std::iter::once(p).chain(negatives.iter().cloned()).collect();
        for (k, &j) in others.iter().enumerate() {
            let coeff = (exps[k] / z - if k == 0 { 1.0 } else { 0.0 }) / tau;
            // s = h_i . h_j
            grad.row_mut(i).scaled_add(coeff, &projections.row(j));
            grad.row_mut(j).scaled_add(coeff, &projections.row(i));
        }
    }
    if valid == 0 {
        return Err(Error::NoPositivePair);
    }
    grad.mapv_inplace(|v| v / valid as f64);
    Ok((loss / valid as f64, grad))
}

/// Row-normalize to unit norm; also returns the pre-normalization norms for
/// the backward pass.
fn normalize_rows(m: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = Array1::from_iter(
        m.rows().into_iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)),
    );
    let mut out = m.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    (out, norms)
}

/// Backward through row normalization: dL/dp = (dL/dh - h (h . dL/dh)) / ||p||.
fn normalize_rows_backward(
    h: &Array2<f64>,
    norms: &Array1<f64>,
    grad_h: &Array2<f64>,
) -> Array2<f64> {
    let mut out = grad_h.clone();
    for i in 0..h.nrows() {
        let dot = h.row(i).dot(&grad_h.row(i));
        let hr = h.row(i).to_owned();
        out.row_mut(i).scaled_add(-dot, &hr);
        out.row_mut(i).mapv_inplace(|v| v / norms[i]);
    }
    out
}

/// The frozen extractor pair: a CE-trained feature encoder and an SC-trained
/// representation encoder. In pass-through mode the encoders are skipped and
/// precomputed matrices are used instead.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorPair {
    pub f_ce: Mlp,
    pub cls: Mlp,
    pub f_sc: Mlp,
    pub proj: Mlp,
    pub frozen: bool,
    pub passthrough: bool,
}

impl ExtractorPair {
    /// Frozen pass-through pair for bundles carrying precomputed features
    /// and representations; the stub networks are never applied.
    pub fn passthrough() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stub = Mlp::init(&[1, 1], vec![Activation::Identity], &mut rng).unwrap();
        Self {
            f_ce: stub.clone(),
            cls: stub.clone(),
            f_sc: stub.clone(),
            proj: stub,
            frozen: true,
            passthrough: true,
        }
    }

    /// v_0 for a raw batch.
    pub fn features(&self, raw: &Array2<f64>) -> Array2<f64> {
        self.f_ce.apply(raw)
    }

    /// r_0 for a raw batch.
    pub fn representations(&self, raw: &Array2<f64>) -> Array2<f64> {
        self.f_sc.apply(raw)
    }

    /// Extract (v_0, r_0) for every sample in the bundle. In pass-through
    /// mode this reads the precomputed matrices.
    pub fn extract_all(&self, bundle: &DatasetBundle) -> Result<(Array2<f64>, Array2<f64>)> {
        if self.passthrough {
            let f = bundle.features.clone().ok_or_else(|| {
                Error::InvalidInput("pass-through extractors need precomputed features".into())
            })?;
            let r = bundle.representations.clone().ok_or_else(|| {
                Error::InvalidInput("pass-through extractors need precomputed representations".into())
            })?;
            Ok((f, r))
        } else {
            let raw = bundle
                .raw
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("bundle has no raw vectors".into()))?;
            Ok((self.features(raw), self.representations(raw)))
        }
    }

    /// CE-branch class prediction accuracy over the given rows.
    pub fn ce_accuracy(&self, raw: &Array2<f64>, labels: &[u32]) -> f64 {
        let logits = self.cls.apply(&self.features(raw));
        let mut hits = 0usize;
        for (i, row) in logits.rows().into_iter().enumerate() {
            let mut pred = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[pred] {
                    pred = j;
                }
            }
            if pred as u32 == labels[i] {
                hits += 1;
            }
        }
        hits as f64 / labels.len() as f64
    }
}

/// Run the fine-tuning stage and freeze the result.
///
/// Seen-class labels are remapped to 0.. for the CE head. In precomputed mode
/// the returned pair is pass-through.
pub fn finetune(bundle: &DatasetBundle, config: &TrainConfig, seed: u64) -> Result<ExtractorPair> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if bundle.is_precomputed() {
        if bundle.representations.is_none() {
            return Err(Error::InvalidInput(
                "precomputed bundle is missing the representations matrix".into(),
            ));
        }
        return Ok(ExtractorPair::passthrough());
    }

    let raw = bundle.raw.as_ref().unwrap();
    let d_x = raw.ncols();
    let train_idx = bundle.indices_with_split(SplitTag::TrainSeen);
    if train_idx.is_empty() {
        return Err(Error::InvalidInput("bundle has no train_seen samples".into()));
    }
    let mut seen_sorted = bundle.seen_classes.clone();
    seen_sorted.sort_unstable();
    let class_of = |y: u32| seen_sorted.iter().position(|&c| c == y).unwrap() as u32;
    let c_s = seen_sorted.len();
    let h = config.extractor_hidden;

    let mut pair = ExtractorPair {
        f_ce: Mlp::init(&[d_x, h, config.d_v], vec![Activation::Tanh, Activation::Tanh], &mut rng)?,
        cls: Mlp::init(&[config.d_v, c_s], vec![Activation::Identity], &mut rng)?,
        f_sc: Mlp::init(&[d_x, h, config.d_r], vec![Activation::Tanh, Activation::Tanh], &mut rng)?,
        proj: Mlp::init(&[config.d_r, config.d_r], vec![Activation::Identity], &mut rng)?,
        frozen: false,
        passthrough: false,
    };
    finetune_steps(&mut pair, bundle, &train_idx, &class_of, config, config.n_ft, &mut rng)?;
    pair.frozen = true;
    Ok(pair)
}

/// Run further fine-tuning iterations on an unfrozen pair. Frozen pairs are
/// immutable.
pub fn finetune_steps<R: Rng>(
    pair: &mut ExtractorPair,
    bundle: &DatasetBundle,
    train_idx: &[usize],
    class_of: &dyn Fn(u32) -> u32,
    config: &TrainConfig,
    iters: usize,
    rng: &mut R,
) -> Result<()> {
    if pair.frozen {
        return Err(Error::Frozen);
    }
    let raw = bundle.raw.as_ref().unwrap();
    let mut opt_ce = Adam::new(
        config.extractor_lr,
        0.9,
        0.999,
        pair.f_ce.param_count() + pair.cls.param_count(),
    );
    let mut opt_sc = Adam::new(
        config.extractor_lr,
        0.9,
        0.999,
        pair.f_sc.param_count() + pair.proj.param_count(),
    );
    let bsz = config.batch_size.min(train_idx.len());
    let mut flat = Vec::new();
    let mut flat_b = Vec::new();
    for _ in 0..iters {
        let batch: Vec<usize> =
            (0..bsz).map(|_| train_idx[rng.gen_range(0..train_idx.len())]).collect();
        let x = raw.select(Axis(0), &batch);
        let y: Vec<u32> = batch.iter().map(|&i| class_of(bundle.labels[i])).collect();

        // CE branch
        let cache_enc = pair.f_ce.forward(&x);
        let cache_cls = pair.cls.forward(&cache_enc.output);
        let (_, dlogits) = ce_loss(&cache_cls.output, &y)?;
        let (g_cls, dfeat) = pair.cls.backward(&cache_cls, &dlogits);
        let (g_enc, _) = pair.f_ce.backward(&cache_enc, &dfeat);
        g_enc.to_flat(&mut flat);
        g_cls.to_flat(&mut flat_b);
        flat.extend_from_slice(&flat_b);
        let mut theta = Vec::new();
        let mut theta_b = Vec::new();
        pair.f_ce.to_flat(&mut theta);
        pair.cls.to_flat(&mut theta_b);
        let n_enc = theta.len();
        theta.extend_from_slice(&theta_b);
        opt_ce.step(&mut theta, &flat)?;
        pair.f_ce.from_flat(&theta[..n_enc]);
        pair.cls.from_flat(&theta[n_enc..]);

        // SC branch
        let cache_sc = pair.f_sc.forward(&x);
        let cache_proj = pair.proj.forward(&cache_sc.output);
        let (hn, norms) = normalize_rows(&cache_proj.output);
        match sc_loss(&hn, &y, config.tau, rng) {
            Ok((_, dh)) => {
                let dp = normalize_rows_backward(&hn, &norms, &dh);
                let (g_proj, drep) = pair.proj.backward(&cache_proj, &dp);
                let (g_sc, _) = pair.f_sc.backward(&cache_sc, &drep);
                g_sc.to_flat(&mut flat);
                g_proj.to_flat(&mut flat_b);
                flat.extend_from_slice(&flat_b);
                let mut theta = Vec::new();
                let mut theta_b = Vec::new();
                pair.f_sc.to_flat(&mut theta);
                pair.proj.to_flat(&mut theta_b);
                let n_enc = theta.len();
                theta.extend_from_slice(&theta_b);
                opt_sc.step(&mut theta, &flat)?;
                pair.f_sc.from_flat(&theta[..n_enc]);
                pair.proj.from_flat(&theta[n_enc..]);
            }
            Err(Error::NoPositivePair) => {} // degenerate batch, skip the SC update
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
