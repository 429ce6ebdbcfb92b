//! Zero-shot inference: synthesize features for unseen classes from the
//! frozen generators, train a linear softmax head on the synthetic (plus,
//! for the generalized protocol, real seen) data and score top-1 accuracy
//! per class.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{DatasetBundle, SplitTag};
use crate::config::TrainConfig;
use crate::diffusion::{build_vp_schedule, posterior_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::extractors::{ce_loss, ExtractorPair};
use crate::networks::{Generator, RepGenerator};
use crate::nn::{Activation, Adam, Mlp};

/// Synthetic samples for a set of classes: paired features and
/// representations with class labels.
#[derive(Debug, Clone)]
pub struct SynthesizedSet {
    pub features: Array2<f64>,
    pub representations: Array2<f64>,
    pub labels: Vec<u32>,
}

fn randn<R: Rng>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

/// Run the reverse chain from pure noise at step `t_te` down to a clean
/// estimate: at each step the generator predicts x_0 from the current state
/// and the state is renoised one step lower via the posterior.
fn reverse_chain<R, F>(
    schedule: &DiffusionSchedule,
    t_te: usize,
    mut state: Array2<f64>,
    mut gen_step: F,
    rng: &mut R,
) -> Result<Array2<f64>>
where
    R: Rng,
    F: FnMut(&Array2<f64>, usize, &mut R) -> Result<Array2<f64>>,
{
    schedule.check_step(t_te)?;
    let mut x0_hat = None;
    for t in (1..=t_te).rev() {
        let pred = gen_step(&state, t, rng)?;
        if t > 1 {
            state = posterior_sample(schedule, &pred, &state, t, rng)?;
        }
        x0_hat = Some(pred);
    }
    Ok(x0_hat.expect("t_te >= 1"))
}

/// Synthesize `n_per_class` samples for each listed class: representations
/// from the frozen representation generator, then features from the frozen
/// feature generator conditioned on them.
pub fn synthesize<R: Rng>(
    r_star: &RepGenerator,
    g_star: &Generator,
    attributes: &Array2<f64>,
    classes: &[u32],
    n_per_class: usize,
    t_te: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<SynthesizedSet> {
    if !r_star.frozen || !g_star.frozen {
        return Err(Error::InvalidInput("synthesis requires frozen generators".into()));
    }
    let dims = g_star.dims;
    let n = classes.len() * n_per_class;
    let mut features = Array2::zeros((n, dims.d_v));
    let mut representations = Array2::zeros((n, dims.d_r));
    let mut labels = Vec::with_capacity(n);
    if n_per_class == 0 {
        return Ok(SynthesizedSet { features, representations, labels });
    }
    for (ci, &class) in classes.iter().enumerate() {
        if class as usize >= attributes.nrows() {
            return Err(Error::InvalidInput(format!("class {class} has no attribute row")));
        }
        let a = Array2::from_shape_fn((n_per_class, attributes.ncols()), |(_, j)| {
            attributes[[class as usize, j]]
        });
        let r0 = reverse_chain(
            schedule,
            t_te,
            randn(rng, (n_per_class, dims.d_r)),
            |state, t, rng| {
                let z = randn(rng, (n_per_class, dims.d_z));
                r_star.generate(&a, t, state, &z)
            },
            rng,
        )?;
        let v0 = reverse_chain(
            schedule,
            t_te,
            randn(rng, (n_per_class, dims.d_v)),
            |state, t, rng| {
                let z = randn(rng, (n_per_class, dims.d_z));
                g_star.generate(&a, &r0, t, state, &z)
            },
            rng,
        )?;
        let lo = ci * n_per_class;
        features.slice_mut(ndarray::s![lo..lo + n_per_class, ..]).assign(&v0);
        representations.slice_mut(ndarray::s![lo..lo + n_per_class, ..]).assign(&r0);
        labels.extend(std::iter::repeat(class).take(n_per_class));
    }
    Ok(SynthesizedSet { features, representations, labels })
}

/// Linear softmax classifier over concatenated [feature | representation]
/// rows; `classes[j]` is the global class id of output column j.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub mlp: Mlp,
    pub classes: Vec<u32>,
}

impl Classifier {
    /// Predicted global class ids, lowest column winning ties.
    pub fn predict(&self, features: &Array2<f64>, reps: &Array2<f64>) -> Result<Vec<u32>> {
        let x = concatenate(Axis(1), &[features.view(), reps.view()]).map_err(|_| {
            Error::DimMismatch("classifier input rows do not align".into())
        })?;
        if x.ncols() != self.mlp.in_dim() {
            return Err(Error::DimMismatch(format!(
                "classifier expects {} input columns, got {}",
                self.mlp.in_dim(),
                x.ncols()
            )));
        }
        let logits = self.mlp.apply(&x);
        let mut out = Vec::with_capacity(x.nrows());
        for row in logits.axis_iter(Axis(0)) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(self.classes[best]);
        }
        Ok(out)
    }
}

/// Train the final linear classifier with Adam on cross-entropy. `classes`
/// fixes the output arity and column order; every label must be listed.
pub fn train_classifier<R: Rng>(
    features: &Array2<f64>,
    reps: &Array2<f64>,
    labels: &[u32],
    classes: &[u32],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Classifier> {
    if features.nrows() != labels.len() || reps.nrows() != labels.len() {
        return Err(Error::InvalidInput("classifier rows/labels length mismatch".into()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("no training rows for final classifier".into()));
    }
    let col_of: BTreeMap<u32, usize> =
        classes.iter().enumerate().map(|(j, &c)| (c, j)).collect();
    let mut local = Vec::with_capacity(labels.len());
    for &l in labels {
        local.push(*col_of.get(&l).ok_or_else(|| {
            Error::InvalidInput(format!("label {l} not in classifier class list"))
        })? as u32);
    }
    let x = concatenate(Axis(1), &[features.view(), reps.view()]).unwrap();
    let mut mlp = Mlp::init(&[x.ncols(), classes.len()], vec![Activation::Identity], rng)?;
    let mut theta = Vec::new();
    mlp.to_flat(&mut theta);
    let mut adam = Adam::new(config.classifier_lr, 0.9, 0.999, theta.len());
    let bsz = config.batch_size.min(x.nrows());
    let mut flat = Vec::new();
    for _ in 0..config.n_te {
        let batch: Vec<usize> =
            rand::seq::index::sample(rng, x.nrows(), bsz).into_vec();
        let xb = x.select(Axis(0), &batch);
        let yb: Vec<u32> = batch.iter().map(|&i| local[i]).collect();
        let cache = mlp.forward(&xb);
        let (_, grad_logits) = ce_loss(&cache.output, &yb)?;
        let (grads, _) = mlp.backward(&cache, &grad_logits);
        mlp.to_flat(&mut theta);
        grads.to_flat(&mut flat);
        adam.step(&mut theta, &flat)?;
        mlp.from_flat(&theta);
    }
    Ok(Classifier { mlp, classes: classes.to_vec() })
}

/// Final metrics. `t1_zsl` comes from the unseen-only protocol; `u`, `s`,
/// `h` from the generalized protocol. All are macro-averaged per-class
/// top-1 percentages.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub t1_zsl: Option<f64>,
    pub u: Option<f64>,
    pub s: Option<f64>,
    pub h: Option<f64>,
    pub per_class: BTreeMap<u32, f64>,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "t1_zsl,u,s,h,config_hash"
    }

    pub fn csv_row(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            fmt(self.t1_zsl),
            fmt(self.u),
            fmt(self.s),
            fmt(self.h),
            self.config_hash
        )
    }
}

/// H = 2SU / (S + U); zero when either side is zero.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Hex SHA-256 of the canonical JSON encoding of the config.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-class top-1 accuracy (percent) of predictions against labels.
pub fn per_class_accuracy(preds: &[u32], labels: &[u32]) -> BTreeMap<u32, f64> {
    let mut correct: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in preds.iter().zip(labels) {
        let e = correct.entry(l).or_insert((0, 0));
        e.1 += 1;
        if p == l {
            e.0 += 1;
        }
    }
    correct
        .into_iter()
        .map(|(c, (hit, tot))| (c, 100.0 * hit as f64 / tot as f64))
        .collect()
}

fn macro_avg(per_class: &BTreeMap<u32, f64>, classes: &[u32]) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().map(|c| per_class.get(c).copied().unwrap_or(0.0)).sum::<f64>()
        / classes.len() as f64
}

fn split_data(
    bundle: &DatasetBundle,
    extractors: &ExtractorPair,
    tag: SplitTag,
) -> Result<(Array2<f64>, Array2<f64>, Vec<u32>)> {
    let idx = bundle.indices_with_split(tag);
    let (v, r) = extractors.extract_all(bundle)?;
    Ok((
        v.select(Axis(0), &idx),
        r.select(Axis(0), &idx),
        idx.iter().map(|&i| bundle.labels[i]).collect(),
    ))
}

/// Full evaluation: synthesize unseen-class data, run the unseen-only (ZSL)
/// and generalized (GZSL) protocols, and report T1 / U / S / H.
pub fn run_zsl_eval(
    bundle: &DatasetBundle,
    extractors: &ExtractorPair,
    r_star: &RepGenerator,
    g_star: &Generator,
    config: &TrainConfig,
    n_syn: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let schedule = build_vp_schedule(config.t_max, config.beta_min, config.beta_max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth = synthesize(
        r_star,
        g_star,
        &bundle.attributes,
        &bundle.unseen_classes,
        n_syn,
        config.t_te,
        &schedule,
        &mut rng,
    )?;
    evaluate_with_synth(bundle, extractors, &synth, config, &mut rng)
}

/// Evaluation given an already-synthesized unseen set (for the CLI's split
/// synth/eval stages).
pub fn evaluate_with_synth<R: Rng>(
    bundle: &DatasetBundle,
    extractors: &ExtractorPair,
    synth: &SynthesizedSet,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<MetricsReport> {
    let (v_tu, r_tu, y_tu) = split_data(bundle, extractors, SplitTag::TestUnseen)?;
    let (v_ts, r_ts, y_ts) = split_data(bundle, extractors, SplitTag::TestSeen)?;
    let (v_tr, r_tr, y_tr) = split_data(bundle, extractors, SplitTag::TrainSeen)?;
    if synth.labels.is_empty() {
        return Err(Error::InvalidInput(
            "empty synthesized set: cannot train unseen classifier".into(),
        ));
    }

    // unseen-only protocol
    let zsl_cls = train_classifier(
        &synth.features,
        &synth.representations,
        &synth.labels,
        &bundle.unseen_classes,
        config,
        rng,
    )?;
    let preds = zsl_cls.predict(&v_tu, &r_tu)?;
    let pc_zsl = per_class_accuracy(&preds, &y_tu);
    let t1 = macro_avg(&pc_zsl, &bundle.unseen_classes);

    // generalized protocol: real seen train data plus synthetic unseen data
    let all_classes: Vec<u32> = bundle
        .seen_classes
        .iter()
        .chain(&bundle.unseen_classes)
        .copied()
        .collect();
    let gz_features = concatenate(Axis(0), &[v_tr.view(), synth.features.view()]).unwrap();
    let gz_reps = concatenate(Axis(0), &[r_tr.view(), synth.representations.view()]).unwrap();
    let gz_labels: Vec<u32> = y_tr.iter().chain(&synth.labels).copied().collect();
    let gz_cls =
        train_classifier(&gz_features, &gz_reps, &gz_labels, &all_classes, config, rng)?;
    let preds_u = gz_cls.predict(&v_tu, &r_tu)?;
    let preds_s = gz_cls.predict(&v_ts, &r_ts)?;
    let pc_u = per_class_accuracy(&preds_u, &y_tu);
    let pc_s = per_class_accuracy(&preds_s, &y_ts);
    let u = macro_avg(&pc_u, &bundle.unseen_classes);
    let s = macro_avg(&pc_s, &bundle.seen_classes);

    let mut per_class = pc_s;
    per_class.extend(pc_u);
    Ok(MetricsReport {
        t1_zsl: Some(t1),
        u: Some(u),
        s: Some(s),
        h: Some(harmonic_mean(s, u)),
        per_class,
        config_hash: config_hash(config),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{generate_synthetic, SynthConfig};
    use crate::networks::{init_models, ModelDims};

    fn frozen_models() -> (crate::networks::ModelSet, DiffusionSchedule) {
        let dims = ModelDims {
            d_a: 5,
            d_v: 6,
            d_r: 4,
            d_z: 3,
            hidden: 8,
            t_embed: 4,
            t_max: 4,
        };
        let mut m = init_models(dims, 3).unwrap();
        m.r.frozen = true;
        m.g.frozen = true;
        (m, build_vp_schedule(4, 0.1, 20.0).unwrap())
    }

    #[test]
    fn synthesize_shapes_labels_and_determinism() {
        let (m, sched) = frozen_models();
        let attrs = Array2::from_shape_fn((7, 5), |(i, j)| (i + j) as f64 * 0.1);
        let classes = [2u32, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s1 = synthesize(&m.r, &m.g, &attrs, &classes, 3, 2, &sched, &mut rng).unwrap();
        assert_eq!(s1.features.dim(), (6, 6));
        assert_eq!(s1.representations.dim(), (6, 4));
        assert_eq!(s1.labels, vec![2, 2, 2, 5, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s2 = synthesize(&m.r, &m.g, &attrs, &classes, 3, 2, &sched, &mut rng).unwrap();
        assert_eq!(s1.features, s2.features);
    }

    #[test]
    fn synthesize_rejects_unfrozen_and_zero_count_is_empty() {
        let (mut m, sched) = frozen_models();
        let attrs = Array2::zeros((3, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = synthesize(&m.r, &m.g, &attrs, &[1], 0, 1, &sched, &mut rng).unwrap();
        assert_eq!(s.features.nrows(), 0);
        assert!(s.labels.is_empty());
        m.g.frozen = false;
        assert!(synthesize(&m.r, &m.g, &attrs, &[1], 2, 1, &sched, &mut rng).is_err());
    }

    #[test]
    fn synthesize_checks_t_te_and_class_range() {
        let (m, sched) = frozen_models();
        let attrs = Array2::zeros((3, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synthesize(&m.r, &m.g, &attrs, &[1], 2, 0, &sched, &mut rng).is_err());
        assert!(synthesize(&m.r, &m.g, &attrs, &[1], 2, 5, &sched, &mut rng).is_err());
        assert!(synthesize(&m.r, &m.g, &attrs, &[3], 2, 1, &sched, &mut rng).is_err());
    }

    #[test]
    fn harmonic_mean_matches_published_example() {
        // U = 74.7, S = 85.0 gives H = 79.5 to one decimal
        let h = harmonic_mean(85.0, 74.7);
        assert!((h - 79.5).abs() < 0.05, "h = {h}");
        assert_eq!(harmonic_mean(0.0, 50.0), 0.0);
        assert_eq!(harmonic_mean(60.0, 60.0), 60.0);
    }

    #[test]
    fn per_class_accuracy_macro_average_weights_classes_equally() {
        // class 0: 1 of 1 correct; class 1: 1 of 3 correct
        let preds = vec![0, 1, 0, 0];
        let labels = vec![0, 1, 1, 1];
        let pc = per_class_accuracy(&preds, &labels);
        assert_eq!(pc[&0], 100.0);
        assert!((pc[&1] - 100.0 / 3.0).abs() < 1e-12);
        let avg = macro_avg(&pc, &[0, 1]);
        assert!((avg - (100.0 + 100.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn classifier_separable_data_and_tie_break() {
        // trivially separable two-class problem
        let n = 40;
        let mut feats = Array2::zeros((n, 2));
        let mut labels = Vec::new();
        for i in 0..n {
            let c = (i % 2) as u32;
            feats[[i, c as usize]] = 1.0;
            labels.push(c + 10); // global ids 10 and 11
        }
        let reps = Array2::zeros((n, 1));
        let config = TrainConfig { n_te: 300, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cls = train_classifier(&feats, &reps, &labels, &[10, 11], &config, &mut rng).unwrap();
        let preds = cls.predict(&feats, &reps).unwrap();
        assert_eq!(preds, labels);
        // exact tie on identical logits resolves to the lowest column
        let tie = Classifier {
            mlp: {
                let mut m = Mlp::init(&[3, 2], vec![Activation::Identity], &mut rng).unwrap();
                for l in &mut m.layers {
                    l.w.fill(0.0);
                    l.b.fill(0.0);
                }
                m
            },
            classes: vec![10, 11],
        };
        let p = tie.predict(&feats.slice(ndarray::s![..2, ..]).to_owned(), &reps.slice(ndarray::s![..2, ..]).to_owned()).unwrap();
        assert_eq!(p, vec![10, 10]);
    }

    #[test]
    fn classifier_rejects_unknown_label_and_empty() {
        let feats = Array2::zeros((2, 2));
        let reps = Array2::zeros((2, 1));
        let config = TrainConfig { n_te: 1, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(train_classifier(&feats, &reps, &[0, 7], &[0, 1], &config, &mut rng).is_err());
        let empty = Array2::zeros((0, 2));
        let empty_r = Array2::zeros((0, 1));
        assert!(train_classifier(&empty, &empty_r, &[], &[0], &config, &mut rng).is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let c1 = TrainConfig::default();
        let mut c2 = TrainConfig::default();
        assert_eq!(config_hash(&c1), config_hash(&c2));
        assert_eq!(config_hash(&c1).len(), 64);
        c2.seed += 1;
        assert_ne!(config_hash(&c1), config_hash(&c2));
    }

    #[test]
    fn report_json_and_csv_round_trip() {
        let report = MetricsReport {
            t1_zsl: Some(61.25),
            u: Some(50.0),
            s: Some(70.0),
            h: Some(harmonic_mean(70.0, 50.0)),
            per_class: BTreeMap::from([(0, 100.0), (3, 50.0)]),
            config_hash: "abc".into(),
        };
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        let row = report.csv_row();
        assert!(row.starts_with("61.2500,50.0000,70.0000,"));
        assert!(row.ends_with(",abc"));
    }

    #[test]
    fn oracle_classifier_evaluation_on_noiseless_bundle() {
        // with sigma = 0 the pass-through pipeline is perfectly separable,
        // so feeding real unseen features as the "synthetic" set must give
        // 100% everywhere
        let synth_cfg = SynthConfig { sigma: 0.0, samples_per_class: 20, ..SynthConfig::default() };
        let bundle = generate_synthetic(&synth_cfg).unwrap();
        let config = TrainConfig { n_te: 400, ..TrainConfig::default() };
        let extractors = crate::extractors::finetune(&bundle, &config, 1).unwrap();
        let (v, r) = extractors.extract_all(&bundle).unwrap();
        let idx = bundle.indices_with_split(SplitTag::TestUnseen);
        let synth = SynthesizedSet {
            features: v.select(Axis(0), &idx),
            representations: r.select(Axis(0), &idx),
            labels: idx.iter().map(|&i| bundle.labels[i]).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let report =
            evaluate_with_synth(&bundle, &extractors, &synth, &config, &mut rng).unwrap();
        assert!(report.t1_zsl.unwrap() > 95.0, "t1 = {:?}", report.t1_zsl);
        assert!(report.h.unwrap() > 90.0, "h = {:?}", report.h);
    }
}
