//! Dataset model: seen/unseen splits, synthetic attribute-conditioned data
//! generation, bundle directory I/O and the limited-training-data protocol.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    TrainSeen,
    TestSeen,
    TestUnseen,
}

impl SplitTag {
    fn to_u8(self) -> u8 {
        match self {
            SplitTag::TrainSeen => 0,
            SplitTag::TestSeen => 1,
            SplitTag::TestUnseen => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(SplitTag::TrainSeen),
            1 => Ok(SplitTag::TestSeen),
            2 => Ok(SplitTag::TestUnseen),
            other => Err(Error::InvalidInput(format!("unknown split tag {other}"))),
        }
    }
}

/// Configuration for the synthetic attribute-conditioned dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub c_seen: usize,
    pub c_unseen: usize,
    pub d_a: usize,
    pub d_x: usize,
    pub samples_per_class: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            c_seen: 15,
            c_unseen: 5,
            d_a: 16,
            d_x: 64,
            samples_per_class: 100,
            sigma: 0.3,
            seed: 7,
        }
    }
}

/// A dataset with class attributes and a seen/unseen split.
///
/// Either `raw` is present (raw mode, the extractor stage runs) or `features`
/// plus `representations` are present (precomputed mode, extractors are
/// pass-through).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub raw: Option<Array2<f64>>,
    pub features: Option<Array2<f64>>,
    pub representations: Option<Array2<f64>>,
    pub labels: Vec<u32>,
    pub attributes: Array2<f64>,
    pub seen_classes: Vec<u32>,
    pub unseen_classes: Vec<u32>,
    pub split: Vec<SplitTag>,
    pub seed: u64,
}

impl DatasetBundle {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.attributes.nrows()
    }

    pub fn is_precomputed(&self) -> bool {
        self.raw.is_none()
    }

    pub fn indices_with_split(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.n_samples()).filter(|&i| self.split[i] == tag).collect()
    }

    /// Check all structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.split.len() != n {
            return Err(Error::DimMismatch(format!(
                "{} labels but {} split tags",
                n,
                self.split.len()
            )));
        }
        for m in [&self.raw, &self.features, &self.representations].into_iter().flatten() {
            if m.nrows() != n {
                return Err(Error::DimMismatch(format!(
                    "matrix has {} rows for {} samples",
                    m.nrows(),
                    n
                )));
            }
        }
        if self.raw.is_none() && (self.features.is_none() || self.representations.is_none()) {
            return Err(Error::InvalidInput(
                "bundle needs raw vectors or precomputed features+representations".into(),
            ));
        }
        if !self.attributes.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("attributes contain non-finite values".into()));
        }
        if self.seen_classes.iter().any(|c| self.unseen_classes.contains(c)) {
            return Err(Error::InvalidInput("seen and unseen class sets overlap".into()));
        }
        let c = self.attributes.nrows() as u32;
        for (i, (&y, &tag)) in self.labels.iter().zip(&self.split).enumerate() {
            if y >= c {
                return Err(Error::InvalidInput(format!("label {y} of sample {i} has no attribute row")));
            }
            let ok = match tag {
                SplitTag::TrainSeen | SplitTag::TestSeen => self.seen_classes.contains(&y),
                SplitTag::TestUnseen => self.unseen_classes.contains(&y),
            };
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "sample {i} with label {y} is tagged {tag:?} but the label is in the wrong class set"
                )));
            }
        }
        Ok(())
    }
}

fn quantize_f32(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| v as f32 as f64);
}

/// Generate a synthetic attribute-conditioned dataset: class attributes drawn
/// from U(0,1)^{d_a}, class prototypes p_c = M a_c for a fixed random linear
/// map M, samples x = p_c + sigma * eps. Deterministic given the config seed.
pub fn generate_synthetic(config: &SynthConfig) -> Result<DatasetBundle> {
    if config.c_unseen == 0 {
        return Err(Error::Config("c_unseen must be positive".into()));
    }
    if config.c_seen == 0 || config.d_a == 0 || config.d_x == 0 || config.samples_per_class == 0 {
        return Err(Error::Config("c_seen, d_a, d_x, samples_per_class must be positive".into()));
    }
    if config.sigma < 0.0 {
        return Err(Error::Config("sigma must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c_total = config.c_seen + config.c_unseen;

    let mut attributes =
        Array2::from_shape_simple_fn((c_total, config.d_a), || rng.gen_range(0.0..1.0));
    quantize_f32(&mut attributes);

    // fixed attribute-to-prototype map, drawn once from the seed
    let scale = (2.0 / config.d_a as f64).sqrt();
    let map = Array2::from_shape_simple_fn((config.d_a, config.d_x), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    });
    let prototypes = attributes.dot(&map);

    let n = c_total * config.samples_per_class;
    let mut raw = Array2::zeros((n, config.d_x));
    let mut labels = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    let n_train = (config.samples_per_class as f64 * 0.8).round() as usize;
    for c in 0..c_total {
        for k in 0..config.samples_per_class {
            let i = c * config.samples_per_class + k;
            let proto = prototypes.row(c);
            for (j, p) in proto.iter().enumerate() {
                raw[[i, j]] = p + config.sigma * rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c as u32);
            split.push(if c < config.c_seen {
                if k < n_train {
                    SplitTag::TrainSeen
                } else {
                    SplitTag::TestSeen
                }
            } else {
                SplitTag::TestUnseen
            });
        }
    }
    quantize_f32(&mut raw);

    let bundle = DatasetBundle {
        raw: Some(raw),
        features: None,
        representations: None,
        labels,
        attributes,
        seen_classes: (0..config.c_seen as u32).collect(),
        unseen_classes: (config.c_seen as u32..c_total as u32).collect(),
        split,
        seed: config.seed,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleManifest {
    n_samples: usize,
    n_classes: usize,
    d_a: usize,
    d_x: Option<usize>,
    d_v: Option<usize>,
    d_r: Option<usize>,
    mode: String,
    seen_classes: Vec<u32>,
    unseen_classes: Vec<u32>,
    seed: u64,
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = BundleManifest {
        n_samples: bundle.n_samples(),
        n_classes: bundle.n_classes(),
        d_a: bundle.attributes.ncols(),
        d_x: bundle.raw.as_ref().map(|m| m.ncols()),
        d_v: bundle.features.as_ref().map(|m| m.ncols()),
        d_r: bundle.representations.as_ref().map(|m| m.ncols()),
        mode: if bundle.is_precomputed() { "precomputed".into() } else { "raw".into() },
        seen_classes: bundle.seen_classes.clone(),
        unseen_classes: bundle.unseen_classes.clone(),
        seed: bundle.seed,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    io::write_matrix(&dir.join("attributes.f32"), &bundle.attributes)?;
    if let Some(m) = &bundle.raw {
        io::write_matrix(&dir.join("raw.f32"), m)?;
    }
    if let Some(m) = &bundle.features {
        io::write_matrix(&dir.join("features.f32"), m)?;
    }
    if let Some(m) = &bundle.representations {
        io::write_matrix(&dir.join("representations.f32"), m)?;
    }
    io::write_u32s(&dir.join("labels.u32"), &bundle.labels)?;
    let split: Vec<u8> = bundle.split.iter().map(|s| s.to_u8()).collect();
    io::write_u8s(&dir.join("split.u8"), &split)
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::malformed(manifest_path.display().to_string(), "missing manifest"));
    }
    let manifest: BundleManifest = io::read_json(&manifest_path)?;
    let attributes = io::read_matrix(&dir.join("attributes.f32"))?;
    if attributes.dim() != (manifest.n_classes, manifest.d_a) {
        return Err(Error::malformed(
            dir.display().to_string(),
            format!(
                "manifest declares attributes {}x{} but file holds {}x{}",
                manifest.n_classes,
                manifest.d_a,
                attributes.nrows(),
                attributes.ncols()
            ),
        ));
    }
    let load_opt = |name: &str, dim: Option<usize>| -> Result<Option<Array2<f64>>> {
        match dim {
            None => Ok(None),
            Some(d) => {
                let m = io::read_matrix(&dir.join(name))?;
                if m.dim() != (manifest.n_samples, d) {
                    return Err(Error::malformed(
                        dir.display().to_string(),
                        format!("manifest declares {name} as {}x{d}, file holds {}x{}",
                            manifest.n_samples, m.nrows(), m.ncols()),
                    ));
                }
                Ok(Some(m))
            }
        }
    };
    let raw = load_opt("raw.f32", manifest.d_x)?;
    let features = load_opt("features.f32", manifest.d_v)?;
    let representations = load_opt("representations.f32", manifest.d_r)?;
    let labels = io::read_u32s(&dir.join("labels.u32"))?;
    let split_raw = io::read_u8s(&dir.join("split.u8"))?;
    if labels.len() != manifest.n_samples || split_raw.len() != manifest.n_samples {
        return Err(Error::malformed(
            dir.display().to_string(),
            "labels/split length disagrees with manifest",
        ));
    }
    let split: Result<Vec<SplitTag>> = split_raw.iter().map(|&v| SplitTag::from_u8(v)).collect();
    let bundle = DatasetBundle {
        raw,
        features,
        representations,
        labels,
        attributes,
        seen_classes: manifest.seen_classes,
        unseen_classes: manifest.unseen_classes,
        split: split?,
        seed: manifest.seed,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Per-class retention plan for the limited-training-data protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeepRatioPlan {
    pub ratio: f64,
    pub per_class_kept: BTreeMap<u32, Vec<usize>>,
    pub n_syn_scaled: usize,
}

/// Subsample train_seen per class, keeping ceil(ratio * n_c) samples (at least
/// one). Test splits are untouched; the synthesized-per-class count is scaled
/// proportionally.
pub fn apply_keep_ratio<R: Rng>(
    bundle: &DatasetBundle,
    ratio: f64,
    n_syn: usize,
    rng: &mut R,
) -> Result<(DatasetBundle, KeepRatioPlan)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("keep ratio must be in (0,1], got {ratio}")));
    }
    let mut per_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in bundle.indices_with_split(SplitTag::TrainSeen) {
        per_class.entry(bundle.labels[i]).or_default().push(i);
    }
    let mut kept_plan = BTreeMap::new();
    let mut keep = vec![true; bundle.n_samples()];
    for (class, indices) in &per_class {
        let n_keep = ((ratio * indices.len() as f64).ceil() as usize).max(1);
        let mut shuffled = indices.clone();
        shuffled.shuffle(rng);
        shuffled.truncate(n_keep);
        shuffled.sort_unstable();
        for &i in indices {
            if !shuffled.contains(&i) {
                keep[i] = false;
            }
        }
        kept_plan.insert(*class, shuffled);
    }
    let kept_rows: Vec<usize> = (0..bundle.n_samples()).filter(|&i| keep[i]).collect();
    let select = |m: &Option<Array2<f64>>| m.as_ref().map(|m| m.select(Axis(0), &kept_rows));
    let sub = DatasetBundle {
        raw: select(&bundle.raw),
        features: select(&bundle.features),
        representations: select(&bundle.representations),
        labels: kept_rows.iter().map(|&i| bundle.labels[i]).collect(),
        attributes: bundle.attributes.clone(),
        seen_classes: bundle.seen_classes.clone(),
        unseen_classes: bundle.unseen_classes.clone(),
        split: kept_rows.iter().map(|&i| bundle.split[i]).collect(),
        seed: bundle.seed,
    };
    sub.validate()?;
    let plan = KeepRatioPlan {
        ratio,
        per_class_kept: kept_plan,
        n_syn_scaled: (ratio * n_syn as f64).round() as usize,
    };
    Ok((sub, plan))
}
