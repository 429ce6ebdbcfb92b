//! Checkpoint directories: a manifest.json describing every serialized
//! network (layer dims, activations, blob file) plus one lossless f64 blob
//! per network, the config snapshot and any optimizer/rng state the stage
//! needs for inspection or resume.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::extractors::ExtractorPair;
use crate::io::{read_f64s, read_json, write_f64s, write_json};
use crate::networks::{Critic, CriticKind, Generator, ModelDims, ModelSet, RepGenerator};
use crate::nn::{Activation, Mlp};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpSpec {
    dims: Vec<usize>,
    acts: Vec<Activation>,
    blob: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    mlps: BTreeMap<String, MlpSpec>,
    meta: BTreeMap<String, serde_json::Value>,
}

pub struct CheckpointWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl CheckpointWriter {
    pub fn create(dir: &Path, kind: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                kind: kind.to_string(),
                mlps: BTreeMap::new(),
                meta: BTreeMap::new(),
            },
        })
    }

    pub fn add_mlp(&mut self, name: &str, mlp: &Mlp) -> Result<()> {
        let mut dims = vec![mlp.in_dim()];
        dims.extend(mlp.layers.iter().map(|l| l.w.ncols()));
        let blob = format!("{name}.f64");
        let mut flat = Vec::new();
        mlp.to_flat(&mut flat);
        write_f64s(&self.dir.join(&blob), &flat)?;
        self.manifest
            .mlps
            .insert(name.to_string(), MlpSpec { dims, acts: mlp.acts.clone(), blob });
        Ok(())
    }

    pub fn add_meta<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.manifest.meta.insert(name.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        write_json(&self.dir.join("manifest.json"), &self.manifest)
    }
}

pub struct CheckpointReader {
    dir: PathBuf,
    manifest: Manifest,
}

impl CheckpointReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn kind(&self) -> &str {
        &self.manifest.kind
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind == kind {
            Ok(())
        } else {
            Err(Error::malformed(
                self.dir.display().to_string(),
                format!("checkpoint kind is `{}`, expected `{kind}`", self.manifest.kind),
            ))
        }
    }

    pub fn mlp(&self, name: &str) -> Result<Mlp> {
        let spec = self.manifest.mlps.get(name).ok_or_else(|| {
            Error::malformed(self.dir.display().to_string(), format!("missing network `{name}`"))
        })?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::init(&spec.dims, spec.acts.clone(), &mut rng)?;
        let flat = read_f64s(&self.dir.join(&spec.blob))?;
        if flat.len() != mlp.param_count() {
            return Err(Error::malformed(
                self.dir.display().to_string(),
                format!(
                    "network `{name}` blob holds {} params, manifest implies {}",
                    flat.len(),
                    mlp.param_count()
                ),
            ));
        }
        mlp.from_flat(&flat);
        Ok(mlp)
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        let v = self.manifest.meta.get(name).ok_or_else(|| {
            Error::malformed(self.dir.display().to_string(), format!("missing meta `{name}`"))
        })?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

use rand::SeedableRng;

pub fn save_extractors(dir: &Path, pair: &ExtractorPair, config: &TrainConfig) -> Result<()> {
    let mut w = CheckpointWriter::create(dir, "extractors")?;
    if !pair.passthrough {
        w.add_mlp("f_ce", &pair.f_ce)?;
        w.add_mlp("cls", &pair.cls)?;
        w.add_mlp("f_sc", &pair.f_sc)?;
        w.add_mlp("proj", &pair.proj)?;
    }
    w.add_meta("frozen", &pair.frozen)?;
    w.add_meta("passthrough", &pair.passthrough)?;
    w.add_meta("config", config)?;
    w.finish()
}

pub fn load_extractors(dir: &Path) -> Result<(ExtractorPair, TrainConfig)> {
    let r = CheckpointReader::open(dir)?;
    r.expect_kind("extractors")?;
    let passthrough: bool = r.meta("passthrough")?;
    let config: TrainConfig = r.meta("config")?;
    let pair = if passthrough {
        ExtractorPair::passthrough()
    } else {
        ExtractorPair {
            f_ce: r.mlp("f_ce")?,
            cls: r.mlp("cls")?,
            f_sc: r.mlp("f_sc")?,
            proj: r.mlp("proj")?,
            frozen: r.meta("frozen")?,
            passthrough: false,
        }
    };
    Ok((pair, config))
}

pub fn save_models(dir: &Path, models: &ModelSet, config: &TrainConfig) -> Result<()> {
    let mut w = CheckpointWriter::create(dir, "models")?;
    w.add_mlp("g", &models.g.mlp)?;
    w.add_mlp("r", &models.r.mlp)?;
    w.add_mlp("d_adv", &models.d_adv.mlp)?;
    w.add_mlp("d_diff", &models.d_diff.mlp)?;
    w.add_mlp("d_rep", &models.d_rep.mlp)?;
    w.add_mlp("d_adv_prime", &models.d_adv_prime.mlp)?;
    w.add_mlp("d_diff_prime", &models.d_diff_prime.mlp)?;
    w.add_meta("dims", &models.g.dims)?;
    w.add_meta("g_frozen", &models.g.frozen)?;
    w.add_meta("r_frozen", &models.r.frozen)?;
    w.add_meta("config", config)?;
    w.finish()
}

pub fn load_models(dir: &Path) -> Result<(ModelSet, TrainConfig)> {
    let r = CheckpointReader::open(dir)?;
    r.expect_kind("models")?;
    let dims: ModelDims = r.meta("dims")?;
    let config: TrainConfig = r.meta("config")?;
    let critic = |name: &str, kind: CriticKind| -> Result<Critic> {
        Ok(Critic { kind, mlp: r.mlp(name)?, dims })
    };
    let models = ModelSet {
        g: Generator { mlp: r.mlp("g")?, dims, frozen: r.meta("g_frozen")? },
        r: RepGenerator { mlp: r.mlp("r")?, dims, frozen: r.meta("r_frozen")? },
        d_adv: critic("d_adv", CriticKind::Adv)?,
        d_diff: critic("d_diff", CriticKind::Diff)?,
        d_rep: critic("d_rep", CriticKind::Rep)?,
        d_adv_prime: critic("d_adv_prime", CriticKind::AdvPrime)?,
        d_diff_prime: critic("d_diff_prime", CriticKind::DiffPrime)?,
    };
    Ok((models, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{generate_synthetic, SynthConfig};
    use crate::extractors::finetune;
    use crate::networks::init_models;

    #[test]
    fn model_checkpoint_round_trip_is_exact() {
        let dims = ModelDims {
            d_a: 5,
            d_v: 6,
            d_r: 4,
            d_z: 3,
            hidden: 8,
            t_embed: 4,
            t_max: 4,
        };
        let mut models = init_models(dims, 17).unwrap();
        models.r.frozen = true;
        let config = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        save_models(dir.path(), &models, &config).unwrap();
        let (back, cfg) = load_models(dir.path()).unwrap();
        assert_eq!(back, models);
        assert_eq!(cfg, config);
    }

    #[test]
    fn extractor_checkpoint_round_trip_is_exact() {
        let synth = SynthConfig { samples_per_class: 10, ..SynthConfig::default() };
        let bundle = generate_synthetic(&synth).unwrap();
        let config = TrainConfig {
            n_ft: 20,
            extractor_hidden: 16,
            d_v: 6,
            d_r: 4,
            ..TrainConfig::default()
        };
        let pair = finetune(&bundle, &config, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_extractors(dir.path(), &pair, &config).unwrap();
        let (back, cfg) = load_extractors(dir.path()).unwrap();
        assert_eq!(back.f_ce, pair.f_ce);
        assert_eq!(back.proj, pair.proj);
        assert!(back.frozen);
        assert!(!back.passthrough);
        assert_eq!(cfg.n_ft, 20);
    }

    #[test]
    fn wrong_kind_and_missing_network_are_rejected() {
        let dims = ModelDims {
            d_a: 2,
            d_v: 3,
            d_r: 2,
            d_z: 2,
            hidden: 4,
            t_embed: 4,
            t_max: 4,
        };
        let models = init_models(dims, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_models(dir.path(), &models, &TrainConfig::default()).unwrap();
        assert!(load_extractors(dir.path()).is_err());
        let r = CheckpointReader::open(dir.path()).unwrap();
        assert!(r.mlp("nope").is_err());
        assert!(CheckpointReader::open(&dir.path().join("missing")).is_err());
    }
}
