//! Experiment configuration: dataset source, named hyperparameter profiles
//! and the fully resolved run settings.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, CgmConfig, CsvSchema, DataError, Dataset, DatasetManifest};
use crate::model::{PriorConfig, Variant};
use crate::nuts::NutsConfig;
use crate::rjsampler::{MoveProbs, SamplerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("{field}: {message}")]
    Field { field: &'static str, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field, message: message.into() }
}

/// Tuned hyperparameters for one dataset and method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub h_init: f64,
    pub h_final: f64,
    pub alpha_split: f64,
    pub beta_split: f64,
}

pub const PROFILE_NAMES: [&str; 5] = ["cgm", "iris", "wisconsin", "wine", "raisin"];

/// Published settings per dataset for each method.
pub fn profile(name: &str, method: Variant) -> Option<Profile> {
    let p = |h_init, h_final, alpha_split, beta_split| Some(Profile { h_init, h_final, alpha_split, beta_split });
    match (name, method) {
        ("iris", Variant::Df) => p(0.01, 0.01, 0.45, 1.0),
        ("wisconsin", Variant::Df) => p(0.025, 0.025, 0.45, 2.5),
        ("cgm", Variant::Df) => p(0.001, 0.001, 0.45, 2.5),
        ("wine", Variant::Df) => p(0.025, 0.025, 0.45, 2.0),
        ("raisin", Variant::Df) => p(0.005, 0.001, 0.45, 2.0),
        ("iris", Variant::Dfi) => p(0.01, 0.01, 0.7, 1.0),
        ("wisconsin", Variant::Dfi) => p(0.1, 0.025, 0.95, 2.0),
        ("cgm", Variant::Dfi) => p(0.01, 0.001, 0.45, 2.5),
        ("wine", Variant::Dfi) => p(0.025, 0.025, 0.7, 1.5),
        ("raisin", Variant::Dfi) => p(0.05, 0.001, 0.7, 2.5),
        _ => None,
    }
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    SynthCgm {
        #[serde(flatten)]
        cgm: CgmConfig,
    },
    Csv {
        train: PathBuf,
        /// Separate test file; when absent the training file is split.
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(flatten)]
        schema: CsvSchema,
    },
}

fn default_train_fraction() -> f64 {
    0.7
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::SynthCgm { cgm: CgmConfig::default() }
    }
}

/// Training and test data with their manifests.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
    pub manifests: Vec<DatasetManifest>,
}

impl DataSource {
    /// Load or generate the data; `seed` drives generation and splitting.
    /// Relative paths are taken from `base`.
    pub fn load(&self, seed: u64, base: &Path) -> Result<LoadedData, ConfigError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            DataSource::SynthCgm { cgm } => {
                let (train, test) = data::synth_cgm(cgm, &mut rng)?;
                let manifests = vec![train.manifest("synth-cgm:train", Some(seed)), test.manifest("synth-cgm:test", Some(seed))];
                Ok(LoadedData { train, test, manifests })
            }
            DataSource::Csv { train, test, train_fraction, schema } => {
                let train_path = base.join(train);
                let full = data::load_csv(&train_path, schema)?;
                let (tr, te, split_seed) = match test {
                    Some(t) => {
                        let te = data::load_csv(&base.join(t), schema)?;
                        let te = data::align_to_train(&full, &te)?;
                        (full, te, None)
                    }
                    None => {
                        let (a, b) = data::split(&full, *train_fraction, &mut rng)?;
                        (a, b, Some(seed))
                    }
                };
                let name = train_path.display().to_string();
                let manifests = vec![tr.manifest(format!("{name}:train"), split_seed), te.manifest(format!("{name}:test"), split_seed)];
                Ok(LoadedData { train: tr, test: te, manifests })
            }
        }
    }
}

/// Optional prior overrides; unset fields follow the profile and defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_split: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_split: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_var: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_shape: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_scale: Option<f64>,
}

/// A configuration file; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub method: Option<Variant>,
    pub profile: Option<String>,
    pub data: Option<DataSource>,
    pub data_seed: Option<u64>,
    pub iterations: Option<usize>,
    pub burnin: Option<usize>,
    pub k: Option<usize>,
    pub warmup: Option<usize>,
    pub moves: Option<MoveProbs>,
    pub burnin_moves: Option<MoveProbs>,
    pub h_init: Option<f64>,
    pub h_final: Option<f64>,
    pub prior: Option<PriorOverrides>,
    pub nuts: Option<NutsConfig>,
    pub max_internal: Option<usize>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })
    }
}

/// Fully resolved run settings. Serializing this and reading it back as a
/// [`ConfigFile`] reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Variant,
    pub profile: String,
    pub data: DataSource,
    pub data_seed: u64,
    pub iterations: usize,
    pub burnin: usize,
    pub k: usize,
    pub warmup: usize,
    pub moves: MoveProbs,
    pub burnin_moves: Option<MoveProbs>,
    pub h_init: f64,
    pub h_final: f64,
    pub prior: PriorOverrides,
    pub nuts: NutsConfig,
    pub max_internal: Option<usize>,
    pub restarts: usize,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
}

pub const DEFAULT_K: usize = 1;
pub const DEFAULT_WARMUP: usize = 100;

impl RunConfig {
    /// Fill unset fields from the named profile and library defaults.
    pub fn resolve(file: ConfigFile) -> Result<Self, ConfigError> {
        let method = file.method.unwrap_or(Variant::Df);
        let profile_name = file.profile.unwrap_or_else(|| "cgm".to_string());
        let prof = profile(&profile_name, method)
            .ok_or_else(|| field("profile", format!("unknown profile {profile_name:?}; expected one of {PROFILE_NAMES:?}")))?;
        let seed = file.seed.unwrap_or(0);
        let mut prior = file.prior.unwrap_or_default();
        prior.alpha_split.get_or_insert(prof.alpha_split);
        prior.beta_split.get_or_insert(prof.beta_split);
        let cfg = RunConfig {
            method,
            profile: profile_name,
            data: file.data.unwrap_or_default(),
            data_seed: file.data_seed.unwrap_or(seed),
            iterations: file.iterations.unwrap_or(1000),
            burnin: file.burnin.unwrap_or(500),
            k: file.k.unwrap_or(DEFAULT_K),
            warmup: file.warmup.unwrap_or(DEFAULT_WARMUP),
            moves: file.moves.unwrap_or_default(),
            burnin_moves: file.burnin_moves,
            h_init: file.h_init.unwrap_or(prof.h_init),
            h_final: file.h_final.unwrap_or(prof.h_final),
            prior,
            nuts: file.nuts.unwrap_or_default(),
            max_internal: file.max_internal,
            restarts: file.restarts.unwrap_or(10),
            seed,
            jobs: file.jobs.unwrap_or(1),
            out: file.out.unwrap_or_else(|| PathBuf::from("out")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iterations == 0 {
            return Err(field("iterations", "must be at least 1"));
        }
        if self.burnin >= self.iterations {
            return Err(field("burnin", "must be smaller than iterations"));
        }
        if self.restarts == 0 {
            return Err(field("restarts", "must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(field("jobs", "must be at least 1"));
        }
        self.sampler().validate().map_err(|e| field("sampler", e.to_string()))
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            variant: self.method,
            moves: self.moves,
            burnin_moves: self.burnin_moves,
            k: self.k,
            n_burnin: self.burnin,
            h_init: self.h_init,
            h_final: self.h_final,
            warmup: self.warmup,
            nuts: self.nuts.clone(),
            max_internal: self.max_internal,
            prior_only: false,
        }
    }

    /// Prior for a dataset with `n_x` inputs and `n_classes` classes.
    pub fn prior_for(&self, n_x: usize, n_classes: usize) -> Result<PriorConfig<f64>, ConfigError> {
        let o = &self.prior;
        let mut p = PriorConfig::new(
            o.alpha_split.expect("resolved alpha_split"),
            o.beta_split.expect("resolved beta_split"),
            n_x,
            n_classes,
        );
        if let Some(a) = &o.class_alpha {
            if a.len() != n_classes {
                return Err(field("prior.class_alpha", format!("expected {n_classes} values, got {}", a.len())));
            }
            p.class_alpha = a.clone();
        }
        if let Some(v) = o.mu_mean {
            p.mu_mean = v;
        }
        if let Some(v) = o.mu_var {
            p.mu_var = v;
        }
        if let Some(v) = o.sigma_shape {
            p.sigma_shape = v;
        }
        if let Some(v) = o.sigma_scale {
            p.sigma_scale = v;
        }
        Ok(p)
    }

    /// Seed of restart `r`.
    pub fn chain_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cgm_defaults() {
        let cfg = RunConfig::resolve(ConfigFile::default()).unwrap();
        assert_eq!(cfg.method, Variant::Df);
        assert_eq!((cfg.h_init, cfg.h_final), (0.001, 0.001));
        assert_eq!(cfg.prior.alpha_split, Some(0.45));
        assert_eq!(cfg.prior.beta_split, Some(2.5));
        assert_eq!((cfg.iterations, cfg.burnin, cfg.restarts), (1000, 500, 10));
    }

    #[test]
    fn resolved_config_round_trips() {
        let file = ConfigFile { method: Some(Variant::Dfi), profile: Some("wisconsin".into()), ..Default::default() };
        let cfg = RunConfig::resolve(file).unwrap();
        assert_eq!((cfg.h_init, cfg.h_final), (0.1, 0.025));
        let text = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::resolve(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_fields() {
        let file = ConfigFile { iterations: Some(10), burnin: Some(10), ..Default::default() };
        assert!(matches!(RunConfig::resolve(file), Err(ConfigError::Field { field: "burnin", .. })));
        let file = ConfigFile { profile: Some("mnist".into()), ..Default::default() };
        assert!(matches!(RunConfig::resolve(file), Err(ConfigError::Field { field: "profile", .. })));
        assert!(serde_json::from_str::<ConfigFile>(r#"{"iters": 5}"#).is_err());
    }
}
