use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::{MineConfig, ProbeConfig};
use crate::inversion::InversionConfig;
use crate::modelzoo::zoo::EncoderSpec;
use crate::rng::{self, purpose};
use crate::trainer::TrainConfig;
use crate::viewgen::{PerturbConfig, WSearchConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
}

/// Which latent-space generator `gen-views` runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratedSource {
    #[default]
    WPerturb,
    WSearch,
}

impl GeneratedSource {
    pub fn tag(self) -> &'static str {
        match self {
            GeneratedSource::WPerturb => "w_perturb",
            GeneratedSource::WSearch => "w_search",
        }
    }
}

/// Where the W-search radii come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// Use `search.epsilon1` and `search.epsilon2` as given.
    #[default]
    Off,
    /// Mean embedding distance between anchors and expert views under the encoder.
    Embedding,
    /// Mean latent distance between the inversions of anchors and of their expert views.
    Latent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewgenConfig {
    pub source: GeneratedSource,
    pub perturb: PerturbConfig,
    pub search: WSearchConfig,
    pub calibrate: Calibration,
    pub calibration_images: usize,
}

impl Default for ViewgenConfig {
    fn default() -> Self {
        ViewgenConfig {
            source: GeneratedSource::WPerturb,
            perturb: PerturbConfig::default(),
            search: WSearchConfig::default(),
            calibrate: Calibration::Off,
            calibration_images: 200,
        }
    }
}

/// Representation the MI estimator sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiSpace {
    /// Unit embeddings of the pretrained encoder.
    #[default]
    Embedding,
    /// Average-pooled pixels.
    Pixels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub mine: MineConfig,
    pub mi_space: MiSpace,
    /// Pooling window for [`MiSpace::Pixels`].
    pub mi_pixel_pool: usize,
    pub mi_max_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            probe: ProbeConfig::default(),
            mine: MineConfig::default(),
            mi_space: MiSpace::Embedding,
            mi_pixel_pool: 4,
            mi_max_pairs: 4000,
        }
    }
}

/// One JSON document describing a whole experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub viewgen: ViewgenConfig,
    pub inversion: InversionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Run seed. Section-level `seed` fields must be omitted or equal to it.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            viewgen: ViewgenConfig::default(),
            inversion: InversionConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Initialisation seeds of the trainable networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSeeds {
    pub encoder: u64,
    pub inverter: u64,
    pub discriminator: u64,
    pub perceptual: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Copies the run seed into every section and validates the result.
    pub fn resolved(mut self) -> Result<Self> {
        let seed = self.seed;
        for (name, s) in [
            ("train", &mut self.train.seed),
            ("inversion", &mut self.inversion.seed),
            ("eval.probe", &mut self.eval.probe.seed),
            ("eval.mine", &mut self.eval.mine.seed),
        ] {
            if *s != 0 && *s != seed {
                return Err(Error::config(format!(
                    "{name}.seed is {} but the run seed is {seed}; set only the top-level seed",
                    *s
                )));
            }
            *s = seed;
        }
        self.validate()?;
        Ok(self)
    }

    /// Replaces the run seed everywhere.
    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.train.seed = 0;
        self.inversion.seed = 0;
        self.eval.probe.seed = 0;
        self.eval.mine.seed = 0;
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.inversion.validate()?;
        self.viewgen.perturb.validate()?;
        self.viewgen.search.validate()?;
        self.train.validate()?;
        self.eval.probe.validate()?;
        if self.eval.mi_pixel_pool == 0 {
            return Err(Error::config("eval.mi_pixel_pool must be at least 1"));
        }
        if let Some(tag) = self.train.view_source.cache_tag() {
            if tag != self.viewgen.source.tag() {
                return Err(Error::config(format!(
                    "train.view_source wants {tag} views but viewgen.source is {}",
                    self.viewgen.source.tag()
                )));
            }
        }
        Ok(())
    }

    pub fn model_seeds(&self) -> ModelSeeds {
        let s = |k: u64| rng::mix(&[self.seed, purpose::INIT, k]);
        ModelSeeds {
            encoder: s(0),
            inverter: s(1),
            discriminator: s(2),
            perceptual: s(3),
        }
    }

    /// The configuration as a JSON value with sorted keys.
    pub fn to_value(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// SHA-256 of the canonical JSON of everything except `output_dir`.
    pub fn hash(&self) -> Result<String> {
        let mut v = self.to_value()?;
        if let Value::Object(map) = &mut v {
            map.remove("output_dir");
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }

    /// Sets the field at a dotted `path` (e.g. `viewgen.perturb.sigma`).
    ///
    /// The path must name an existing field and the result must still parse.
    pub fn set_path(&self, path: &str, value: Value) -> Result<Self> {
        self.set_paths(&[(path.to_string(), value)])
    }

    /// Applies several assignments together and validates only the result.
    pub fn set_paths(&self, assignments: &[(String, Value)]) -> Result<Self> {
        let mut root = self.to_value()?;
        for (path, value) in assignments {
            let mut node = &mut root;
            for key in path.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| Error::config(format!("unknown config path {path}")))?;
            }
            *node = value.clone();
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(root).map_err(|e| Error::config(format!("invalid override: {e}")))?;
        if assignments.iter().any(|(p, _)| p == "seed") {
            let seed = cfg.seed;
            return cfg.with_seed(seed);
        }
        cfg.resolved()
    }

    /// Applies `path=value` overrides, where each value is JSON or else a bare string.
    pub fn apply_overrides(&self, specs: &[String]) -> Result<Self> {
        let assignments = specs
            .iter()
            .map(|spec| {
                let (path, raw) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("override {spec} is not of the form path=value")))?;
                let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
                Ok((path.trim().to_string(), value))
            })
            .collect::<Result<Vec<_>>>()?;
        if assignments.is_empty() {
            return Ok(self.clone());
        }
        self.set_paths(&assignments)
    }
}
