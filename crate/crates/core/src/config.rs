//! Run configuration: profile presets deep-merged with an optional JSON file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::NoiseSpec;
use crate::model::{EncoderConfig, ModelConfig, PrsmConfig};
use crate::signal::PreprocessConfig;
use crate::synth::CohortSpec;
use crate::train::{Profile, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub encoder: EncoderConfig,
    pub prsm: PrsmConfig,
    pub train: TrainConfig,
    pub cohort: CohortSpec,
    pub noise: NoiseSpec,
    pub preprocess: PreprocessConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Profile::Xw)
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn preset(profile: Profile) -> Self {
        RunConfig {
            profile,
            encoder: EncoderConfig::default(),
            prsm: PrsmConfig::default(),
            train: TrainConfig::preset(profile),
            cohort: CohortSpec::default(),
            noise: NoiseSpec::default(),
            preprocess: PreprocessConfig::default(),
            paths: Paths::default(),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            prsm: self.prsm.clone(),
        }
    }

    /// Preset for the chosen profile, then the file's explicit keys on top.
    ///
    /// The profile comes from `profile_override`, else the file's `profile`
    /// key, else `xw`.
    pub fn from_json_str(text: &str, profile_override: Option<Profile>) -> Result<Self> {
        let patch: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !patch.is_object() {
            return Err(Error::Config("config root must be a JSON object".into()));
        }
        let file_profile = match patch.get("profile") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Config("profile: expected a string".into()))?
                    .parse::<Profile>()
                    .map_err(|e| Error::Config(format!("profile: {e}")))?,
            ),
            None => None,
        };
        let profile = profile_override.or(file_profile).unwrap_or(Profile::Xw);
        let mut base = serde_json::to_value(RunConfig::preset(profile))?;
        merge_json(&mut base, patch);
        if let Some(p) = profile_override {
            base["profile"] = serde_json::to_value(p)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(base).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, profile_override: Option<Profile>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::preset(profile_override.unwrap_or(Profile::Xw))),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                RunConfig::from_json_str(&text, profile_override)
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the resolved configuration so a run can be replayed from it.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
