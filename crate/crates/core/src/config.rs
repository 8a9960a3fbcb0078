//! Run configuration: nested TOML over a scale profile's defaults.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptConfig;
use crate::error::{Error, Result};
use crate::inr::ModelConfig;
use crate::phantom::CohortSpec;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Usage(format!("unknown scale `{other}` (desk or paper)"))),
        }
    }
}

/// Held-out evaluation and atlas settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSettings {
    pub held_out: usize,
    pub sigma_weeks: f64,
    pub resolution_mm: f64,
    pub atlas_ages: Vec<f64>,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        EvaluationSettings {
            held_out: 8,
            sigma_weeks: 0.5,
            resolution_mm: 1.0,
            atlas_ages: vec![23.0, 26.5, 30.0, 33.5, 37.0],
        }
    }
}

/// Reduced cohort used by the multi-seed ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    pub count: usize,
    /// Training epochs of every ablation model.
    pub epochs: usize,
    pub held_out: usize,
    pub grid: usize,
    pub spacing: f64,
    pub max_rotation_deg: f64,
    pub birth_age_weeks: (f64, f64),
    pub birth_cohort_ages: (f64, f64),
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            seeds: vec![0, 1, 2, 3, 4],
            count: 24,
            epochs: 15,
            held_out: 4,
            grid: 32,
            spacing: 1.5,
            max_rotation_deg: 10.0,
            birth_age_weeks: (25.0, 37.0),
            birth_cohort_ages: (30.0, 38.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: Scale,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub cohort: CohortSpec,
    pub evaluation: EvaluationSettings,
    pub ablation: AblationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile(Scale::Desk)
    }
}

impl RunConfig {
    pub fn profile(scale: Scale) -> Self {
        let (model, train, adapt) = match scale {
            Scale::Desk => (ModelConfig::desk(), TrainConfig::desk(), AdaptConfig::desk()),
            Scale::Paper => (ModelConfig::paper(), TrainConfig::paper(), AdaptConfig::default()),
        };
        RunConfig {
            seed: 0,
            scale,
            out: PathBuf::from("out"),
            model,
            train,
            adapt,
            cohort: CohortSpec::default(),
            evaluation: EvaluationSettings::default(),
            ablation: AblationSettings::default(),
        }
    }

    /// Model configuration with one condition input per named condition.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            condition_dims: self.train.conditions.len(),
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Usage(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.model_config().validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        for c in &self.train.conditions {
            if !crate::phantom::CONDITION_NAMES.contains(&c.as_str()) {
                return Err(Error::Usage(format!(
                    "unknown condition `{c}` (known: {:?})",
                    crate::phantom::CONDITION_NAMES
                )));
            }
        }
        if !(self.evaluation.sigma_weeks > 0.0 && self.evaluation.resolution_mm > 0.0) {
            return Err(Error::Config("sigma_weeks and resolution_mm must be positive".into()));
        }
        if self.ablation.epochs == 0 {
            return Err(Error::Config("ablation epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses a TOML run configuration. Absent keys take the defaults of the
/// scale profile, chosen by `scale` or else the file's `scale` key.
pub fn parse_config(text: &str, scale: Option<Scale>) -> Result<RunConfig> {
    let user: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let file_scale = match user.get("scale") {
        Some(toml::Value::String(s)) => Some(s.parse()?),
        Some(other) => return Err(Error::Usage(format!("scale must be a string, got {other}"))),
        None => None,
    };
    let scale = scale.or(file_scale).unwrap_or_default();
    let mut base = match toml::Value::try_from(RunConfig::profile(scale)) {
        Ok(toml::Value::Table(t)) => t,
        _ => return Err(Error::Serialization("default profile is not a table".into())),
    };
    merge(&mut base, user);
    base.insert("scale".into(), toml::Value::try_from(scale).map_err(|e| Error::Serialization(e.to_string()))?);
    let cfg: RunConfig = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| {
        let msg = e.message().to_string();
        if msg.contains("unknown field") {
            Error::Usage(format!("unknown configuration key: {msg}"))
        } else {
            Error::Config(msg)
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}
