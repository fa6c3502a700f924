//! TOML run specifications and the bundled scenario presets.
//!
//! A spec file has a `[scenario]` table (see [`ScenarioConfig`]), a
//! `[filter]` table (see [`FilterSpec`]) and an optional `[preprocess]`
//! table (see [`PreprocessConfig`]).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{white_noise_acceleration, ExistenceModel, ModeChain, MotionMode, Spread};
use crate::preprocess::PreprocessConfig;
use crate::scene_sim::ScenarioConfig;
use crate::tbd_filter::{BirthVelocity, FilterConfig, IntensityPrior};

/// Named presets compiled into the library.
pub const PRESETS: &[(&str, &str)] = &[
    ("scenario1", include_str!("../presets/scenario1.toml")),
    ("scenario2", include_str!("../presets/scenario2.toml")),
    ("scenario2b", include_str!("../presets/scenario2b.toml")),
    ("scenario3", include_str!("../presets/scenario3.toml")),
    ("scenario3b", include_str!("../presets/scenario3b.toml")),
    ("scenario4", include_str!("../presets/scenario4.toml")),
    ("scenario4b", include_str!("../presets/scenario4b.toml")),
    ("oracle-small", include_str!("../presets/oracle-small.toml")),
    (
        "oracle-neutral",
        include_str!("../presets/oracle-neutral.toml"),
    ),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    /// Per-axis acceleration variance of the white-noise acceleration model.
    #[serde(default)]
    pub accel_var: f64,
    /// rad/step; non-zero selects a coordinated turn.
    #[serde(default)]
    pub turn_rate: f64,
    #[serde(default)]
    pub intensity_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeChainSpec {
    pub tpm: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BirthVelocitySpec {
    Uniform { v_max: f64 },
    Discrete { values: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub n_continuing: usize,
    pub n_birth: usize,
    pub existence: ExistenceModel,
    pub modes: Vec<ModeSpec>,
    /// Required when more than one mode is given.
    #[serde(default)]
    pub mode_chain: Option<ModeChainSpec>,
    #[serde(default = "default_threshold")]
    pub detection_threshold: f64,
    /// Pixels below this value are excluded from the birth proposal; when
    /// absent every cell is eligible.
    #[serde(default)]
    pub birth_floor: Option<f64>,
    pub birth_velocity: BirthVelocitySpec,
    #[serde(default)]
    pub intensity: Option<IntensityPrior>,
    #[serde(default = "default_step")]
    pub step: f64,
    /// Overrides the scenario's target intensity in the measurement model.
    #[serde(default)]
    pub nominal_intensity: Option<f64>,
    /// Overrides the scenario's noise level in the measurement model.
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    /// Footprint assumed by the filter. Defaults to the scenario's target
    /// kind, or to a point when an inverse filter is configured.
    #[serde(default)]
    pub spread: Option<Spread>,
}

fn default_threshold() -> f64 {
    0.6
}

fn default_step() -> f64 {
    1.0
}

impl FilterSpec {
    /// Resolves the spec against a scenario. `noise_sigma` (from noise
    /// estimation) takes precedence over both the spec and the scenario.
    pub fn build(
        &self,
        scenario: &ScenarioConfig,
        preprocess: &PreprocessConfig,
        noise_sigma: Option<f64>,
    ) -> Result<FilterConfig> {
        let modes = self
            .modes
            .iter()
            .enumerate()
            .map(|(id, m)| {
                if !(m.accel_var >= 0.0) {
                    return Err(Error::config(
                        format!("filter.modes[{id}].accel_var"),
                        "must be >= 0",
                    ));
                }
                MotionMode::new(
                    id,
                    m.turn_rate,
                    white_noise_acceleration(m.accel_var, self.step),
                    m.intensity_sigma,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mode_chain = match &self.mode_chain {
            Some(spec) => ModeChain::new(spec.tpm.clone(), spec.initial.clone())?,
            None if modes.len() == 1 => ModeChain::single(),
            None => {
                return Err(Error::config(
                    "filter.mode_chain",
                    "required when more than one mode is configured",
                ))
            }
        };
        let mut sensor = scenario.sensor();
        if let Some(spread) = &self.spread {
            sensor.spread = spread.clone();
        } else if preprocess.psf.is_some() {
            sensor.spread = Spread::Point;
        }
        if let Some(i) = self.nominal_intensity {
            sensor.nominal_intensity = i;
        }
        if let Some(s) = noise_sigma.or(self.noise_sigma) {
            sensor.noise_sigma = s;
        }
        let config = FilterConfig {
            n_continuing: self.n_continuing,
            n_birth: self.n_birth,
            existence: self.existence,
            mode_chain,
            modes,
            sensor,
            step: self.step,
            detection_threshold: self.detection_threshold,
            birth_proposal_floor: self.birth_floor.unwrap_or(f64::NEG_INFINITY),
            birth_velocity: match &self.birth_velocity {
                BirthVelocitySpec::Uniform { v_max } => BirthVelocity::Uniform { v_max: *v_max },
                BirthVelocitySpec::Discrete { values } => BirthVelocity::Discrete(values.clone()),
            },
            intensity: self.intensity,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Everything needed to simulate and track one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub scenario: ScenarioConfig,
    pub filter: FilterSpec,
    #[serde(default = "no_preprocessing")]
    pub preprocess: PreprocessConfig,
}

/// Identity conditioning, used when a spec has no `[preprocess]` table.
pub fn no_preprocessing() -> PreprocessConfig {
    PreprocessConfig {
        clamp: false,
        ..PreprocessConfig::default()
    }
}

/// A `[filter]` / `[preprocess]` override file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterOverride {
    pub filter: FilterSpec,
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
}

impl RunSpec {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let spec: RunSpec = toml::from_str(text).map_err(|source| Error::Toml {
            origin: origin.to_string(),
            source,
        })?;
        spec.scenario.validate()?;
        spec.filter.existence.validate()?;
        Ok(spec)
    }

    /// Loads a preset by name, or else a spec file whose relative background
    /// paths resolve against its own directory.
    pub fn load(arg: &str) -> Result<Self> {
        if let Some(text) = preset(arg) {
            return Self::parse(text, &format!("preset {arg}"));
        }
        let path = Path::new(arg);
        if !path.exists() {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
            return Err(Error::Usage(format!(
                "{arg:?} is neither a file nor a preset ({})",
                names.join(", ")
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::parse(&text, &path.display().to_string())?;
        spec.scenario.base_dir = path.parent().map(Path::to_path_buf);
        Ok(spec)
    }

    /// Replaces the filter (and preprocessing, if given) from an override file.
    pub fn apply_override(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let o: FilterOverride = toml::from_str(&text).map_err(|source| Error::Toml {
            origin: path.display().to_string(),
            source,
        })?;
        self.filter = o.filter;
        if let Some(p) = o.preprocess {
            self.preprocess = p;
        }
        Ok(())
    }

    pub fn filter_config(&self, noise_sigma: Option<f64>) -> Result<FilterConfig> {
        self.filter
            .build(&self.scenario, &self.preprocess, noise_sigma)
    }
}
