//! Experiment configuration, read from JSON with every field defaulted
//! except the seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adc::AdcParams;
use crate::error::{Error, Result};
use crate::lpm::LpmParams;
use crate::optimize::adam::LearningRates;
use crate::optimize::loss::LossSpec;
use crate::optimize::train::TrainSchedule;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub count: usize,
    /// Means are drawn from the cube `[-half_extent, half_extent]³`.
    pub half_extent: f64,
    pub scale_range: [f64; 2],
    pub opacity_range: [f64; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        // Half extent 2/√3 gives a box diagonal of 4.
        Self { count: 50, half_extent: 2.0 / 3f64.sqrt(), scale_range: [0.06, 0.18], opacity_range: [0.5, 1.0] }
    }
}

impl SceneSpec {
    pub fn diagonal(&self) -> f64 {
        2.0 * self.half_extent * 3f64.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub cameras: usize,
    pub radius: f64,
    /// Camera heights alternate between `+elevation` and `-elevation`.
    pub elevation: f64,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    /// Every `test_every`-th camera, starting at 0, is held out.
    pub test_every: usize,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self { cameras: 8, radius: 4.0, elevation: 0.8, focal: 64.0, width: 64, height: 64, test_every: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    At([f64; 3]),
    /// `fraction` of the way from camera `camera` to `target`.
    BetweenCamera { camera: usize, fraction: f64, target: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccluderSpec {
    pub placement: Placement,
    pub scale: f64,
    #[serde(default = "default_occluder_opacity")]
    pub opacity: f64,
    pub color: [f64; 3],
}

fn default_occluder_opacity() -> f64 {
    0.98
}

/// Ground-truth points inside this ball are left out of the initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exclusion {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSpec {
    pub fraction: f64,
    pub sigma: f64,
    pub opacity: f64,
    pub exclude: Vec<Exclusion>,
    pub occluders: Vec<OccluderSpec>,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { fraction: 0.2, sigma: 0.05, opacity: 0.5, exclude: Vec::new(), occluders: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManagerKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "adc")]
    Adc,
    #[serde(rename = "adc+lpm")]
    AdcLpm,
    /// ADC with the global threshold lowered to τ_local.
    #[serde(rename = "adc-low-tau")]
    AdcLowTau,
}

impl ManagerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Adc => "adc",
            Self::AdcLpm => "adc+lpm",
            Self::AdcLowTau => "adc-low-tau",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneSpec,
    #[serde(default)]
    pub rig: RigSpec,
    #[serde(default)]
    pub init: InitSpec,
    /// The run seed overrides the schedule's.
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub loss: LossSpec<f64>,
    #[serde(default)]
    pub rates: LearningRates<f64>,
    #[serde(default)]
    pub adc: AdcParams<f64>,
    #[serde(default)]
    pub lpm: LpmParams<f64>,
    #[serde(default = "default_manager")]
    pub manager: ManagerKind,
    /// Initialize from the ground truth itself, skipping degradation.
    #[serde(default)]
    pub init_from_gt: bool,
    #[serde(default)]
    pub output: Option<String>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_manager() -> ManagerKind {
    ManagerKind::Adc
}

impl ExperimentConfig {
    /// Defaults everywhere with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("default config")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule { seed: self.seed, ..self.schedule }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema version {}", self.schema_version));
        }
        let s = &self.scene;
        if s.count == 0 || !(s.half_extent > 0.0) {
            return bad("scene needs at least one point and a positive extent".into());
        }
        if !(s.scale_range[0] > 0.0 && s.scale_range[0] <= s.scale_range[1]) {
            return bad("scale range must be positive and ordered".into());
        }
        if !(s.opacity_range[0] > 0.0 && s.opacity_range[0] <= s.opacity_range[1] && s.opacity_range[1] <= 1.0) {
            return bad("opacity range must be ordered within (0,1]".into());
        }
        let r = &self.rig;
        if r.cameras < 2 || r.width == 0 || r.height == 0 || r.test_every == 0 {
            return bad("rig needs at least two cameras, a non-empty image and test_every >= 1".into());
        }
        if !(r.radius > 0.0 && r.focal > 0.0) {
            return bad("rig radius and focal length must be positive".into());
        }
        if (0..r.cameras).all(|i| i % r.test_every == 0) {
            return bad("split leaves no training views".into());
        }
        let i = &self.init;
        if !(i.fraction > 0.0 && i.fraction <= 1.0) || !(i.sigma >= 0.0) || !(i.opacity > 0.0 && i.opacity < 1.0) {
            return bad("init needs fraction in (0,1], sigma >= 0 and opacity in (0,1)".into());
        }
        for o in &i.occluders {
            if !(o.scale > 0.0 && o.opacity > 0.0 && o.opacity <= 1.0) {
                return bad("occluders need positive scale and opacity in (0,1]".into());
            }
            if let Placement::BetweenCamera { camera, .. } = o.placement {
                if camera >= r.cameras {
                    return bad(format!("occluder refers to missing camera {camera}"));
                }
            }
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.schedule().validate().map_err(wrap)?;
        self.loss.validate().map_err(wrap)?;
        self.adc.validate().map_err(wrap)?;
        self.lpm.validate(self.adc.densify_threshold).map_err(wrap)?;
        Ok(())
    }
}
