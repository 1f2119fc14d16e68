//! TOML run configuration read by the command-line tool.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{frequency_grid, RegionController, RegionOptions};
use crate::ctpc::ProjectionConfig;
use crate::error::{Error, Result};
use crate::gait::{pseudo_passive_fraction, retarget_speed, PeriodicGait};
use crate::harness::{BenchmarkOptions, ControllerSpec, ObserverMode, PushEvent, SimContext};
use crate::linmodel::{ModelParams, Preset};
use crate::search::SearchOptions;
use crate::stepctl::Variant;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: Preset,
    /// Replaces the preset parameters when present.
    pub params: Option<ModelParams>,
    pub speed: f64,
    pub ds_fraction: f64,
    /// Time steps per stride.
    pub grid: usize,
    /// Steps per second. The pseudo-passive timing is used when absent.
    pub frequency: Option<f64>,
    pub controller: ControllerSpec,
    pub strides: usize,
    pub observer: ObserverMode,
    pub pushes: Vec<PushEvent>,
    /// Constant push over the second stride (scenario II) instead of `pushes`.
    pub stride_push: Option<[f64; 4]>,
    /// (time s, speed m/s) pairs for speed tracking.
    pub speed_profile: Vec<(f64, f64)>,
    pub eigen: EigenConfig,
    pub surface: SurfaceConfig,
    pub region: RegionConfig,
    pub search: SearchOptions,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: Preset::Adult,
            params: None,
            speed: 0.5,
            ds_fraction: 0.2,
            grid: 100,
            frequency: None,
            controller: ControllerSpec::Ctpc { variant: Variant::Aggressive, config: ProjectionConfig::C1.into() },
            strides: 10,
            observer: ObserverMode::Estimated,
            pushes: Vec::new(),
            stride_push: None,
            speed_profile: Vec::new(),
            eigen: EigenConfig::default(),
            surface: SurfaceConfig::default(),
            region: RegionConfig::default(),
            search: SearchOptions::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenConfig {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub controllers: Vec<ControllerSpec>,
}

impl Default for EigenConfig {
    fn default() -> Self {
        let mut controllers = vec![ControllerSpec::OpenLoop];
        controllers.extend(Variant::ALL.iter().map(|&variant| ControllerSpec::Dlqr { variant }));
        controllers.push(ControllerSpec::Ctpc { variant: Variant::Aggressive, config: ProjectionConfig::C1.into() });
        EigenConfig { lo: 0.8, hi: 2.5, count: 8, controllers }
    }
}

impl EigenConfig {
    pub fn frequencies(&self) -> Vec<f64> {
        frequency_grid(self.lo, self.hi, self.count)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceConfig {
    /// Push start and end as stride fractions.
    pub starts: Vec<f64>,
    pub ends: Vec<f64>,
    pub w: [f64; 4],
    pub controllers: Vec<ControllerSpec>,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        SurfaceConfig {
            starts: grid.clone(),
            ends: grid,
            w: [20.0, 0.0, 0.0, 0.0],
            controllers: vec![
                ControllerSpec::OpenLoop,
                ControllerSpec::Dlqr { variant: Variant::Aggressive },
                ControllerSpec::Ctpc { variant: Variant::Aggressive, config: ProjectionConfig::C1.into() },
            ],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    pub controllers: Vec<RegionController>,
    pub variant: Variant,
    pub projection: String,
    pub subspaces: Vec<(usize, usize)>,
    pub options: RegionOptions,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            controllers: vec![RegionController::Dlqr, RegionController::Ctpc, RegionController::Maximal],
            variant: Variant::Normal,
            projection: ProjectionConfig::C1.into(),
            subspaces: vec![(0, 4)],
            options: RegionOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub controllers: Vec<ControllerSpec>,
    pub options: BenchmarkOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut controllers = vec![ControllerSpec::Dlqr { variant: Variant::Aggressive }];
        for c in [ProjectionConfig::C1, ProjectionConfig::C2, ProjectionConfig::C3, ProjectionConfig::C4] {
            controllers.push(ControllerSpec::Ctpc { variant: Variant::Aggressive, config: c.into() });
        }
        BenchConfig { seeds: vec![1, 2, 3, 4, 5], controllers, options: BenchmarkOptions::default() }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return Err(Error::Config(format!("speed must be positive, got {}", self.speed)));
        }
        if self.grid < 2 || self.strides == 0 {
            return Err(Error::Config("grid needs ≥ 2 steps and at least one stride".into()));
        }
        if let Some(f) = self.frequency {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::Config(format!("frequency must be positive, got {f}")));
            }
        }
        for p in &self.pushes {
            PushEvent::new(p.w, p.t_start, p.t_end).map_err(|e| Error::Config(e.to_string()))?;
        }
        for spec in self.all_controllers() {
            if let ControllerSpec::Ctpc { config, .. } = spec {
                config.parse::<ProjectionConfig>().map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        self.region.projection.parse::<ProjectionConfig>().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn all_controllers(&self) -> impl Iterator<Item = &ControllerSpec> {
        std::iter::once(&self.controller).chain(&self.eigen.controllers).chain(&self.surface.controllers).chain(&self.bench.controllers)
    }

    pub fn params(&self) -> ModelParams {
        self.params.clone().unwrap_or_else(|| ModelParams::from_preset(self.model))
    }

    /// Reference gait: actuated at the configured frequency, otherwise
    /// pseudo-passive retargeted to the configured speed.
    pub fn gait(&self) -> Result<PeriodicGait> {
        let params = self.params();
        match self.frequency {
            Some(f) => crate::analysis::frequency_gait(&params, f, self.speed, self.grid),
            None => retarget_speed(&pseudo_passive_fraction(&params, self.ds_fraction, self.grid)?, self.speed),
        }
    }

    pub fn context(&self) -> Result<SimContext> {
        SimContext::new(&self.params(), &self.gait()?)
    }
}
