//! Experiment configuration: one TOML document with a section per module.
//!
//! Every field has a default, so an empty file is a complete configuration.
//! Unknown keys are rejected with the offending key named.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consistency::{NetConfig, Parametrization, DEFAULT_SIGMA_DATA};
use crate::diffusion::{NoiseSchedule, ScheduleKind, TimeGrid, DEFAULT_GRID_INTERVALS, DEFAULT_KAPPA, DEFAULT_T_MAX};
use crate::discriminator::DiscConfig;
use crate::distill::{DistillConfig, TeacherConfig};
use crate::error::{Error, Result};
use crate::samplers::{SamplerKind, Spacing, TtsOptions};
use crate::toyworld::ToyVideoConfig;

/// Split sizes for `datagen`; the clip generator itself is configured in `[data]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            train_count: 1024,
            test_count: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub kappa: f64,
    pub t_max: f64,
    pub grid_intervals: usize,
    /// Data scale used by the consistency parametrization.
    pub sigma_data: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VarianceExploding,
            kappa: DEFAULT_KAPPA,
            t_max: DEFAULT_T_MAX,
            grid_intervals: DEFAULT_GRID_INTERVALS,
            sigma_data: DEFAULT_SIGMA_DATA,
        }
    }
}

impl ScheduleSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.kappa, self.t_max)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.kappa, self.t_max, self.grid_intervals)
    }

    pub fn parametrization(&self) -> Parametrization {
        Parametrization {
            sigma_data: self.sigma_data,
            kappa: self.kappa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub steps: usize,
    pub cfg_scale: f64,
    pub spacing: Spacing,
    /// Draw each TTS noise injection independently instead of sharing one per step.
    pub independent_noise: bool,
    pub allow_multistep: bool,
    /// Clips generated by `sample` when `--count` is not given.
    pub count: usize,
}

impl SamplerSection {
    pub fn tts_options(&self) -> TtsOptions {
        TtsOptions {
            independent_noise: self.independent_noise,
            allow_multistep: self.allow_multistep,
        }
    }
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Tts,
            steps: 1,
            cfg_scale: 1.5,
            spacing: Spacing::Power { rho: 7.0 },
            independent_noise: false,
            allow_multistep: false,
            count: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Clips sampled per toy-FVD evaluation; the real side is the test set.
    pub clips: usize,
    /// Teacher trajectories used for the self-consistency gap.
    pub gap_trajectories: usize,
    pub theorem_grid_sizes: Vec<usize>,
    pub theorem_probes: usize,
    pub diagnostic_clips: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            clips: 128,
            gap_trajectories: 32,
            theorem_grid_sizes: vec![10, 20, 40, 80, 160],
            theorem_probes: crate::eval::THEOREM_PROBES,
            diagnostic_clips: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every purpose-specific seed is derived from it.
    pub seed: u64,
    pub data: ToyVideoConfig,
    pub split: SplitSection,
    pub model: NetConfig,
    pub schedule: ScheduleSection,
    pub teacher: TeacherConfig,
    pub discriminator: DiscConfig,
    pub distill: DistillConfig,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".to_string());
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.split.train_count == 0 {
            return Err(Error::config("split.train_count", "must be positive"));
        }
        if self.data.height % 2 != 0 || self.data.width % 2 != 0 {
            return Err(Error::config("data.height", "pixel dims must be divisible by the codec factor 2"));
        }
        let latent_channels = self.data.channels * 4;
        if self.model.latent_channels != latent_channels {
            return Err(Error::config(
                "model.latent_channels",
                format!("must equal 4 x data.channels = {latent_channels}"),
            ));
        }
        if !(self.schedule.sigma_data > 0.0) {
            return Err(Error::config("schedule.sigma_data", "must be positive"));
        }
        self.model.validate()?;
        self.schedule.schedule()?;
        if self.schedule.grid_intervals < self.distill.m + 1 {
            return Err(Error::config("schedule.grid_intervals", "must exceed distill.m"));
        }
        self.discriminator.validate()?;
        if self.data.frames < self.discriminator.temporal_kernel {
            return Err(Error::config(
                "discriminator.temporal_kernel",
                "longer than the clip frame count",
            ));
        }
        if self.discriminator.pixel_channels != self.data.channels {
            return Err(Error::config("discriminator.pixel_channels", "must equal data.channels"));
        }
        self.distill.validate()?;
        if self.sampler.steps == 0 {
            return Err(Error::config("sampler.steps", "must be at least 1"));
        }
        if self.teacher.batch_size == 0 || self.teacher.sample_steps == 0 {
            return Err(Error::config("teacher.batch_size", "batch size and sample steps must be positive"));
        }
        Ok(())
    }
}
