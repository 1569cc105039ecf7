//! Run configuration: a single TOML document with every knob explicit.
//! Unknown keys are rejected so typos fail fast instead of silently using a
//! default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cglq_core::cgle::{CgleParams, StepScheme};
use cglq_core::correl::DenominatorMode;
use cglq_core::quantum::NoiseSettings;
use cglq_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_points: usize,
    pub t_window: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateMode {
    Single,
    Pair,
    Train,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    pub mode: StateMode,
    /// Sech guess for the single-soliton relaxation.
    #[serde(default = "default_guess_amplitude")]
    pub guess_amplitude: f64,
    #[serde(default = "default_guess_width")]
    pub guess_width: f64,
    /// Distance budget for the single-soliton relaxation.
    #[serde(default = "default_relax_distance")]
    pub relax_max_distance: f64,
    /// Explicit offsets/phases override the separation-based layout.
    #[serde(default)]
    pub offsets: Option<Vec<f64>>,
    #[serde(default)]
    pub phases: Option<Vec<f64>>,
    /// Neighbour separation used when offsets are not given.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Number of pulses for train mode (pair mode is fixed at 2).
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    /// Fixed settling distance for composed bound states.
    #[serde(default = "default_settle_distance")]
    pub settle_distance: f64,
}

fn default_guess_amplitude() -> f64 {
    2.0
}
fn default_guess_width() -> f64 {
    1.0
}
fn default_relax_distance() -> f64 {
    1200.0
}
fn default_separation() -> f64 {
    2.0
}
fn default_train_size() -> usize {
    4
}
fn default_settle_distance() -> f64 {
    60.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_true")]
    pub delta: bool,
    #[serde(default = "default_true")]
    pub epsilon: bool,
    #[serde(default = "default_true")]
    pub beta: bool,
    #[serde(default = "default_true")]
    pub mu: bool,
}

fn default_true() -> bool {
    true
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            delta: true,
            epsilon: true,
            beta: true,
            mu: true,
        }
    }
}

impl NoiseConfig {
    pub fn to_settings(&self) -> NoiseSettings {
        NoiseSettings {
            delta: self.delta,
            epsilon: self.epsilon,
            beta: self.beta,
            mu: self.mu,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementConfig {
    /// z positions where correlations are measured (rounded to steps).
    pub checkpoints: Vec<f64>,
    /// Propagation distance; defaults to the largest checkpoint.
    #[serde(default)]
    pub distance: Option<f64>,
    #[serde(default = "default_slot_count")]
    pub slot_count: usize,
    #[serde(default)]
    pub denominator_mode: DenominatorMode,
    /// Peak-detection threshold as a fraction of the global maximum.
    #[serde(default = "default_threshold")]
    pub threshold_fraction: f64,
    /// Emit the slot correlation map at every checkpoint (not only the last).
    #[serde(default = "default_true")]
    pub eta_per_checkpoint: bool,
    #[serde(default)]
    pub noise: NoiseConfig,
}

fn default_slot_count() -> usize {
    64
}
fn default_threshold() -> f64 {
    0.3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub epsilon: Option<Vec<f64>>,
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    #[serde(default)]
    pub separation: Option<Vec<f64>>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    1
}

/// Full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub params: CgleParams,
    #[serde(default)]
    pub scheme: StepScheme,
    pub state: StateConfig,
    pub measurement: MeasurementConfig,
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.scheme.validate()?;
        if self.grid.n_points < 16 || !self.grid.n_points.is_power_of_two() {
            return Err(Error::Config(format!(
                "grid.n_points must be a power of two >= 16, got {}",
                self.grid.n_points
            )));
        }
        if !(self.grid.t_window > 0.0) {
            return Err(Error::Config("grid.t_window must be positive".into()));
        }
        if self.measurement.checkpoints.is_empty() {
            return Err(Error::Config("measurement.checkpoints must not be empty".into()));
        }
        if self
            .measurement
            .checkpoints
            .iter()
            .any(|&z| !(z >= 0.0) || !z.is_finite())
        {
            return Err(Error::Config("checkpoints must be finite and >= 0".into()));
        }
        if self
            .measurement
            .checkpoints
            .windows(2)
            .any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("checkpoints must be strictly increasing".into()));
        }
        if !(self.measurement.threshold_fraction > 0.0 && self.measurement.threshold_fraction < 1.0)
        {
            return Err(Error::Config("threshold_fraction must lie in (0, 1)".into()));
        }
        if self.measurement.slot_count == 0 {
            return Err(Error::Config("slot_count must be >= 1".into()));
        }
        if let (Some(offsets), Some(phases)) = (&self.state.offsets, &self.state.phases) {
            if offsets.len() != phases.len() {
                return Err(Error::Config(
                    "state.offsets and state.phases must have equal lengths".into(),
                ));
            }
        }
        if self.state.mode == StateMode::Train && self.state.train_size < 2 {
            return Err(Error::Config("train_size must be >= 2".into()));
        }
        Ok(())
    }

    /// Propagation distance: explicit or the largest checkpoint. Errors if a
    /// checkpoint lies beyond the explicit distance.
    pub fn measurement_distance(&self) -> Result<f64> {
        let max_ck = *self
            .measurement
            .checkpoints
            .last()
            .expect("validated non-empty");
        match self.measurement.distance {
            Some(d) => {
                if max_ck > d + 1e-12 {
                    Err(Error::Contract(format!(
                        "checkpoint {max_ck} beyond propagated distance {d}"
                    )))
                } else {
                    Ok(d)
                }
            }
            None => Ok(max_ck),
        }
    }

    /// Expected soliton count of the prepared state.
    pub fn expected_solitons(&self) -> usize {
        match self.state.mode {
            StateMode::Single => 1,
            StateMode::Pair => 2,
            StateMode::Train => self.state.train_size,
        }
    }

    /// Offsets/phases of the composed state (explicit or separation-derived).
    pub fn layout(&self) -> (Vec<f64>, Vec<f64>) {
        if let Some(offsets) = &self.state.offsets {
            let phases = self
                .state
                .phases
                .clone()
                .unwrap_or_else(|| vec![0.0; offsets.len()]);
            return (offsets.clone(), phases);
        }
        let n = self.expected_solitons();
        let mid = 0.5 * (n as f64 - 1.0);
        let offsets = (0..n)
            .map(|j| (j as f64 - mid) * self.state.separation)
            .collect();
        (offsets, vec![0.0; n])
    }
}
