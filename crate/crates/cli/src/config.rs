use std::path::Path;

use neurosim_core::cost::{self, CycleCoeffs};
use neurosim_core::plant::ClosedLoopConfig;
use serde::Deserialize;

use crate::error::CliError;

/// Settings shared by every subcommand. Loaded from an optional JSON file;
/// command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub budget_bytes: usize,
    pub clock_hz: f64,
    /// Defaults to the keyword-spotting calibration.
    pub pj_per_cycle: Option<f64>,
    pub threads: Option<usize>,
    pub coeffs: CycleCoeffs,
    pub adaptive: AdaptiveSettings,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveSettings {
    pub neurons: usize,
    pub kp: f64,
    pub kd: f64,
    pub ki: f64,
    pub alpha: f64,
    pub trial_seconds: f64,
    pub aging_torque: f64,
    pub target_rate_hz: f64,
}

impl Default for AdaptiveSettings {
    fn default() -> Self {
        let c = ClosedLoopConfig::default();
        Self {
            neurons: c.population.n,
            kp: c.kp,
            kd: c.kd,
            ki: c.ki,
            alpha: c.population.alpha,
            trial_seconds: c.trial_seconds,
            aging_torque: c.aging_torque,
            target_rate_hz: c.population.target_rate_hz.unwrap_or(130.0),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            budget_bytes: neurosim_core::SRAM_BUDGET_BYTES,
            clock_hz: neurosim_core::CLOCK_HZ,
            pj_per_cycle: None,
            threads: None,
            coeffs: CycleCoeffs::default(),
            adaptive: AdaptiveSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.budget_bytes == 0 {
            return bad("budget_bytes must be > 0".into());
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return bad(format!("clock_hz must be > 0, got {}", self.clock_hz));
        }
        if let Some(pj) = self.pj_per_cycle {
            if !(pj.is_finite() && pj > 0.0) {
                return bad(format!("pj_per_cycle must be > 0, got {pj}"));
            }
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1".into());
        }
        let a = &self.adaptive;
        if a.neurons == 0 {
            return bad("adaptive.neurons must be >= 1".into());
        }
        if !(a.kp > 0.0 && a.kd > 0.0) {
            return bad("adaptive.kp and adaptive.kd must be > 0".into());
        }
        if !(a.alpha >= 0.0 && a.alpha.is_finite()) {
            return bad("adaptive.alpha must be >= 0".into());
        }
        if !(a.trial_seconds.is_finite() && a.trial_seconds > 0.0) {
            return bad("adaptive.trial_seconds must be > 0".into());
        }
        Ok(())
    }

    pub fn pj_per_cycle(&self) -> f64 {
        self.pj_per_cycle.unwrap_or_else(|| {
            cost::calibrate_pj_per_cycle(
                &self.coeffs.kws,
                &cost::KWS_PE_DIMS,
                cost::KWS_ENERGY_PER_INFERENCE_UJ,
            )
        })
    }

    pub fn closed_loop(&self) -> ClosedLoopConfig {
        let mut c = ClosedLoopConfig {
            kp: self.adaptive.kp,
            kd: self.adaptive.kd,
            ki: self.adaptive.ki,
            trial_seconds: self.adaptive.trial_seconds,
            aging_torque: self.adaptive.aging_torque,
            pj_per_cycle: self.pj_per_cycle(),
            clock_hz: self.clock_hz,
            ..Default::default()
        };
        c.population.n = self.adaptive.neurons;
        c.population.alpha = self.adaptive.alpha;
        c.population.target_rate_hz = Some(self.adaptive.target_rate_hz);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 9, "adaptive": {"kp": 3.0}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.adaptive.kp, 3.0);
        assert_eq!(c.adaptive.kd, 0.5);
        assert_eq!(c.budget_bytes, 92_160);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"adaptive": {"gain": 1}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let c = RunConfig {
            budget_bytes: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            pj_per_cycle: Some(-1.0),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_pj_matches_core_calibration() {
        assert_eq!(RunConfig::default().pj_per_cycle(), cost::default_pj_per_cycle());
    }
}
