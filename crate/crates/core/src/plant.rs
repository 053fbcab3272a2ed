//! Closed-loop harness: a torque-driven 1-DOF arm, a PD controller and the
//! adaptive population wired as an additive correction learned from the PD
//! output.

use serde::Serialize;

use crate::adaptive::{AdaptivePopulation, PopulationConfig};
use crate::cost::{CostReport, PhaseBytes, PhaseCycles};
use crate::error::{Result, SimError};

/// Rigid pendulum with viscous damping, integrated with semi-implicit Euler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmPlant {
    pub theta: f64,
    pub omega: f64,
    pub inertia: f64,
    pub damping: f64,
    /// Peak gravity torque, applied as `-gravity_torque · sin θ`.
    pub gravity_torque: f64,
    /// Constant payload torque; zero in the normal case.
    pub extra_mass_torque: f64,
    pub dt: f64,
}

impl ArmPlant {
    pub fn validate(&self) -> Result<()> {
        if !(self.inertia > 0.0 && self.dt > 0.0) {
            return Err(SimError::InvalidParam("plant inertia and dt must be > 0".into()));
        }
        Ok(())
    }

    pub fn step(&mut self, torque: f64) {
        let accel = (torque
            - self.damping * self.omega
            - self.gravity_torque * self.theta.sin()
            - self.extra_mass_torque)
            / self.inertia;
        self.omega += accel * self.dt;
        self.theta += self.omega * self.dt;
    }
}

/// PD controller with an optional integral term (off by default).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdController {
    pub kp: f64,
    pub kd: f64,
    pub ki: f64,
    pub target: f64,
    integral: f64,
}

impl PdController {
    pub fn new(kp: f64, kd: f64) -> Result<Self> {
        if !(kp > 0.0 && kd > 0.0) {
            return Err(SimError::InvalidParam("kp and kd must be > 0".into()));
        }
        Ok(Self {
            kp,
            kd,
            ki: 0.0,
            target: 0.0,
            integral: 0.0,
        })
    }

    pub fn with_integral(mut self, ki: f64) -> Self {
        self.ki = ki;
        self
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
    }

    /// `kp·(target − θ) − kd·ω`, plus `ki·∫e` when the integral gain is set.
    pub fn pd_step(&mut self, theta: f64, omega: f64, dt: f64) -> f64 {
        let e = self.target - theta;
        let mut u = self.kp * e - self.kd * omega;
        if self.ki != 0.0 {
            self.integral += e * dt;
            u += self.ki * self.integral;
        }
        u
    }
}

/// Target alternating between two setpoints, starting at `high`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareWave {
    pub low: f64,
    pub high: f64,
    pub half_period_s: f64,
}

impl SquareWave {
    pub fn at(&self, t: f64) -> f64 {
        if ((t / self.half_period_s).floor() as i64) % 2 == 0 {
            self.high
        } else {
            self.low
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantCase {
    Normal,
    Aging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Pd,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub theta: f64,
    pub target: f64,
    pub u_pd: f64,
    pub u_adapt: f64,
    pub spike_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialLog {
    pub rows: Vec<LogRow>,
    /// Steps per trial; rows are trials laid end to end.
    pub steps_per_trial: usize,
    pub cost: CostReport,
}

impl TrialLog {
    pub fn rms_error(rows: &[LogRow]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        (rows.iter().map(|r| (r.target - r.theta).powi(2)).sum::<f64>() / rows.len() as f64).sqrt()
    }

    /// RMS tracking error over the last half of all logged steps.
    pub fn second_half_rms(&self) -> f64 {
        Self::rms_error(&self.rows[self.rows.len() / 2..])
    }

    pub fn trials(&self) -> impl Iterator<Item = &[LogRow]> {
        self.rows.chunks(self.steps_per_trial.max(1))
    }

    pub fn mean_abs_error_per_trial(&self) -> Vec<f64> {
        self.trials()
            .map(|t| t.iter().map(|r| (r.target - r.theta).abs()).sum::<f64>() / t.len() as f64)
            .collect()
    }

    pub fn total_spikes(&self) -> usize {
        self.rows.iter().map(|r| r.spike_count).sum()
    }
}

/// Everything needed to reproduce a closed-loop experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoopConfig {
    pub case: PlantCase,
    pub controller: ControllerKind,
    pub trials: usize,
    pub trial_seconds: f64,
    pub dt: f64,
    pub inertia: f64,
    pub damping: f64,
    pub gravity_torque: f64,
    /// Payload torque used in the aging case.
    pub aging_torque: f64,
    pub kp: f64,
    pub kd: f64,
    pub ki: f64,
    pub trajectory: SquareWave,
    /// θ and ω are divided by these before encoding.
    pub theta_range: f64,
    pub omega_range: f64,
    pub divergence_bound: f64,
    pub population: PopulationConfig,
    pub pj_per_cycle: f64,
    pub clock_hz: f64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            case: PlantCase::Normal,
            controller: ControllerKind::Adaptive,
            trials: 5,
            trial_seconds: 20.0,
            dt: 0.001,
            inertia: 0.01,
            damping: 0.0,
            gravity_torque: 0.0,
            aging_torque: 0.6,
            kp: 2.0,
            kd: 0.5,
            ki: 0.0,
            trajectory: SquareWave {
                low: -0.3,
                high: 0.3,
                half_period_s: 5.0,
            },
            theta_range: 1.0,
            omega_range: 3.0,
            divergence_bound: 10.0,
            population: PopulationConfig::default(),
            pj_per_cycle: crate::cost::default_pj_per_cycle(),
            clock_hz: crate::CLOCK_HZ,
        }
    }
}

impl ClosedLoopConfig {
    pub fn steps_per_trial(&self) -> usize {
        (self.trial_seconds / self.dt).round() as usize
    }

    pub fn plant(&self) -> ArmPlant {
        ArmPlant {
            theta: 0.0,
            omega: 0.0,
            inertia: self.inertia,
            damping: self.damping,
            gravity_torque: self.gravity_torque,
            extra_mass_torque: match self.case {
                PlantCase::Normal => 0.0,
                PlantCase::Aging => self.aging_torque,
            },
            dt: self.dt,
        }
    }

    pub fn controller(&self) -> Result<PdController> {
        Ok(PdController::new(self.kp, self.kd)?.with_integral(self.ki))
    }
}

/// Run `steps` control steps from the plant's current state.
///
/// Per step: encode the normalized state, update neurons, decode
/// `u_adapt`, apply `u_pd + u_adapt`, then train the decoders with error
/// `-u_pd`. Without a population the loop is plain PD. `step_offset`
/// numbers the logged rows.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_run(
    mut pop: Option<&mut AdaptivePopulation>,
    ctl: &mut PdController,
    plant: &mut ArmPlant,
    trajectory: &SquareWave,
    steps: usize,
    step_offset: usize,
    config: &ClosedLoopConfig,
) -> Result<TrialLog> {
    if steps == 0 {
        return Err(SimError::InvalidParam("steps must be >= 1".into()));
    }
    plant.validate()?;
    let mut rows = Vec::with_capacity(steps);
    let mut cost = CostReport::new(PhaseCycles::default(), PhaseBytes::default(), config.pj_per_cycle, config.clock_hz);

    for k in 0..steps {
        let t = k as f64 * plant.dt;
        ctl.target = trajectory.at(t);
        let u_pd = ctl.pd_step(plant.theta, plant.omega, plant.dt);

        let (u_adapt, spike_count) = match pop.as_deref_mut() {
            Some(p) => {
                let x = [plant.theta / config.theta_range, plant.omega / config.omega_range];
                let (y, spikes) = p.forward(&x[..p.encoder.d_in()])?;
                p.learn(&spikes, &[-u_pd]);
                let count = spikes.iter().filter(|&&s| s).count();
                cost.accumulate(&p.step_cost(count, config.pj_per_cycle, config.clock_hz));
                (y[0], count)
            }
            None => (0.0, 0),
        };

        plant.step(u_pd + u_adapt);
        if !plant.theta.is_finite() || plant.theta.abs() > config.divergence_bound {
            return Err(SimError::Divergence {
                step: step_offset + k,
                theta: plant.theta,
                bound: config.divergence_bound,
            });
        }
        rows.push(LogRow {
            step: step_offset + k,
            theta: plant.theta,
            target: ctl.target,
            u_pd,
            u_adapt,
            spike_count,
        });
    }
    Ok(TrialLog {
        rows,
        steps_per_trial: steps,
        cost,
    })
}

/// `config.trials` back-to-back trials. The plant, controller and neuron
/// state are reset at the start of each trial; learned decoders persist.
pub fn run_trials(config: &ClosedLoopConfig, seed: u64) -> Result<TrialLog> {
    run_trials_keep(config, seed).map(|(log, _)| log)
}

/// As [`run_trials`], also returning the trained population when the
/// controller is adaptive.
pub fn run_trials_keep(config: &ClosedLoopConfig, seed: u64) -> Result<(TrialLog, Option<AdaptivePopulation>)> {
    if config.trials == 0 {
        return Err(SimError::InvalidParam("trials must be >= 1".into()));
    }
    if config.population.d_in != 2 || config.population.d_out != 1 {
        return Err(SimError::InvalidParam(
            "the arm controller needs a population with d_in = 2 and d_out = 1".into(),
        ));
    }
    let mut pop = match config.controller {
        ControllerKind::Adaptive => Some(AdaptivePopulation::build(&config.population, seed)?),
        ControllerKind::Pd => None,
    };
    let steps = config.steps_per_trial();
    let mut ctl = config.controller()?;
    let mut all = TrialLog {
        rows: Vec::with_capacity(steps * config.trials),
        steps_per_trial: steps,
        cost: CostReport::new(PhaseCycles::default(), PhaseBytes::default(), config.pj_per_cycle, config.clock_hz),
    };
    for trial in 0..config.trials {
        let mut plant = config.plant();
        ctl.reset();
        if let Some(p) = pop.as_mut() {
            p.lif.reset();
        }
        let log = closed_loop_run(pop.as_mut(), &mut ctl, &mut plant, &config.trajectory, steps, trial * steps, config)?;
        all.rows.extend(log.rows);
        all.cost.accumulate(&log.cost);
    }
    Ok((all, pop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pd_examples() {
        let mut c = PdController::new(1.0, 0.1).unwrap();
        c.target = 0.4;
        assert_eq!(c.pd_step(0.4, 0.0, 0.001), 0.0);

        let mut c = PdController::new(1.0, 1e-9).unwrap();
        c.target = 0.5;
        assert_relative_eq!(c.pd_step(0.0, 0.0, 0.001), 0.5);

        let mut c = PdController::new(2.0, 0.1).unwrap();
        c.target = 0.3;
        assert_relative_eq!(c.pd_step(0.0, 1.0, 0.001), 0.5, max_relative = 1e-12);

        assert!(PdController::new(0.0, 1.0).is_err());
        assert!(PdController::new(1.0, -1.0).is_err());
    }

    #[test]
    fn integral_term_accumulates() {
        let mut c = PdController::new(1.0, 1.0).unwrap().with_integral(10.0);
        c.target = 1.0;
        let u1 = c.pd_step(0.0, 0.0, 0.1);
        let u2 = c.pd_step(0.0, 0.0, 0.1);
        assert_relative_eq!(u1, 1.0 + 10.0 * 0.1);
        assert_relative_eq!(u2, 1.0 + 10.0 * 0.2);
        c.reset();
        assert_relative_eq!(c.pd_step(0.0, 0.0, 0.1), 2.0);
    }

    #[test]
    fn free_plant_conserves_velocity() {
        let mut p = ArmPlant {
            theta: 0.1,
            omega: 0.7,
            inertia: 0.3,
            damping: 0.0,
            gravity_torque: 0.0,
            extra_mass_torque: 0.0,
            dt: 0.001,
        };
        for _ in 0..10_000 {
            p.step(0.0);
        }
        assert_eq!(p.omega, 0.7);
        assert_relative_eq!(p.theta, 0.1 + 7.0, max_relative = 1e-9);
    }

    #[test]
    fn square_wave_alternates() {
        let w = SquareWave {
            low: -1.0,
            high: 1.0,
            half_period_s: 2.0,
        };
        assert_eq!(w.at(0.0), 1.0);
        assert_eq!(w.at(1.999), 1.0);
        assert_eq!(w.at(2.0), -1.0);
        assert_eq!(w.at(4.5), 1.0);
    }

    #[test]
    fn divergence_detected() {
        let cfg = ClosedLoopConfig {
            controller: ControllerKind::Pd,
            divergence_bound: 0.05,
            ..Default::default()
        };
        let err = run_trials(&cfg, 0).unwrap_err();
        assert!(matches!(err, SimError::Divergence { .. }));
    }

    #[test]
    fn frozen_learning_matches_pd() {
        let base = ClosedLoopConfig {
            trials: 1,
            trial_seconds: 2.0,
            ..Default::default()
        };
        let pd = run_trials(
            &ClosedLoopConfig {
                controller: ControllerKind::Pd,
                ..base
            },
            3,
        )
        .unwrap();
        let mut frozen_cfg = base;
        frozen_cfg.population.alpha = 0.0;
        let frozen = run_trials(&frozen_cfg, 3).unwrap();
        assert!(frozen.total_spikes() > 0);
        for (a, b) in pd.rows.iter().zip(&frozen.rows) {
            assert_eq!(a.theta, b.theta);
            assert_eq!(b.u_adapt, 0.0);
        }
    }

    #[test]
    fn payload_increases_pd_error() {
        let base = ClosedLoopConfig {
            controller: ControllerKind::Pd,
            trials: 1,
            trial_seconds: 10.0,
            ..Default::default()
        };
        let normal = run_trials(&base, 0).unwrap();
        let aging = run_trials(
            &ClosedLoopConfig {
                case: PlantCase::Aging,
                ..base
            },
            0,
        )
        .unwrap();
        assert!(aging.second_half_rms() > normal.second_half_rms());
        // steady state error = payload / kp
        let last = aging.rows.last().unwrap();
        assert_relative_eq!(last.target - last.theta, 0.6 / 2.0, max_relative = 1e-3);
    }
}
