use neurosim_core::adaptive::{self, AdaptivePopulation, EncoderMatrix, PopulationConfig};
use neurosim_core::cost::{self, AdaptiveCoeffs};
use neurosim_core::plant::{run_trials, ClosedLoopConfig, ControllerKind, PlantCase};
use neurosim_core::rng;
use rand::Rng;

#[test]
fn quantized_currents_track_float_reference() {
    let (d_in, n) = (100usize, 256usize);
    let mut r = rng::seeded(2024);
    let enc: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d_in).map(|_| r.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let bias_over_gain: Vec<f64> = (0..n).map(|_| r.random_range(-0.5..0.5)).collect();
    let gain: Vec<f64> = (0..n).map(|_| r.random_range(1.0..5.0)).collect();
    let quant = EncoderMatrix::quantize(&enc, &bias_over_gain, 77).unwrap();
    let scale = quant.matrix().scale();

    for _ in 0..20 {
        let x: Vec<f64> = (0..d_in).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = adaptive::input_process(&quant, &gain, &x).unwrap();
        for j in 0..n {
            let proj: f64 = enc[j].iter().zip(&x).map(|(e, x)| e * x).sum();
            let exact = gain[j] * (proj + bias_over_gain[j]);
            let bound = gain[j] * scale * d_in as f64 / 2.0;
            assert!((got[j] - exact).abs() <= bound, "neuron {j}: {} vs {exact}", got[j]);
        }
    }
}

#[test]
fn step_cost_follows_spike_count() {
    let pop = AdaptivePopulation::build(&PopulationConfig::default(), 9).unwrap();
    let c = AdaptiveCoeffs::default();
    let none = pop.step_cost(0, 10.0, 2.5e8);
    assert_eq!(none.cycles.output, 0.0);
    assert_eq!(none.cycles.learning, 0.0);
    let some = pop.step_cost(33, 10.0, 2.5e8);
    let p = 33.0 / 256.0;
    assert!((some.cycles.output - c.output(256, 1, p)).abs() < 1e-9);
    assert!((some.cycles.learning - c.learning(256, 1, p)).abs() < 1e-9);
    assert_eq!(some.bytes, cost::adaptive_memory(256, 2, 1));
    assert!(some.total_cycles() < cost::ADAPTIVE_STEP_BUDGET_CYCLES);
}

#[test]
fn population_rate_near_130hz_in_closed_loop() {
    let cfg = ClosedLoopConfig {
        case: PlantCase::Aging,
        trials: 1,
        trial_seconds: 5.0,
        ..Default::default()
    };
    let log = run_trials(&cfg, 21).unwrap();
    let p = log.total_spikes() as f64 / (log.rows.len() * cfg.population.n) as f64;
    assert!((p - 0.13).abs() < 0.013, "firing probability {p}");
}

#[test]
fn normal_case_both_controllers_settle() {
    let base = ClosedLoopConfig {
        trials: 3,
        ..Default::default()
    };
    for controller in [ControllerKind::Pd, ControllerKind::Adaptive] {
        let log = run_trials(&ClosedLoopConfig { controller, ..base }, 5).unwrap();
        // last 0.5 s before each setpoint switch
        let settle = (0.5 / base.dt) as usize;
        let half = (base.trajectory.half_period_s / base.dt) as usize;
        for end in (half..=log.rows.len()).step_by(half) {
            let window = &log.rows[end - settle..end];
            let err = window.iter().map(|r| (r.target - r.theta).abs()).sum::<f64>() / settle as f64;
            assert!(err < 0.02, "{controller:?}: steady-state error {err} before step {end}");
        }
    }
}

#[test]
fn aging_learning_trend_over_trials() {
    let cfg = ClosedLoopConfig {
        case: PlantCase::Aging,
        ..Default::default()
    };
    let log = run_trials(&cfg, 8).unwrap();
    let per_trial = log.mean_abs_error_per_trial();
    assert_eq!(per_trial.len(), 5);
    for w in per_trial.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "trial errors {per_trial:?}");
    }
    assert!(per_trial[4] < per_trial[0]);
}
