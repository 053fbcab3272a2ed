use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use neurosim_core::cost::{self, FeasibilityPoint, MatmulPoly, ModelViolation};
use neurosim_core::kws::{self, InferenceResult, KwsNetwork, KwsRunConfig, PePlacement};
use neurosim_core::mac_array;
use neurosim_core::plant::{self, ClosedLoopConfig, ControllerKind, PlantCase, TrialLog};
use neurosim_core::quant::QuantMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const DEFAULT_MAP_N: [usize; 5] = [64, 128, 256, 512, 1024];
pub const DEFAULT_MAP_D_IN: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 100];

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn thread_pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        b = b.num_threads(t);
    }
    b.build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}

#[derive(Serialize)]
struct KwsReport<'a> {
    seed: u64,
    placement: &'a PePlacement,
    per_pe: &'a [kws::PeStats],
    per_pe_cycles: Vec<f64>,
    step_cycles_worst: f64,
    step_period_cycles: f64,
    inferences_per_sec_modeled: f64,
    energy_uj_modeled: f64,
    logits: &'a [Vec<f64>],
}

pub fn kws_run(cfg: &RunConfig, weights: Option<&Path>, frames: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let net = match weights {
        Some(p) => KwsNetwork::read_bundle(&mut open(p)?)?,
        None => KwsNetwork::random(cfg.seed)?,
    };
    let frames = match frames {
        Some(p) => QuantMatrix::read_qm01(&mut open(p)?)?,
        None => kws::random_frames(cfg.seed, net.inputs(), cost::KWS_STEPS_PER_INFERENCE),
    };
    let placement = kws::place_network(&net, cfg.budget_bytes)?;
    let run_cfg = KwsRunConfig {
        coeffs: cfg.coeffs.kws,
        clock_hz: cfg.clock_hz,
        pj_per_cycle: cfg.pj_per_cycle(),
    };
    let r: InferenceResult = kws::run_inference(&net, &placement, &frames, &run_cfg)?;
    write_json(
        out,
        &KwsReport {
            seed: cfg.seed,
            placement: &placement,
            per_pe: &r.per_pe,
            per_pe_cycles: r.per_pe.iter().map(|p| p.step_cycles).collect(),
            step_cycles_worst: r.step_cycles_worst,
            step_period_cycles: r.step_period_cycles,
            inferences_per_sec_modeled: r.inferences_per_sec_modeled,
            energy_uj_modeled: r.energy_uj_modeled,
            logits: &r.logits,
        },
    )?;
    println!(
        "{} PEs, worst step {:.2} cycles, {:.1} inferences/s, {:.3} uJ/inference",
        placement.pe_count(),
        r.step_cycles_worst,
        r.inferences_per_sec_modeled,
        r.energy_uj_modeled
    );
    Ok(())
}

pub fn kws_gen(seed: u64, weights_out: &Path, frames_out: &Path) -> Result<(), CliError> {
    let net = KwsNetwork::random(seed)?;
    let mut w = create(weights_out)?;
    net.write_bundle(&mut w)?;
    w.flush().map_err(|e| CliError::io(weights_out, e))?;
    let frames = kws::random_frames(seed, net.inputs(), cost::KWS_STEPS_PER_INFERENCE);
    let mut f = create(frames_out)?;
    frames.write_qm01(&mut f)?;
    f.flush().map_err(|e| CliError::io(frames_out, e))
}

pub fn adaptive_run(
    cfg: &RunConfig,
    case: PlantCase,
    controller: ControllerKind,
    trials: usize,
    out: &Path,
    snapshot: Option<&Path>,
) -> Result<(), CliError> {
    let loop_cfg = ClosedLoopConfig {
        case,
        controller,
        trials,
        ..cfg.closed_loop()
    };
    if snapshot.is_some() && controller != ControllerKind::Adaptive {
        return Err(CliError::Config("--snapshot-out needs --controller adaptive".into()));
    }
    let (log, pop) = plant::run_trials_keep(&loop_cfg, cfg.seed)?;
    write_csv(out, &log.rows)?;
    if let (Some(path), Some(pop)) = (snapshot, pop) {
        let mut w = create(path)?;
        pop.write_snapshot(&mut w)?;
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    println!(
        "{} steps, RMS error {:.5} rad (second half {:.5}), mean firing probability {:.4}",
        log.rows.len(),
        TrialLog::rms_error(&log.rows),
        log.second_half_rms(),
        log.total_spikes() as f64 / (log.rows.len() * loop_cfg.population.n) as f64,
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bench {
    Kws,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub n: Vec<usize>,
    pub d_in: Vec<usize>,
    #[serde(default = "default_d_out")]
    pub d_out: Vec<usize>,
    #[serde(default = "default_p")]
    pub p: Vec<f64>,
}

fn default_d_out() -> Vec<usize> {
    vec![1]
}

fn default_p() -> Vec<f64> {
    vec![0.13]
}

impl Grid {
    pub fn default_for(bench: Bench) -> Self {
        match bench {
            Bench::Kws => Self {
                n: vec![64, 128, 256],
                d_in: vec![64, 128, 256, 390],
                d_out: default_d_out(),
                p: vec![1.0],
            },
            Bench::Adaptive => Self {
                n: DEFAULT_MAP_N.to_vec(),
                d_in: DEFAULT_MAP_D_IN.to_vec(),
                d_out: vec![1, 2, 4, 8, 16, 32, 64],
                p: default_p(),
            },
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.n.is_empty() || self.d_in.is_empty() || self.d_out.is_empty() || self.p.is_empty() {
            return Err(CliError::Config("grid axes must be non-empty".into()));
        }
        if self.n.iter().chain(&self.d_in).chain(&self.d_out).any(|&v| v == 0) {
            return Err(CliError::Config("grid dimensions must be >= 1".into()));
        }
        if self.p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CliError::Config("grid p values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub p: f64,
    pub cycles_total: f64,
    pub bytes_total: usize,
    pub feasible: bool,
    pub energy_uj: f64,
}

pub fn sweep_rows(cfg: &RunConfig, bench: Bench, grid: &Grid) -> Result<Vec<SweepRow>, CliError> {
    grid.validate()?;
    let pj = cfg.pj_per_cycle();
    let points: Vec<(usize, usize, usize, f64)> = match bench {
        Bench::Kws => grid
            .n
            .iter()
            .flat_map(|&n| grid.d_in.iter().map(move |&d| (n, d, n, 1.0)))
            .collect(),
        Bench::Adaptive => grid
            .n
            .iter()
            .flat_map(|&n| {
                grid.d_in.iter().flat_map(move |&d_in| {
                    grid.d_out
                        .iter()
                        .flat_map(move |&d_out| grid.p.iter().map(move |&p| (n, d_in, d_out, p)))
                })
            })
            .collect(),
    };
    let pool = thread_pool(cfg)?;
    let rows = pool.install(|| {
        points
            .par_iter()
            .map(|&(n, d_in, d_out, p)| {
                let (cycles, bytes, limit) = match bench {
                    Bench::Kws => (
                        cfg.coeffs.kws.cycles(n, d_in).t_total,
                        cost::kws_memory(n, d_in).total(),
                        cost::KWS_STEP_BOUND_CYCLES,
                    ),
                    Bench::Adaptive => (
                        cfg.coeffs.adaptive.cycles(n, d_in, d_out, p, true).total(),
                        cost::adaptive_memory(n, d_in, d_out).total(),
                        cost::ADAPTIVE_STEP_BUDGET_CYCLES,
                    ),
                };
                SweepRow {
                    n,
                    d_in,
                    d_out,
                    p,
                    cycles_total: cycles,
                    bytes_total: bytes,
                    feasible: bytes <= cfg.budget_bytes && cycles <= limit,
                    energy_uj: cost::energy_model(cycles, pj),
                }
            })
            .collect()
    });
    Ok(rows)
}

pub fn cost_sweep(cfg: &RunConfig, bench: Bench, grid: &str, out: &Path) -> Result<(), CliError> {
    let grid = if grid == "default" {
        Grid::default_for(bench)
    } else {
        let path = Path::new(grid);
        serde_json::from_reader(open(path)?).map_err(|e| CliError::Config(format!("{grid}: {e}")))?
    };
    let rows = sweep_rows(cfg, bench, &grid)?;
    write_csv(out, &rows)?;
    let feasible = rows.iter().filter(|r| r.feasible).count();
    println!("{} grid points, {} feasible", rows.len(), feasible);
    Ok(())
}

#[derive(Serialize)]
struct MapRow {
    n: usize,
    d_in: usize,
    max_d_out: usize,
    feasible: bool,
}

pub fn cost_map(cfg: &RunConfig, n: &[usize], d_in: &[usize], out: &Path) -> Result<(), CliError> {
    if n.iter().chain(d_in).any(|&v| v == 0) {
        return Err(CliError::Config("map dimensions must be >= 1".into()));
    }
    let rows: Vec<MapRow> = cost::max_dout_map(n, d_in, cfg.budget_bytes)
        .into_iter()
        .map(|FeasibilityPoint { n, d_in, max_d_out }| MapRow {
            n,
            d_in,
            max_d_out: max_d_out.unwrap_or(0),
            feasible: max_d_out.is_some(),
        })
        .collect();
    write_csv(out, &rows)
}

#[derive(Serialize)]
struct FitReport {
    structural_fit: MatmulPoly,
    silicon_fit: MatmulPoly,
    samples: usize,
    violations: Vec<ModelViolation>,
}

const FIT_N: [usize; 6] = [16, 32, 64, 128, 256, 512];
const FIT_D: [usize; 6] = [16, 32, 64, 128, 256, 390];

pub fn fit(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let samples: Vec<(usize, usize, f64)> = FIT_N
        .iter()
        .flat_map(|&n| FIT_D.iter().map(move |&d| (n, d, mac_array::structural_cycles(d, n) as f64)))
        .collect();
    let structural_fit = cost::fit_matmul_poly(&samples)?;
    let violations = cost::structural_vs_fitted(&cfg.coeffs.kws, &FIT_N, &FIT_D);
    println!(
        "structural N·D slope {:.4} vs silicon {:.4}; {} grid points where the array alone exceeds the fitted total",
        structural_fit.nd,
        cfg.coeffs.kws.mm.nd,
        violations.len()
    );
    write_json(
        out,
        &FitReport {
            structural_fit,
            silicon_fit: cfg.coeffs.kws.mm,
            samples: samples.len(),
            violations,
        },
    )
}

#[derive(Serialize)]
struct DemoCase {
    case: PlantCase,
    pd_rms: f64,
    adaptive_rms: f64,
    pd_second_half_rms: f64,
    adaptive_second_half_rms: f64,
    adaptive_mean_abs_error_per_trial: Vec<f64>,
    adaptive_firing_probability: f64,
    adaptive_energy_uj_per_step: f64,
}

#[derive(Serialize)]
struct DemoReport {
    seed: u64,
    trials: usize,
    trial_seconds: f64,
    cases: Vec<DemoCase>,
    /// Adaptive / PD second-half RMS in the aging case.
    aging_ratio: f64,
    normal_ratio: f64,
}

pub fn demo(cfg: &RunConfig, trials: usize, out: &Path) -> Result<(), CliError> {
    let base = ClosedLoopConfig {
        trials,
        ..cfg.closed_loop()
    };
    let runs: Vec<(PlantCase, ControllerKind)> = [PlantCase::Normal, PlantCase::Aging]
        .into_iter()
        .flat_map(|c| [ControllerKind::Pd, ControllerKind::Adaptive].map(|k| (c, k)))
        .collect();
    let pool = thread_pool(cfg)?;
    let logs: Vec<TrialLog> = pool.install(|| {
        runs.par_iter()
            .map(|&(case, controller)| {
                plant::run_trials(
                    &ClosedLoopConfig {
                        case,
                        controller,
                        ..base
                    },
                    cfg.seed,
                )
            })
            .collect::<Result<_, _>>()
    })?;
    let cases: Vec<DemoCase> = logs
        .chunks(2)
        .zip([PlantCase::Normal, PlantCase::Aging])
        .map(|(pair, case)| {
            let (pd, ad) = (&pair[0], &pair[1]);
            DemoCase {
                case,
                pd_rms: TrialLog::rms_error(&pd.rows),
                adaptive_rms: TrialLog::rms_error(&ad.rows),
                pd_second_half_rms: pd.second_half_rms(),
                adaptive_second_half_rms: ad.second_half_rms(),
                adaptive_mean_abs_error_per_trial: ad.mean_abs_error_per_trial(),
                adaptive_firing_probability: ad.total_spikes() as f64 / (ad.rows.len() * base.population.n) as f64,
                adaptive_energy_uj_per_step: ad.cost.energy_uj / ad.rows.len() as f64,
            }
        })
        .collect();
    let ratio = |c: &DemoCase| c.adaptive_second_half_rms / c.pd_second_half_rms;
    let report = DemoReport {
        seed: cfg.seed,
        trials,
        trial_seconds: base.trial_seconds,
        normal_ratio: ratio(&cases[0]),
        aging_ratio: ratio(&cases[1]),
        cases,
    };
    println!(
        "aging: adaptive/PD second-half RMS = {:.3}; normal: {:.3}",
        report.aging_ratio, report.normal_ratio
    );
    write_json(out, &report)
}
