//! Analytical cycle, memory and energy models for one PE.
//!
//! Cycle counts are the fitted polynomials measured on silicon; they include
//! the Arm-side pre/post-processing around each MAC job, so they are not the
//! same quantity as [`crate::mac_array::structural_cycles`]. Memory models
//! count bytes of network data in SRAM. Energy is linear in active cycles.

use std::ops::{Add, AddAssign};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::mac_array;

/// `constant + n·N + nd·N·D + d·D`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatmulPoly {
    pub constant: f64,
    pub n: f64,
    pub nd: f64,
    pub d: f64,
}

impl MatmulPoly {
    pub fn eval(&self, n: usize, d: usize) -> f64 {
        let (n, d) = (n as f64, d as f64);
        self.constant + self.n * n + self.nd * n * d + self.d * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KwsCoeffs {
    pub mm: MatmulPoly,
    /// ReLU update: `relu_n·N + relu_constant`
    pub relu_n: f64,
    pub relu_constant: f64,
}

impl Default for KwsCoeffs {
    fn default() -> Self {
        Self {
            mm: MatmulPoly {
                constant: 74.0,
                n: 5.38,
                nd: 0.13,
                d: 24.0,
            },
            relu_n: 17.70,
            relu_constant: 117.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveCoeffs {
    pub input_mac: MatmulPoly,
    pub input_no_mac: MatmulPoly,
    /// Neuron update: `neuron_n·N + neuron_np·N·P + neuron_constant`
    pub neuron_n: f64,
    pub neuron_np: f64,
    pub neuron_constant: f64,
    /// Output processing: `output_ndp·N·D_out·P + output_np·N·P`
    pub output_ndp: f64,
    pub output_np: f64,
    /// Weight update: `learning_ndp·N·D_out·P + learning_np·N·P`
    pub learning_ndp: f64,
    pub learning_np: f64,
}

impl Default for AdaptiveCoeffs {
    fn default() -> Self {
        Self {
            input_mac: MatmulPoly {
                constant: 131.21,
                n: 5.07,
                nd: 0.13,
                d: 35.79,
            },
            input_no_mac: MatmulPoly {
                constant: 102.52,
                n: 22.54,
                nd: 7.07,
                d: 25.54,
            },
            neuron_n: 28.19,
            neuron_np: -26.90,
            neuron_constant: 509.18,
            output_ndp: 5.8,
            output_np: 19.31,
            learning_ndp: 8.28,
            learning_np: 28.04,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleCoeffs {
    pub kws: KwsCoeffs,
    pub adaptive: AdaptiveCoeffs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KwsCycles {
    pub t_mm: f64,
    pub t_relu: f64,
    pub t_total: f64,
}

impl KwsCoeffs {
    pub fn cycles(&self, n: usize, d: usize) -> KwsCycles {
        let t_mm = self.mm.eval(n, d);
        let t_relu = self.relu_n * n as f64 + self.relu_constant;
        KwsCycles {
            t_mm,
            t_relu,
            t_total: t_mm + t_relu,
        }
    }
}

impl AdaptiveCoeffs {
    pub fn input(&self, n: usize, d_in: usize, use_mac: bool) -> f64 {
        if use_mac {
            self.input_mac.eval(n, d_in)
        } else {
            self.input_no_mac.eval(n, d_in)
        }
    }

    pub fn neuron(&self, n: usize, p: f64) -> f64 {
        let n = n as f64;
        self.neuron_n * n + self.neuron_np * n * p + self.neuron_constant
    }

    pub fn output(&self, n: usize, d_out: usize, p: f64) -> f64 {
        let (n, d_out) = (n as f64, d_out as f64);
        self.output_ndp * n * d_out * p + self.output_np * n * p
    }

    pub fn learning(&self, n: usize, d_out: usize, p: f64) -> f64 {
        let (n, d_out) = (n as f64, d_out as f64);
        self.learning_ndp * n * d_out * p + self.learning_np * n * p
    }

    pub fn cycles(&self, n: usize, d_in: usize, d_out: usize, p: f64, use_mac: bool) -> PhaseCycles {
        PhaseCycles {
            input: self.input(n, d_in, use_mac),
            neuron: self.neuron(n, p),
            output: self.output(n, d_out, p),
            learning: self.learning(n, d_out, p),
        }
    }
}

pub fn kws_cycles(n: usize, d: usize) -> KwsCycles {
    KwsCoeffs::default().cycles(n, d)
}

/// Per-phase cycles of one adaptive-control time step with the default
/// coefficients. `p` is the per-step firing probability.
pub fn adaptive_cycles(
    n: usize,
    d_in: usize,
    d_out: usize,
    p: f64,
    use_mac: bool,
) -> Result<PhaseCycles> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SimError::InvalidParam(format!(
            "firing probability {p} outside [0, 1]"
        )));
    }
    Ok(AdaptiveCoeffs::default().cycles(n, d_in, d_out, p, use_mac))
}

/// Cycles per phase. Keyword spotting books the matmul under `input` and
/// the ReLU update under `neuron`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseCycles {
    pub input: f64,
    pub neuron: f64,
    pub output: f64,
    pub learning: f64,
}

impl PhaseCycles {
    pub fn total(&self) -> f64 {
        self.input + self.neuron + self.output + self.learning
    }
}

impl Add for PhaseCycles {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            input: self.input + o.input,
            neuron: self.neuron + o.neuron,
            output: self.output + o.output,
            learning: self.learning + o.learning,
        }
    }
}

impl AddAssign for PhaseCycles {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// SRAM bytes per component.
///
/// `weights` is the int8 weight-plus-bias block (`M_w` for keyword spotting,
/// `M_ib` for adaptive control); `output` holds the f16 decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseBytes {
    pub weights: usize,
    pub output: usize,
    pub input_current: usize,
    pub neuron: usize,
}

impl PhaseBytes {
    pub fn total(&self) -> usize {
        self.weights + self.output + self.input_current + self.neuron
    }
}

/// Keyword-spotting layer footprint: int8 weights and biases plus one
/// 32-bit accumulator per neuron.
pub fn kws_memory(n: usize, d: usize) -> PhaseBytes {
    PhaseBytes {
        weights: (d + 1) * n,
        output: 0,
        input_current: 4 * n,
        neuron: 0,
    }
}

/// Adaptive-control population footprint.
pub fn adaptive_memory(n: usize, d_in: usize, d_out: usize) -> PhaseBytes {
    PhaseBytes {
        weights: (d_in + 1) * n,
        output: 2 * d_out * n,
        input_current: 4 * n,
        neuron: 8 * n,
    }
}

/// Largest `d_out` whose adaptive footprint fits in `budget`, or `None`
/// when not even one output dimension fits.
pub fn max_dout(n: usize, d_in: usize, budget: usize) -> Option<usize> {
    let fixed = adaptive_memory(n, d_in, 0).total();
    let free = budget.checked_sub(fixed)?;
    let d_out = free / (2 * n);
    (d_out >= 1).then_some(d_out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FeasibilityPoint {
    pub n: usize,
    pub d_in: usize,
    pub max_d_out: Option<usize>,
}

/// Max output dimensions over an `n × d_in` grid (row-major in `n`).
pub fn max_dout_map(n_list: &[usize], d_in_list: &[usize], budget: usize) -> Vec<FeasibilityPoint> {
    n_list
        .iter()
        .flat_map(|&n| {
            d_in_list.iter().map(move |&d_in| FeasibilityPoint {
                n,
                d_in,
                max_d_out: max_dout(n, d_in, budget),
            })
        })
        .collect()
}

/// Active energy in µJ.
pub fn energy_model(cycles: f64, pj_per_cycle: f64) -> f64 {
    cycles * pj_per_cycle * 1e-6
}

/// Per-PE `(neurons, inputs)` of the keyword-spotting network after the
/// first hidden layer is split in two.
pub const KWS_PE_DIMS: [(usize, usize); 3] = [(128, 390), (128, 390), (256, 256)];
pub const KWS_STEPS_PER_INFERENCE: usize = 10;
/// Measured active energy per keyword-spotting inference, µJ.
pub const KWS_ENERGY_PER_INFERENCE_UJ: f64 = 7.1;
/// Step cycle bound the keyword-spotting PEs stay under.
pub const KWS_STEP_BOUND_CYCLES: f64 = 21_000.0;
/// Slack added on top of the bound to set the timer tick.
pub const KWS_STEP_MARGIN_CYCLES: f64 = 4_000.0;
/// Cycles available per 1 ms adaptive-control step at 250 MHz.
pub const ADAPTIVE_STEP_BUDGET_CYCLES: f64 = 250_000.0;

/// pJ per active cycle such that the keyword-spotting network on
/// `pe_dims` consumes exactly `energy_uj` per inference.
pub fn calibrate_pj_per_cycle(coeffs: &KwsCoeffs, pe_dims: &[(usize, usize)], energy_uj: f64) -> f64 {
    let cycles_per_step: f64 = pe_dims.iter().map(|&(n, d)| coeffs.cycles(n, d).t_total).sum();
    energy_uj * 1e6 / (cycles_per_step * KWS_STEPS_PER_INFERENCE as f64)
}

/// The default calibration constant (≈12.08 pJ/cycle).
pub fn default_pj_per_cycle() -> f64 {
    calibrate_pj_per_cycle(&KwsCoeffs::default(), &KWS_PE_DIMS, KWS_ENERGY_PER_INFERENCE_UJ)
}

/// Timer tick for a keyword-spotting step: the cycle bound (or the worst
/// PE if it is slower) plus the safety margin.
pub fn kws_step_period_cycles(worst_pe_cycles: f64) -> f64 {
    worst_pe_cycles.max(KWS_STEP_BOUND_CYCLES) + KWS_STEP_MARGIN_CYCLES
}

pub fn inferences_per_sec(step_period_cycles: f64, clock_hz: f64, steps_per_inference: usize) -> f64 {
    clock_hz / (step_period_cycles * steps_per_inference as f64)
}

/// Reference figures for the comparison platform. Annotation only.
pub mod reference {
    pub const LOIHI_KWS_INFERENCES_PER_SEC: f64 = 296.0;
    pub const LOIHI_KWS_ENERGY_PER_INFERENCE_UJ: f64 = 37.0;
    /// Step-duration ratio PE : Loihi at (d_in=1, d_out=1, n=1024).
    pub const STEP_TIME_RATIO_DIN1_N1024: (f64, f64) = (1.0, 0.37);
    /// Step-duration ratio PE : Loihi at (d_in=100, d_out=1, n=512).
    pub const STEP_TIME_RATIO_DIN100_N512: (f64, f64) = (0.49, 1.0);
    pub const ENERGY_RATIO_DIN1_N1024: (f64, f64) = (1.0, 0.81);
    pub const ENERGY_RATIO_DIN100_N512: (f64, f64) = (0.36, 1.0);
}

/// Cycles, bytes and modeled energy for one step (or an accumulation of
/// steps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub cycles: PhaseCycles,
    pub bytes: PhaseBytes,
    pub energy_uj: f64,
    pub clock_hz: f64,
}

impl CostReport {
    pub fn new(cycles: PhaseCycles, bytes: PhaseBytes, pj_per_cycle: f64, clock_hz: f64) -> Self {
        Self {
            cycles,
            bytes,
            energy_uj: energy_model(cycles.total(), pj_per_cycle),
            clock_hz,
        }
    }

    pub fn total_cycles(&self) -> f64 {
        self.cycles.total()
    }

    pub fn total_bytes(&self) -> usize {
        self.bytes.total()
    }

    pub fn seconds(&self) -> f64 {
        self.total_cycles() / self.clock_hz
    }

    /// Add another step's cycles and energy. The footprint is a property of
    /// the PE, not of time, so bytes keep the larger value.
    pub fn accumulate(&mut self, other: &CostReport) {
        self.cycles += other.cycles;
        self.energy_uj += other.energy_uj;
        self.bytes = PhaseBytes {
            weights: self.bytes.weights.max(other.bytes.weights),
            output: self.bytes.output.max(other.bytes.output),
            input_current: self.bytes.input_current.max(other.bytes.input_current),
            neuron: self.bytes.neuron.max(other.bytes.neuron),
        };
    }
}

/// A grid point where the array-only tile count exceeds the fitted
/// end-to-end matmul polynomial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelViolation {
    pub n: usize,
    pub d: usize,
    pub structural: u64,
    pub fitted: f64,
}

/// Compare structural MAC-array cycles with the fitted `T_mm` over a grid
/// and return every point where structural > fitted.
pub fn structural_vs_fitted(coeffs: &KwsCoeffs, n_list: &[usize], d_list: &[usize]) -> Vec<ModelViolation> {
    let mut out = Vec::new();
    for &n in n_list {
        for &d in d_list {
            let structural = mac_array::structural_cycles(d, n);
            let fitted = coeffs.mm.eval(n, d);
            if structural as f64 > fitted {
                out.push(ModelViolation {
                    n,
                    d,
                    structural,
                    fitted,
                });
            }
        }
    }
    out
}

/// Least-squares fit of `constant + n·N + nd·N·D + d·D` to `(n, d, cycles)`
/// samples.
pub fn fit_matmul_poly(samples: &[(usize, usize, f64)]) -> Result<MatmulPoly> {
    if samples.len() < 4 {
        return Err(SimError::InvalidParam(format!(
            "need at least 4 samples to fit 4 coefficients, got {}",
            samples.len()
        )));
    }
    let rows = samples.len();
    let design = DMatrix::from_fn(rows, 4, |r, c| {
        let (n, d, _) = samples[r];
        let (n, d) = (n as f64, d as f64);
        match c {
            0 => 1.0,
            1 => n,
            2 => n * d,
            _ => d,
        }
    });
    let target = DVector::from_iterator(rows, samples.iter().map(|s| s.2));
    let svd = design.svd(true, true);
    let x = svd
        .solve(&target, 1e-9)
        .map_err(|e| SimError::InvalidParam(format!("least-squares fit failed: {e}")))?;
    Ok(MatmulPoly {
        constant: x[0],
        n: x[1],
        nd: x[2],
        d: x[3],
    })
}
