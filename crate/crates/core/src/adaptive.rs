//! Adaptive-control population on one PE.
//!
//! Inputs are multiplied with fixed int8 encoders on the MAC array, a LIF
//! hidden layer spikes, and only the rows of spiking neurons are touched
//! when decoding the output and when applying the delta rule. Decoders are
//! stored as half-precision floats.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cost::{self, AdaptiveCoeffs, CostReport};
use crate::error::{Result, SimError};
use crate::mac_array::{self, MacJob};
use crate::quant::{self, Fixed16Weight, QuantMatrix};
use crate::rng;

/// Integer code standing for an input of 1.0 (input scale 1/127).
const INPUT_FULL_SCALE: i8 = 127;
const INPUT_SCALE: f64 = 1.0 / 127.0;

pub const F16D_MAGIC: &[u8; 4] = b"F16D";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub tau_rc: f64,
    pub tau_ref: f64,
    pub dt: f64,
    pub threshold: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau_rc: 0.02,
            tau_ref: 0.002,
            dt: 0.001,
            threshold: 1.0,
        }
    }
}

impl LifParams {
    pub fn refractory_steps(&self) -> u32 {
        (self.tau_ref / self.dt).round() as u32
    }

    /// Continuous-time steady-state rate for a constant input current.
    pub fn rate(&self, current: f64) -> f64 {
        if current <= self.threshold {
            return 0.0;
        }
        1.0 / (self.tau_ref + self.tau_rc * (current / (current - self.threshold)).ln())
    }

    /// Steady-state rate of the Euler-discretized neuron used in
    /// [`LifPopulation::neuron_update`].
    pub fn discrete_rate(&self, current: f64) -> f64 {
        if current <= self.threshold {
            return 0.0;
        }
        // v_k = J (1 - (1 - dt/tau)^k) crosses threshold after k steps.
        let decay = 1.0 - self.dt / self.tau_rc;
        let k = ((1.0 - self.threshold / current).ln() / decay.ln()).ceil().max(1.0);
        1.0 / ((k + f64::from(self.refractory_steps())) * self.dt)
    }

    /// Current that produces `rate` in the continuous model.
    pub fn current_for_rate(&self, rate: f64) -> f64 {
        self.threshold / (1.0 - ((self.tau_ref - 1.0 / rate) / self.tau_rc).exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifPopulation {
    pub voltage: Vec<f64>,
    pub refractory: Vec<u32>,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub params: LifParams,
}

impl LifPopulation {
    pub fn new(gain: Vec<f64>, bias: Vec<f64>, params: LifParams) -> Result<Self> {
        if gain.is_empty() || gain.len() != bias.len() {
            return Err(SimError::Shape("gain and bias must be non-empty and equal length".into()));
        }
        if !(params.dt > 0.0 && params.tau_rc > 0.0 && params.tau_ref >= 0.0) {
            return Err(SimError::InvalidParam("LIF time constants must be positive".into()));
        }
        let n = gain.len();
        Ok(Self {
            voltage: vec![0.0; n],
            refractory: vec![0; n],
            gain,
            bias,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gain.is_empty()
    }

    pub fn reset(&mut self) {
        self.voltage.fill(0.0);
        self.refractory.fill(0);
    }

    /// Advance every neuron by one `dt`.
    pub fn neuron_update(&mut self, currents: &[f64]) -> Vec<bool> {
        assert_eq!(currents.len(), self.len(), "one current per neuron");
        let p = self.params;
        let leak = p.dt / p.tau_rc;
        let ref_steps = p.refractory_steps();
        let mut spikes = vec![false; self.len()];
        for (i, &j) in currents.iter().enumerate() {
            if self.refractory[i] > 0 {
                self.refractory[i] -= 1;
                continue;
            }
            let v = (self.voltage[i] + (j - self.voltage[i]) * leak).max(0.0);
            if v >= p.threshold {
                spikes[i] = true;
                self.voltage[i] = 0.0;
                self.refractory[i] = ref_steps;
            } else {
                self.voltage[i] = v;
            }
        }
        spikes
    }
}

/// Fixed input weights: `d_in` encoder rows plus a bias row, int8.
///
/// Column `j` holds neuron `j`'s encoder; the bias row holds `bias_j /
/// gain_j` and is driven by a constant full-scale input, so the MAC result
/// already contains the bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderMatrix {
    matrix: QuantMatrix,
}

impl EncoderMatrix {
    /// `matrix` is `(d_in + 1) × n` with the bias row last.
    pub fn from_quant(matrix: QuantMatrix) -> Result<Self> {
        if matrix.rows() < 2 {
            return Err(SimError::Shape("encoder needs at least one input row and a bias row".into()));
        }
        Ok(Self { matrix })
    }

    /// Quantize real encoders (`n` rows of `d_in`) and per-neuron
    /// `bias / gain` terms with stochastic rounding.
    pub fn quantize(encoders: &[Vec<f64>], bias_over_gain: &[f64], seed: u64) -> Result<Self> {
        let n = encoders.len();
        let d_in = encoders.first().map_or(0, Vec::len);
        if n == 0 || d_in == 0 || bias_over_gain.len() != n || encoders.iter().any(|e| e.len() != d_in) {
            return Err(SimError::Shape("encoders must be n × d_in with one bias per neuron".into()));
        }
        let mut values = vec![0.0; (d_in + 1) * n];
        for (j, e) in encoders.iter().enumerate() {
            for (i, &v) in e.iter().enumerate() {
                values[i * n + j] = v;
            }
            values[d_in * n + j] = bias_over_gain[j];
        }
        let scale = quant::default_scale(&values);
        Self::from_quant(quant::quantize_stochastic(&values, d_in + 1, n, scale, seed)?)
    }

    pub fn d_in(&self) -> usize {
        self.matrix.rows() - 1
    }

    pub fn n(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &QuantMatrix {
        &self.matrix
    }

    /// Real encoder entry `(input, neuron)`; `input == d_in` is the bias row.
    pub fn real(&self, input: usize, neuron: usize) -> f64 {
        self.matrix.real(input, neuron)
    }
}

/// Range-check and convert a real input vector to int8, appending the
/// constant bias input.
pub fn quantize_input(x: &[f64]) -> Vec<i8> {
    x.iter()
        .map(|&v| quant::quantize_nearest(v.clamp(-1.0, 1.0), INPUT_SCALE))
        .chain(std::iter::once(INPUT_FULL_SCALE))
        .collect()
}

/// Neuron input currents for input `x` (entries in `[-1, 1]`; values
/// outside are saturated).
pub fn input_process(enc: &EncoderMatrix, gain: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != enc.d_in() {
        return Err(SimError::Shape(format!("input has {} dims, encoder expects {}", x.len(), enc.d_in())));
    }
    if gain.len() != enc.n() {
        return Err(SimError::Shape("one gain per neuron".into()));
    }
    let xq = quantize_input(x);
    let r = mac_array::mac_multiply(&MacJob::new(&xq, &enc.matrix)?)?;
    let unit = enc.matrix.scale() * INPUT_SCALE;
    Ok(r
        .acc
        .iter()
        .zip(gain)
        .map(|(&a, &g)| g * f64::from(a) * unit)
        .collect())
}

/// Learned output weights, `n × d_out`, half precision.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMatrix {
    n: usize,
    d_out: usize,
    omega: Vec<Fixed16Weight>,
    pub alpha: f64,
}

impl DecoderMatrix {
    pub fn zeros(n: usize, d_out: usize, alpha: f64) -> Result<Self> {
        if n == 0 || d_out == 0 {
            return Err(SimError::Shape("decoder needs n >= 1 and d_out >= 1".into()));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(SimError::InvalidParam(format!("learning rate {alpha} must be finite and >= 0")));
        }
        Ok(Self {
            n,
            d_out,
            omega: vec![Fixed16Weight::ZERO; n * d_out],
            alpha,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn get(&self, i: usize, j: usize) -> Fixed16Weight {
        self.omega[i * self.d_out + j]
    }

    pub fn set(&mut self, i: usize, j: usize, w: Fixed16Weight) {
        self.omega[i * self.d_out + j] = w;
    }

    pub fn row(&self, i: usize) -> &[Fixed16Weight] {
        &self.omega[i * self.d_out..(i + 1) * self.d_out]
    }

    pub fn is_zero(&self) -> bool {
        self.omega.iter().all(|w| w.to_f64() == 0.0)
    }

    /// `"F16D"`, u32 n, u32 d_out, f64 alpha, then `n·d_out` little-endian
    /// f16 bit patterns.
    pub fn write_f16<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(F16D_MAGIC)?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&(self.d_out as u32).to_le_bytes())?;
        w.write_all(&self.alpha.to_le_bytes())?;
        for v in &self.omega {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_f16<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 20];
        r.read_exact(&mut head)
            .map_err(|_| SimError::Format("truncated F16D header".into()))?;
        if &head[0..4] != F16D_MAGIC {
            return Err(SimError::Format("bad magic, expected \"F16D\"".into()));
        }
        let n = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let d_out = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let alpha = f64::from_le_bytes(head[12..20].try_into().unwrap());
        let mut dec = Self::zeros(n, d_out, alpha).map_err(|e| SimError::Format(e.to_string()))?;
        let mut payload = vec![0u8; 2 * n * d_out];
        r.read_exact(&mut payload)
            .map_err(|_| SimError::Format("truncated F16D payload".into()))?;
        for (slot, chunk) in dec.omega.iter_mut().zip(payload.chunks_exact(2)) {
            *slot = Fixed16Weight::from_bits(u16::from_le_bytes([chunk[0], chunk[1]]))?;
        }
        Ok(dec)
    }
}

/// Sum the decoder rows of the neurons that spiked. One spike contributes
/// its row once.
pub fn output_process(dec: &DecoderMatrix, spikes: &[bool]) -> Vec<f64> {
    assert_eq!(spikes.len(), dec.n, "one spike flag per neuron");
    let mut y = vec![0.0; dec.d_out];
    for (i, _) in spikes.iter().enumerate().filter(|(_, &s)| s) {
        for (acc, w) in y.iter_mut().zip(dec.row(i)) {
            *acc += w.to_f64();
        }
    }
    y
}

/// Delta rule on the rows of spiking neurons: `ω_ij -= α·E_j`.
///
/// `error` follows the decoded-output convention (output minus desired),
/// so the update moves the output against the error.
pub fn weight_update(dec: &mut DecoderMatrix, spikes: &[bool], error: &[f64]) {
    assert_eq!(spikes.len(), dec.n, "one spike flag per neuron");
    assert_eq!(error.len(), dec.d_out, "one error per output dimension");
    if dec.alpha == 0.0 {
        return;
    }
    let d_out = dec.d_out;
    for (i, _) in spikes.iter().enumerate().filter(|(_, &s)| s) {
        for (j, &e) in error.iter().enumerate() {
            let slot = &mut dec.omega[i * d_out + j];
            *slot = Fixed16Weight::saturating(slot.to_f64() - dec.alpha * e);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationConfig {
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub lif: LifParams,
    /// Rates at the preferred direction, drawn uniformly from this range.
    pub max_rate_hz: (f64, f64),
    /// Intercepts drawn uniformly from this open range.
    pub intercepts: (f64, f64),
    /// Mean rate over the input cube `[-1, 1]^d_in` to calibrate to;
    /// `None` keeps the raw draw.
    pub target_rate_hz: Option<f64>,
    pub alpha: f64,
    pub use_mac: bool,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            n: 256,
            d_in: 2,
            d_out: 1,
            lif: LifParams::default(),
            max_rate_hz: (100.0, 200.0),
            intercepts: (-1.0, 1.0),
            target_rate_hz: Some(130.0),
            alpha: 1e-4,
            use_mac: true,
        }
    }
}

/// Encoders, LIF state and decoders of one PE, plus its cost model.
#[derive(Debug, Clone)]
pub struct AdaptivePopulation {
    pub encoder: EncoderMatrix,
    pub lif: LifPopulation,
    pub decoder: DecoderMatrix,
    pub use_mac: bool,
    pub coeffs: AdaptiveCoeffs,
    /// Intercept shift applied by rate calibration.
    pub intercept_shift: f64,
    /// Mean rate over the calibration inputs after calibration, Hz.
    pub calibrated_rate_hz: f64,
}

/// Random unit vectors.
fn random_encoders<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Gain and bias such that the neuron starts firing at `intercept` and
/// fires at `max_rate` for a unit input along its encoder.
pub fn gain_bias(lif: &LifParams, max_rate: f64, intercept: f64) -> (f64, f64) {
    let j_max = lif.current_for_rate(max_rate);
    let gain = (j_max - lif.threshold) / (1.0 - intercept);
    (gain, lif.threshold - gain * intercept)
}

const CALIBRATION_SAMPLES: usize = 512;

fn mean_rate(lif: &LifParams, encoders: &[Vec<f64>], gb: &[(f64, f64)], samples: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for x in samples {
        for (e, &(g, b)) in encoders.iter().zip(gb) {
            let proj: f64 = e.iter().zip(x).map(|(a, b)| a * b).sum();
            total += lif.discrete_rate(g * proj + b);
        }
    }
    total / (samples.len() * encoders.len()) as f64
}

impl AdaptivePopulation {
    /// Draw a population from `seed`. With a target rate, every intercept
    /// is lowered by a common offset (found by bisection) until the mean
    /// rate over uniform inputs matches the target.
    pub fn build(config: &PopulationConfig, seed: u64) -> Result<Self> {
        if config.n == 0 || config.d_in == 0 || config.d_out == 0 {
            return Err(SimError::Shape("population dimensions must be >= 1".into()));
        }
        let (r_lo, r_hi) = config.max_rate_hz;
        let max_discrete = 1.0 / ((1.0 + f64::from(config.lif.refractory_steps())) * config.lif.dt);
        if !(r_lo > 0.0 && r_lo <= r_hi && r_hi < max_discrete) {
            return Err(SimError::InvalidParam(format!(
                "max rate range ({r_lo}, {r_hi}) must lie in (0, {max_discrete:.1}) Hz"
            )));
        }
        let (c_lo, c_hi) = config.intercepts;
        if !(-1.0..1.0).contains(&c_lo) || !(c_lo < c_hi && c_hi <= 1.0) {
            return Err(SimError::InvalidParam(format!("intercept range ({c_lo}, {c_hi}) must lie in [-1, 1]")));
        }

        let mut r = rng::substream(seed, 10);
        let encoders = random_encoders(&mut r, config.n, config.d_in);
        let max_rates: Vec<f64> = (0..config.n).map(|_| r.random_range(r_lo..=r_hi)).collect();
        let intercepts: Vec<f64> = (0..config.n)
            .map(|_| {
                let c: f64 = r.random_range(c_lo..c_hi);
                // keep clear of a singular gain at intercept 1
                c.min(0.999)
            })
            .collect();
        let samples: Vec<Vec<f64>> = (0..CALIBRATION_SAMPLES)
            .map(|_| (0..config.d_in).map(|_| r.random_range(-1.0..=1.0)).collect())
            .collect();

        let lif = config.lif;
        // Gains stay at their drawn values; the shift only lowers each
        // neuron's threshold point along its encoder.
        let params_for = |shift: f64| -> Vec<(f64, f64)> {
            max_rates
                .iter()
                .zip(&intercepts)
                .map(|(&m, &c)| {
                    let (g, _) = gain_bias(&lif, m, c);
                    (g, lif.threshold - g * (c - shift))
                })
                .collect()
        };

        let mut shift = 0.0;
        if let Some(target) = config.target_rate_hz {
            let (mut lo, mut hi) = (-2.0, 2.0);
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if mean_rate(&lif, &encoders, &params_for(mid), &samples) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            shift = 0.5 * (lo + hi);
        }
        let gb = params_for(shift);
        let calibrated_rate_hz = mean_rate(&lif, &encoders, &gb, &samples);
        let (gain, bias): (Vec<f64>, Vec<f64>) = gb.into_iter().unzip();
        let bias_over_gain: Vec<f64> = gain.iter().zip(&bias).map(|(g, b)| b / g).collect();

        Ok(Self {
            encoder: EncoderMatrix::quantize(&encoders, &bias_over_gain, seed ^ 0x5eed_0e0c)?,
            lif: LifPopulation::new(gain, bias, lif)?,
            decoder: DecoderMatrix::zeros(config.n, config.d_out, config.alpha)?,
            use_mac: config.use_mac,
            coeffs: AdaptiveCoeffs::default(),
            intercept_shift: shift,
            calibrated_rate_hz,
        })
    }

    pub fn n(&self) -> usize {
        self.lif.len()
    }

    /// Input processing, neuron update and output processing for one step.
    pub fn forward(&mut self, x: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
        let currents = input_process(&self.encoder, &self.lif.gain, x)?;
        let spikes = self.lif.neuron_update(&currents);
        let y = output_process(&self.decoder, &spikes);
        Ok((y, spikes))
    }

    pub fn learn(&mut self, spikes: &[bool], error: &[f64]) {
        weight_update(&mut self.decoder, spikes, error);
    }

    /// Modeled cost of one step with `spike_count` spikes.
    pub fn step_cost(&self, spike_count: usize, pj_per_cycle: f64, clock_hz: f64) -> CostReport {
        let n = self.n();
        let p = spike_count as f64 / n as f64;
        let cycles = self
            .coeffs
            .cycles(n, self.encoder.d_in(), self.decoder.d_out(), p, self.use_mac);
        CostReport::new(
            cycles,
            cost::adaptive_memory(n, self.encoder.d_in(), self.decoder.d_out()),
            pj_per_cycle,
            clock_hz,
        )
    }

    /// Encoder as QM01 followed by the decoder as F16D.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        self.encoder.matrix.write_qm01(w)?;
        self.decoder.write_f16(w)
    }

    /// Load decoders from a snapshot whose encoder matches this population.
    pub fn restore_snapshot<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let enc = QuantMatrix::read_qm01(r)?;
        if enc != self.encoder.matrix {
            return Err(SimError::Format("snapshot encoder does not match this population".into()));
        }
        let dec = DecoderMatrix::read_f16(r)?;
        if dec.n != self.decoder.n || dec.d_out != self.decoder.d_out {
            return Err(SimError::Format("snapshot decoder shape mismatch".into()));
        }
        self.decoder = dec;
        Ok(())
    }
}
