//! Keyword-spotting MLP (390-256-256-29) mapped onto PEs.
//!
//! The two hidden layers run on simulated PEs: int8 MAC-array matmul, a
//! 32-bit bias add and ReLU requantization on the Arm core. A layer whose
//! footprint does not fit one PE's SRAM budget is split column-wise into
//! equal parts. The 29-way output layer runs in `f64` on the host.
//!
//! Network bundles are stored as:
//!
//! ```text
//! "KWS1"  f64 act1_scale  f64 act2_scale
//! QM01 layer1 weights (d_in × h1)
//! QM01 layer1 biases  (1 × h1)
//! QM01 layer2 weights (h1 × h2)
//! QM01 layer2 biases  (1 × h2)
//! QM01 output weights (h2 × out)
//! ```
//!
//! all little-endian. Frames are a single QM01 matrix of `d_in × steps`,
//! one column per time step; its scale is the input scale.

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::Serialize;

use crate::cost::{self, CostReport, KwsCoeffs, PhaseBytes, PhaseCycles};
use crate::error::{Result, SimError};
use crate::mac_array::{self, MacJob};
use crate::quant::{self, QuantMatrix};
use crate::rng;

pub const KWS_INPUTS: usize = 390;
pub const KWS_HIDDEN: usize = 256;
pub const KWS_OUTPUTS: usize = 29;
pub const KWS1_MAGIC: &[u8; 4] = b"KWS1";

/// One hidden layer: int8 weights, int8 biases and the activation scale
/// its ReLU output is requantized to.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: QuantMatrix,
    /// `1 × n`; the scale is the real value of one bias unit.
    pub bias: QuantMatrix,
    pub out_scale: f64,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn neurons(&self) -> usize {
        self.weights.cols()
    }

    /// Biases pre-scaled into accumulator units for inputs of `in_scale`.
    pub fn bias_acc(&self, in_scale: f64) -> Vec<i32> {
        let unit = self.weights.scale() * in_scale;
        (0..self.neurons())
            .map(|j| (self.bias.real(0, j) / unit).round_ties_even() as i32)
            .collect()
    }

    /// Real value of one accumulator unit.
    pub fn acc_scale(&self, in_scale: f64) -> f64 {
        self.weights.scale() * in_scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KwsNetwork {
    pub layer1: DenseLayer,
    pub layer2: DenseLayer,
    /// Host-side output weights, row-major `h2 × out`.
    pub output: QuantMatrix,
}

impl KwsNetwork {
    pub fn new(layer1: DenseLayer, layer2: DenseLayer, output: QuantMatrix) -> Result<Self> {
        let check = |cond: bool, what: &str| {
            if cond {
                Ok(())
            } else {
                Err(SimError::Shape(what.to_string()))
            }
        };
        check(layer1.bias.rows() == 1 && layer1.bias.cols() == layer1.neurons(), "layer1 bias must be 1 × h1")?;
        check(layer2.bias.rows() == 1 && layer2.bias.cols() == layer2.neurons(), "layer2 bias must be 1 × h2")?;
        check(layer2.inputs() == layer1.neurons(), "layer2 inputs must equal layer1 neurons")?;
        check(output.rows() == layer2.neurons(), "output rows must equal layer2 neurons")?;
        for s in [layer1.out_scale, layer2.out_scale] {
            if !(s.is_finite() && s > 0.0) {
                return Err(SimError::InvalidScale(s));
            }
        }
        Ok(Self {
            layer1,
            layer2,
            output,
        })
    }

    /// Seeded random network with the 390-256-256-29 dimensions.
    pub fn random(seed: u64) -> Result<Self> {
        Self::random_with_dims(seed, KWS_INPUTS, KWS_HIDDEN, KWS_HIDDEN, KWS_OUTPUTS)
    }

    /// Seeded random network of arbitrary size.
    ///
    /// Weights are uniform with variance `1/fan_in`, so with inputs of RMS
    /// `1/√3` the pre-activation RMS of layer 1 is also `1/√3`, and that of
    /// layer 2 is `1/√6` (ReLU halves the second moment). Activation scales
    /// map 3 RMS onto the int8 range.
    pub fn random_with_dims(seed: u64, d_in: usize, h1: usize, h2: usize, out: usize) -> Result<Self> {
        let mut r = rng::substream(seed, 1);
        let mut layer = |fan_in: usize, n: usize, stream: u64, pre_rms: f64| -> Result<DenseLayer> {
            let limit = (3.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = Uniform::new_inclusive(-limit, limit)
                .unwrap()
                .sample_iter(&mut r)
                .take(fan_in * n)
                .collect();
            let b: Vec<f64> = (0..n).map(|_| r.random_range(-0.1..0.1)).collect();
            Ok(DenseLayer {
                weights: quant::quantize_stochastic(&w, fan_in, n, quant::default_scale(&w), seed ^ (stream << 32))?,
                bias: quant::quantize_stochastic(&b, 1, n, quant::default_scale(&b), seed ^ ((stream + 1) << 32))?,
                out_scale: 3.0 * pre_rms / 127.0,
            })
        };
        let rms_in = (1.0f64 / 3.0).sqrt();
        let layer1 = layer(d_in, h1, 2, rms_in)?;
        let layer2 = layer(h1, h2, 4, rms_in / 2f64.sqrt())?;
        let limit = (3.0 / h2 as f64).sqrt();
        let w: Vec<f64> = (0..h2 * out).map(|_| r.random_range(-limit..limit)).collect();
        let output = quant::quantize_stochastic(&w, h2, out, quant::default_scale(&w), seed ^ (6 << 32))?;
        Self::new(layer1, layer2, output)
    }

    pub fn inputs(&self) -> usize {
        self.layer1.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.output.cols()
    }

    /// `(inputs, neurons)` of each PE-resident layer.
    pub fn layer_dims(&self) -> [(usize, usize); 2] {
        [
            (self.layer1.inputs(), self.layer1.neurons()),
            (self.layer2.inputs(), self.layer2.neurons()),
        ]
    }

    pub fn write_bundle<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(KWS1_MAGIC)?;
        w.write_all(&self.layer1.out_scale.to_le_bytes())?;
        w.write_all(&self.layer2.out_scale.to_le_bytes())?;
        for m in [
            &self.layer1.weights,
            &self.layer1.bias,
            &self.layer2.weights,
            &self.layer2.bias,
            &self.output,
        ] {
            m.write_qm01(w)?;
        }
        Ok(())
    }

    pub fn read_bundle<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 20];
        r.read_exact(&mut head)
            .map_err(|_| SimError::Format("truncated KWS1 header".into()))?;
        if &head[0..4] != KWS1_MAGIC {
            return Err(SimError::Format("bad magic, expected \"KWS1\"".into()));
        }
        let act1 = f64::from_le_bytes(head[4..12].try_into().unwrap());
        let act2 = f64::from_le_bytes(head[12..20].try_into().unwrap());
        let w1 = QuantMatrix::read_qm01(r)?;
        let b1 = QuantMatrix::read_qm01(r)?;
        let w2 = QuantMatrix::read_qm01(r)?;
        let b2 = QuantMatrix::read_qm01(r)?;
        let out = QuantMatrix::read_qm01(r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(SimError::Format(format!("{} trailing bytes after KWS1 bundle", rest.len())));
        }
        Self::new(
            DenseLayer {
                weights: w1,
                bias: b1,
                out_scale: act1,
            },
            DenseLayer {
                weights: w2,
                bias: b2,
                out_scale: act2,
            },
            out,
        )
        .map_err(|e| SimError::Format(e.to_string()))
    }
}

/// Seeded random input frames, `d_in × steps`, input scale 1/127.
pub fn random_frames(seed: u64, d_in: usize, steps: usize) -> QuantMatrix {
    let mut r = rng::substream(seed, 2);
    let data = (0..d_in * steps).map(|_| r.random_range(-127i8..=127)).collect();
    QuantMatrix::new(d_in, steps, 1.0 / 127.0, data).expect("valid shape and scale")
}

/// Split a frames matrix into per-step input vectors.
pub fn frames_to_steps(frames: &QuantMatrix) -> Vec<Vec<i8>> {
    (0..frames.cols())
        .map(|t| (0..frames.rows()).map(|i| frames.get(i, t)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PeAssignment {
    pub pe_id: usize,
    /// 1-based hidden-layer index.
    pub layer: usize,
    pub neurons: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PePlacement {
    pub assignments: Vec<PeAssignment>,
    pub sram_budget_bytes: usize,
}

impl PePlacement {
    pub fn pe_count(&self) -> usize {
        self.assignments.len()
    }

    pub fn layer(&self, layer: usize) -> impl Iterator<Item = &PeAssignment> {
        self.assignments.iter().filter(move |a| a.layer == layer)
    }
}

/// Assign layers given as `(inputs, neurons)` to PEs. Each layer gets the
/// fewest equal column slices whose footprint fits `budget`.
pub fn place_layers(layers: &[(usize, usize)], budget: usize) -> Result<PePlacement> {
    if budget == 0 {
        return Err(SimError::InvalidParam("SRAM budget must be > 0".into()));
    }
    let mut assignments = Vec::new();
    for (idx, &(d, n)) in layers.iter().enumerate() {
        let layer = idx + 1;
        let single = cost::kws_memory(1, d).total();
        if single > budget {
            return Err(SimError::PlacementInfeasible {
                layer,
                bytes: single,
                budget,
            });
        }
        let parts = (1..=n)
            .find(|&k| cost::kws_memory(n.div_ceil(k), d).total() <= budget)
            .expect("k = n always fits once a single neuron fits");
        let width = n.div_ceil(parts);
        let mut start = 0;
        while start < n {
            let end = (start + width).min(n);
            assignments.push(PeAssignment {
                pe_id: assignments.len(),
                layer,
                neurons: start..end,
            });
            start = end;
        }
    }
    Ok(PePlacement {
        assignments,
        sram_budget_bytes: budget,
    })
}

pub fn place_network(net: &KwsNetwork, budget: usize) -> Result<PePlacement> {
    place_layers(&net.layer_dims(), budget)
}

/// Per-PE figures for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeStats {
    pub pe_id: usize,
    pub layer: usize,
    pub neurons: usize,
    pub inputs: usize,
    /// Fitted matmul + ReLU cycles for one time step.
    pub step_cycles: f64,
    /// MAC-array feed cycles for one time step.
    pub mac_tile_cycles: u64,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceResult {
    /// One row of logits per time step.
    pub logits: Vec<Vec<f64>>,
    pub per_pe: Vec<PeStats>,
    pub step_cycles_worst: f64,
    pub step_period_cycles: f64,
    pub inferences_per_sec_modeled: f64,
    pub energy_uj_modeled: f64,
    /// All PEs, all steps.
    pub cost: CostReport,
}

#[derive(Debug, Clone, Copy)]
pub struct KwsRunConfig {
    pub coeffs: KwsCoeffs,
    pub clock_hz: f64,
    pub pj_per_cycle: f64,
}

impl Default for KwsRunConfig {
    fn default() -> Self {
        Self {
            coeffs: KwsCoeffs::default(),
            clock_hz: crate::CLOCK_HZ,
            pj_per_cycle: cost::default_pj_per_cycle(),
        }
    }
}

/// A PE's resident slice of one layer.
struct PeProgram {
    assignment: PeAssignment,
    weights: QuantMatrix,
    bias_acc: Vec<i32>,
    acc_scale: f64,
    out_scale: f64,
}

impl PeProgram {
    fn new(a: &PeAssignment, layer: &DenseLayer, in_scale: f64) -> Result<Self> {
        let bias_acc = layer.bias_acc(in_scale)[a.neurons.clone()].to_vec();
        Ok(Self {
            assignment: a.clone(),
            weights: layer.weights.column_block(a.neurons.clone())?,
            bias_acc,
            acc_scale: layer.acc_scale(in_scale),
            out_scale: layer.out_scale,
        })
    }

    /// One step on this PE: MAC job, bias add, ReLU requantization.
    fn step(&self, input: &[i8]) -> Result<(Vec<i8>, u64)> {
        let r = mac_array::mac_multiply(&MacJob::new(input, &self.weights)?)?;
        let acc: Vec<i32> = r
            .acc
            .iter()
            .zip(&self.bias_acc)
            .map(|(&a, &b)| a.saturating_add(b))
            .collect();
        Ok((
            quant::requantize_relu(&acc, self.acc_scale, self.out_scale),
            r.tile_cycles,
        ))
    }
}

/// Host-side output layer.
pub fn output_logits(net: &KwsNetwork, hidden2: &[i8]) -> Vec<f64> {
    let act = net.layer2.out_scale;
    (0..net.outputs())
        .map(|k| {
            hidden2
                .iter()
                .enumerate()
                .map(|(j, &h)| f64::from(h) * act * net.output.real(j, k))
                .sum()
        })
        .collect()
}

/// Run one inference window (10 frames for the default network).
pub fn run_inference(
    net: &KwsNetwork,
    placement: &PePlacement,
    frames: &QuantMatrix,
    config: &KwsRunConfig,
) -> Result<InferenceResult> {
    if frames.rows() != net.inputs() {
        return Err(SimError::Shape(format!(
            "frames have {} features, network expects {}",
            frames.rows(),
            net.inputs()
        )));
    }
    if frames.cols() != cost::KWS_STEPS_PER_INFERENCE {
        return Err(SimError::Shape(format!(
            "an inference window is {} frames, got {}",
            cost::KWS_STEPS_PER_INFERENCE,
            frames.cols()
        )));
    }
    check_placement(net, placement)?;

    let in_scale = frames.scale();
    let programs1: Vec<PeProgram> = placement
        .layer(1)
        .map(|a| PeProgram::new(a, &net.layer1, in_scale))
        .collect::<Result<_>>()?;
    let programs2: Vec<PeProgram> = placement
        .layer(2)
        .map(|a| PeProgram::new(a, &net.layer2, net.layer1.out_scale))
        .collect::<Result<_>>()?;

    let mut mac_cycles = vec![0u64; placement.pe_count()];
    let mut logits = Vec::with_capacity(frames.cols());
    for input in frames_to_steps(frames) {
        let mut hidden1 = vec![0i8; net.layer1.neurons()];
        for p in &programs1 {
            let (out, cycles) = p.step(&input)?;
            hidden1[p.assignment.neurons.clone()].copy_from_slice(&out);
            mac_cycles[p.assignment.pe_id] = cycles;
        }
        let mut hidden2 = vec![0i8; net.layer2.neurons()];
        for p in &programs2 {
            let (out, cycles) = p.step(&hidden1)?;
            hidden2[p.assignment.neurons.clone()].copy_from_slice(&out);
            mac_cycles[p.assignment.pe_id] = cycles;
        }
        logits.push(output_logits(net, &hidden2));
    }

    let steps = frames.cols() as f64;
    let mut total = CostReport::new(PhaseCycles::default(), PhaseBytes::default(), config.pj_per_cycle, config.clock_hz);
    let per_pe: Vec<PeStats> = programs1
        .iter()
        .chain(&programs2)
        .map(|p| {
            let n = p.assignment.neurons.len();
            let d = p.weights.rows();
            let c = config.coeffs.cycles(n, d);
            let bytes = cost::kws_memory(n, d);
            let step = PhaseCycles {
                input: c.t_mm,
                neuron: c.t_relu,
                ..Default::default()
            };
            let window = PhaseCycles {
                input: step.input * steps,
                neuron: step.neuron * steps,
                ..Default::default()
            };
            total.accumulate(&CostReport::new(window, bytes, config.pj_per_cycle, config.clock_hz));
            PeStats {
                pe_id: p.assignment.pe_id,
                layer: p.assignment.layer,
                neurons: n,
                inputs: d,
                step_cycles: c.t_total,
                mac_tile_cycles: mac_cycles[p.assignment.pe_id],
                bytes: bytes.total(),
            }
        })
        .collect();

    let worst = per_pe.iter().map(|p| p.step_cycles).fold(0.0, f64::max);
    let period = cost::kws_step_period_cycles(worst);
    Ok(InferenceResult {
        logits,
        step_cycles_worst: worst,
        step_period_cycles: period,
        inferences_per_sec_modeled: cost::inferences_per_sec(period, config.clock_hz, cost::KWS_STEPS_PER_INFERENCE),
        energy_uj_modeled: total.energy_uj,
        per_pe,
        cost: total,
    })
}

fn check_placement(net: &KwsNetwork, placement: &PePlacement) -> Result<()> {
    for (idx, &(d, n)) in net.layer_dims().iter().enumerate() {
        let mut covered = vec![false; n];
        for a in placement.layer(idx + 1) {
            if a.neurons.end > n {
                return Err(SimError::Shape(format!("PE {} range {:?} exceeds layer size {}", a.pe_id, a.neurons, n)));
            }
            let bytes = cost::kws_memory(a.neurons.len(), d).total();
            if bytes > placement.sram_budget_bytes {
                return Err(SimError::PlacementInfeasible {
                    layer: idx + 1,
                    bytes,
                    budget: placement.sram_budget_bytes,
                });
            }
            for c in &mut covered[a.neurons.clone()] {
                if *c {
                    return Err(SimError::Shape(format!("layer {} neuron assigned twice", idx + 1)));
                }
                *c = true;
            }
        }
        if !covered.iter().all(|&c| c) {
            return Err(SimError::Shape(format!("layer {} has unassigned neurons", idx + 1)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SRAM_BUDGET_BYTES;

    #[test]
    fn default_network_needs_three_pes() {
        let p = place_layers(&[(390, 256), (256, 256)], SRAM_BUDGET_BYTES).unwrap();
        let sizes: Vec<_> = p.assignments.iter().map(|a| (a.layer, a.neurons.len())).collect();
        assert_eq!(sizes, vec![(1, 128), (1, 128), (2, 256)]);
        assert_eq!(cost::kws_memory(256, 390).total(), 101_120);
    }

    #[test]
    fn toy_layer_fits_one_pe() {
        let p = place_layers(&[(10, 10)], SRAM_BUDGET_BYTES).unwrap();
        assert_eq!(p.pe_count(), 1);
        assert_eq!(p.assignments[0].neurons, 0..10);
    }

    #[test]
    fn infeasible_when_one_neuron_overflows() {
        let err = place_layers(&[(100, 4)], 100).unwrap_err();
        assert!(matches!(err, SimError::PlacementInfeasible { layer: 1, bytes: 105, budget: 100 }));
        assert!(place_layers(&[(1, 1)], 0).is_err());
    }

    #[test]
    fn uneven_split_keeps_every_part_in_budget() {
        let p = place_layers(&[(50, 1000)], 10_000).unwrap();
        let total: usize = p.assignments.iter().map(|a| a.neurons.len()).sum();
        assert_eq!(total, 1000);
        assert!(p
            .assignments
            .iter()
            .all(|a| cost::kws_memory(a.neurons.len(), 50).total() <= 10_000));
    }

    #[test]
    fn bundle_roundtrip() {
        let net = KwsNetwork::random_with_dims(3, 20, 8, 8, 5).unwrap();
        let mut buf = Vec::new();
        net.write_bundle(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"KWS1");
        let back = KwsNetwork::read_bundle(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        buf.push(0);
        assert!(KwsNetwork::read_bundle(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_wrong_frame_count() {
        let net = KwsNetwork::random_with_dims(1, 20, 8, 8, 5).unwrap();
        let p = place_network(&net, SRAM_BUDGET_BYTES).unwrap();
        let frames = random_frames(1, 20, 9);
        assert!(run_inference(&net, &p, &frames, &KwsRunConfig::default()).is_err());
    }

    #[test]
    fn rejects_bad_placement() {
        let net = KwsNetwork::random_with_dims(1, 20, 8, 8, 5).unwrap();
        let mut p = place_network(&net, SRAM_BUDGET_BYTES).unwrap();
        p.assignments[0].neurons = 0..4;
        let frames = random_frames(1, 20, 10);
        assert!(run_inference(&net, &p, &frames, &KwsRunConfig::default()).is_err());
    }
}
