//! Keyword-spotting runs checked against a straight-line reference: whole
//! layers, plain loops, no tiling, no PE split, same quantization.

use neurosim_core::cost;
use neurosim_core::kws::{self, KwsNetwork, KwsRunConfig};
use neurosim_core::quant::QuantMatrix;
use neurosim_core::SRAM_BUDGET_BYTES;

fn reference_layer(input: &[i8], w: &QuantMatrix, bias: &QuantMatrix, in_scale: f64, out_scale: f64) -> Vec<i8> {
    let unit = w.scale() * in_scale;
    (0..w.cols())
        .map(|j| {
            let mut acc: i64 = 0;
            for (i, &x) in input.iter().enumerate() {
                acc += i64::from(x) * i64::from(w.get(i, j));
            }
            acc += (bias.real(0, j) / unit).round_ties_even() as i64;
            let v = (acc.max(0) as f64 * unit / out_scale).round_ties_even();
            v.clamp(0.0, 127.0) as i8
        })
        .collect()
}

fn reference_logits(net: &KwsNetwork, frames: &QuantMatrix) -> Vec<Vec<f64>> {
    (0..frames.cols())
        .map(|t| {
            let x: Vec<i8> = (0..frames.rows()).map(|i| frames.get(i, t)).collect();
            let h1 = reference_layer(&x, &net.layer1.weights, &net.layer1.bias, frames.scale(), net.layer1.out_scale);
            let h2 = reference_layer(&h1, &net.layer2.weights, &net.layer2.bias, net.layer1.out_scale, net.layer2.out_scale);
            (0..net.output.cols())
                .map(|k| {
                    let mut s = 0.0;
                    for (j, &h) in h2.iter().enumerate() {
                        s += f64::from(h) * net.layer2.out_scale * net.output.real(j, k);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

#[test]
fn random_frames_match_reference_exactly() {
    for seed in [1u64, 7, 99] {
        let net = KwsNetwork::random(seed).unwrap();
        let placement = kws::place_network(&net, SRAM_BUDGET_BYTES).unwrap();
        assert_eq!(placement.pe_count(), 3);
        let frames = kws::random_frames(seed + 1000, 390, 10);
        let run = kws::run_inference(&net, &placement, &frames, &KwsRunConfig::default()).unwrap();
        assert_eq!(run.logits, reference_logits(&net, &frames));
    }
}

#[test]
fn activations_are_not_degenerate() {
    // The random network should neither saturate nor silence its layers,
    // otherwise the equivalence test above proves little.
    let net = KwsNetwork::random(5).unwrap();
    let frames = kws::random_frames(5, 390, 10);
    let x: Vec<i8> = (0..390).map(|i| frames.get(i, 0)).collect();
    let h1 = reference_layer(&x, &net.layer1.weights, &net.layer1.bias, frames.scale(), net.layer1.out_scale);
    let active = h1.iter().filter(|&&v| v > 0).count();
    let saturated = h1.iter().filter(|&&v| v == 127).count();
    assert!(active > 64 && active < 224, "active {active}");
    assert!(saturated < 16, "saturated {saturated}");
}

#[test]
fn split_layer_equals_unsplit() {
    let net = KwsNetwork::random(3).unwrap();
    let frames = kws::random_frames(4, 390, 10);
    let split = kws::place_network(&net, SRAM_BUDGET_BYTES).unwrap();
    let whole = kws::place_network(&net, 1 << 20).unwrap();
    assert_eq!(whole.pe_count(), 2);
    let cfg = KwsRunConfig::default();
    let a = kws::run_inference(&net, &split, &frames, &cfg).unwrap();
    let b = kws::run_inference(&net, &whole, &frames, &cfg).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn zero_frames_propagate_biases_only() {
    let net = KwsNetwork::random(11).unwrap();
    let frames = QuantMatrix::zeros(390, 10, 1.0 / 127.0).unwrap();
    let placement = kws::place_network(&net, SRAM_BUDGET_BYTES).unwrap();
    let run = kws::run_inference(&net, &placement, &frames, &KwsRunConfig::default()).unwrap();

    // Layer 1 output is requantized bias alone.
    let acc_unit = net.layer1.weights.scale() / 127.0;
    let h1: Vec<i8> = (0..256)
        .map(|j| {
            let b = (net.layer1.bias.real(0, j) / acc_unit).round_ties_even().max(0.0);
            (b * acc_unit / net.layer1.out_scale).round_ties_even().min(127.0) as i8
        })
        .collect();
    let h2 = reference_layer(&h1, &net.layer2.weights, &net.layer2.bias, net.layer1.out_scale, net.layer2.out_scale);
    let expected = kws::output_logits(&net, &h2);
    for row in &run.logits {
        assert_eq!(row, &expected);
    }
}

#[test]
fn modeled_step_cost_and_throughput() {
    let net = KwsNetwork::random(0).unwrap();
    let placement = kws::place_network(&net, SRAM_BUDGET_BYTES).unwrap();
    let frames = kws::random_frames(0, 390, 10);
    let run = kws::run_inference(&net, &placement, &frames, &KwsRunConfig::default()).unwrap();
    let dims: Vec<_> = run.per_pe.iter().map(|p| (p.neurons, p.inputs)).collect();
    assert_eq!(dims, cost::KWS_PE_DIMS.to_vec());
    assert!(run.step_cycles_worst < 21_000.0);
    assert!((run.step_cycles_worst - 20_763.66).abs() < 1e-9);
    assert_eq!(run.step_period_cycles, 25_000.0);
    assert!((run.inferences_per_sec_modeled - 1000.0).abs() < 1e-9);
    assert!((run.energy_uj_modeled - 7.1).abs() / 7.1 < 1e-9);
    assert!(run.per_pe.iter().all(|p| p.bytes <= SRAM_BUDGET_BYTES));
    // 128 neurons × 390 inputs: 32 column blocks × 25 row blocks × 16 cycles
    assert_eq!(run.per_pe[0].mac_tile_cycles, 12_800);
    assert_eq!(run.per_pe[2].mac_tile_cycles, 16_384);
}
