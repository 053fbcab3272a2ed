//! Functional and timing model of a single neuromorphic processing element
//! (PE): an Arm core paired with a 4×16 int8 MAC array and 128 KB of SRAM.
//!
//! Two workloads run on top of the PE model:
//!
//! * [`kws`]: a quantized 390-256-256-29 keyword-spotting MLP spread over
//!   three PEs.
//! * [`adaptive`] + [`plant`]: a spiking LIF population with online
//!   delta-rule learning that augments a PD controller on a simulated arm.
//!
//! [`cost`] holds the fitted cycle polynomials, memory-footprint equations
//! and the calibrated energy model used to annotate both workloads.

pub mod adaptive;
pub mod cost;
pub mod error;
pub mod kws;
pub mod mac_array;
pub mod plant;
pub mod quant;
pub mod rng;

pub use adaptive::{AdaptivePopulation, DecoderMatrix, EncoderMatrix, LifParams, LifPopulation};
pub use cost::{AdaptiveCoeffs, CostReport, CycleCoeffs, KwsCoeffs, PhaseBytes, PhaseCycles};
pub use error::{Result, SimError};
pub use kws::{KwsNetwork, PePlacement};
pub use mac_array::{mac_multiply, tile_schedule, MacJob, MacResult, Tile};
pub use plant::{ArmPlant, PdController, TrialLog};
pub use quant::{Fixed16Weight, QuantMatrix};

/// Default SRAM budget for network data on one PE: 90 KiB.
pub const SRAM_BUDGET_BYTES: usize = 90 * 1024;

/// Default PE clock frequency.
pub const CLOCK_HZ: f64 = 2.5e8;
