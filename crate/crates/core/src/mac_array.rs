//! Bit-exact model of the 4×16 int8 MAC array.
//!
//! A vector-matrix product `a · B` (`a` has `d` entries, `B` is `d × n`) is
//! cut into tiles of at most 16 input rows by 4 output columns. Each tile
//! occupies the array for 16 feed cycles, one input row per cycle, whether
//! or not the tile is full; padding lanes carry zeros. Accumulators are
//! 29 bits wide and held in `i32`.

use std::ops::Range;

use crate::error::{Result, SimError};
use crate::quant::QuantMatrix;

/// Input rows covered by one tile (operand A lanes).
pub const TILE_ROWS: usize = 16;
/// Output columns covered by one tile (operand B lanes).
pub const TILE_COLS: usize = 4;
/// Feed cycles charged per tile.
pub const CYCLES_PER_TILE: u64 = 16;

pub const ACC_BITS: u32 = 29;
pub const ACC_MIN: i64 = -(1 << (ACC_BITS - 1));
pub const ACC_MAX: i64 = (1 << (ACC_BITS - 1)) - 1;

#[derive(Debug, Clone, Copy)]
pub struct MacJob<'a> {
    operand_a: &'a [i8],
    operand_b: &'a QuantMatrix,
}

impl<'a> MacJob<'a> {
    pub fn new(operand_a: &'a [i8], operand_b: &'a QuantMatrix) -> Result<Self> {
        if operand_a.is_empty() || operand_b.cols() == 0 {
            return Err(SimError::Shape("MAC job needs d >= 1 and n >= 1".into()));
        }
        if operand_a.len() != operand_b.rows() {
            return Err(SimError::Shape(format!(
                "operand A has {} entries but operand B has {} rows",
                operand_a.len(),
                operand_b.rows()
            )));
        }
        Ok(Self {
            operand_a,
            operand_b,
        })
    }

    pub fn d(&self) -> usize {
        self.operand_a.len()
    }

    pub fn n(&self) -> usize {
        self.operand_b.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacResult {
    pub acc: Vec<i32>,
    pub tile_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

/// Partition `d × n` into tiles, column block outermost.
pub fn tile_schedule(d: usize, n: usize) -> Vec<Tile> {
    let row_blocks = d.div_ceil(TILE_ROWS);
    let col_blocks = n.div_ceil(TILE_COLS);
    let mut tiles = Vec::with_capacity(row_blocks * col_blocks);
    for cb in 0..col_blocks {
        let cols = cb * TILE_COLS..((cb + 1) * TILE_COLS).min(n);
        for rb in 0..row_blocks {
            let rows = rb * TILE_ROWS..((rb + 1) * TILE_ROWS).min(d);
            tiles.push(Tile {
                rows,
                cols: cols.clone(),
            });
        }
    }
    tiles
}

/// Cycles the array spends on a `d × n` product.
pub fn structural_cycles(d: usize, n: usize) -> u64 {
    (n.div_ceil(TILE_COLS) * d.div_ceil(TILE_ROWS)) as u64 * CYCLES_PER_TILE
}

/// Run a job through the array.
///
/// Fails with [`SimError::Overflow`] as soon as any partial sum leaves the
/// 29-bit range, which means the network is badly scaled.
pub fn mac_multiply(job: &MacJob<'_>) -> Result<MacResult> {
    let (d, n) = (job.d(), job.n());
    let b = job.operand_b;
    let mut acc = vec![0i64; n];
    let mut cycles = 0u64;

    for tile in tile_schedule(d, n) {
        // Lanes beyond the tile's real extent are zero-padded and still cost
        // a full feed cycle.
        for step in 0..TILE_ROWS {
            cycles += 1;
            let i = tile.rows.start + step;
            if i >= tile.rows.end {
                continue;
            }
            let a = i64::from(job.operand_a[i]);
            let row = b.row(i);
            for j in tile.cols.clone() {
                let sum = acc[j] + a * i64::from(row[j]);
                if !(ACC_MIN..=ACC_MAX).contains(&sum) {
                    return Err(SimError::Overflow {
                        index: j,
                        value: sum,
                    });
                }
                acc[j] = sum;
            }
        }
    }
    debug_assert_eq!(cycles, structural_cycles(d, n));

    Ok(MacResult {
        acc: acc.into_iter().map(|v| v as i32).collect(),
        tile_cycles: cycles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn naive(a: &[i8], b: &QuantMatrix) -> Vec<i32> {
        (0..b.cols())
            .map(|j| {
                (0..b.rows())
                    .map(|i| i32::from(a[i]) * i32::from(b.get(i, j)))
                    .sum()
            })
            .collect()
    }

    fn random_case(seed: u64, d: usize, n: usize) -> (Vec<i8>, QuantMatrix) {
        let mut r = rng::seeded(seed);
        let a = (0..d).map(|_| r.random::<i8>()).collect();
        let b = (0..d * n).map(|_| r.random::<i8>()).collect();
        (a, QuantMatrix::new(d, n, 1.0, b).unwrap())
    }

    #[test]
    fn zero_input_annihilates() {
        for w in [-128i8, -1, 0, 77, 127] {
            let b = QuantMatrix::new(1, 1, 1.0, vec![w]).unwrap();
            let r = mac_multiply(&MacJob::new(&[0], &b).unwrap()).unwrap();
            assert_eq!(r.acc, vec![0]);
        }
    }

    #[test]
    fn one_full_tile_of_ones() {
        let a = [1i8; 16];
        let b = QuantMatrix::new(16, 4, 1.0, vec![1; 64]).unwrap();
        let r = mac_multiply(&MacJob::new(&a, &b).unwrap()).unwrap();
        assert_eq!(r.acc, vec![16; 4]);
        assert_eq!(r.tile_cycles, 16);
    }

    #[test]
    fn kws_sized_product_matches_reference() {
        let (a, b) = random_case(390, 390, 128);
        let r = mac_multiply(&MacJob::new(&a, &b).unwrap()).unwrap();
        assert_eq!(r.acc, naive(&a, &b));
        assert_eq!(r.tile_cycles, 32 * 25 * 16);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(
            tile_schedule(16, 4),
            vec![Tile {
                rows: 0..16,
                cols: 0..4
            }]
        );
        let t = tile_schedule(17, 4);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].rows, 0..16);
        assert_eq!(t[1].rows, 16..17);
        assert_eq!(tile_schedule(390, 256).len(), 1600);
    }

    #[test]
    fn schedule_order_is_column_block_major() {
        let t = tile_schedule(40, 8);
        let order: Vec<_> = t.iter().map(|t| (t.cols.start, t.rows.start)).collect();
        assert_eq!(
            order,
            vec![(0, 0), (0, 16), (0, 32), (4, 0), (4, 16), (4, 32)]
        );
    }

    #[test]
    fn overflow_detected() {
        // 16400 * 128 * 128 = 268_697_600 > 2^28 - 1
        let d = 16_400;
        let a = vec![-128i8; d];
        let b = QuantMatrix::new(d, 1, 1.0, vec![-128; d]).unwrap();
        let err = mac_multiply(&MacJob::new(&a, &b).unwrap()).unwrap_err();
        assert!(matches!(err, SimError::Overflow { index: 0, .. }));

        // 16383 rows stays inside the range.
        let d = 16_383;
        let a = vec![-128i8; d];
        let b = QuantMatrix::new(d, 1, 1.0, vec![-128; d]).unwrap();
        let r = mac_multiply(&MacJob::new(&a, &b).unwrap()).unwrap();
        assert_eq!(r.acc[0], 16_383 * 16_384);
    }

    #[test]
    fn job_shape_checked() {
        let b = QuantMatrix::new(3, 2, 1.0, vec![0; 6]).unwrap();
        assert!(MacJob::new(&[1, 2], &b).is_err());
        assert!(MacJob::new(&[], &b).is_err());
    }

    proptest! {
        #[test]
        fn tiles_partition_index_space(d in 1usize..80, n in 1usize..40) {
            let mut seen = vec![0u8; d * n];
            for t in tile_schedule(d, n) {
                prop_assert!(t.rows.len() <= TILE_ROWS && t.cols.len() <= TILE_COLS);
                for i in t.rows.clone() {
                    for j in t.cols.clone() {
                        seen[i * n + j] += 1;
                    }
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }

        #[test]
        fn matches_naive(seed in any::<u64>(), d in 1usize..96, n in 1usize..48) {
            let (a, b) = random_case(seed, d, n);
            let r = mac_multiply(&MacJob::new(&a, &b).unwrap()).unwrap();
            prop_assert_eq!(r.acc, naive(&a, &b));
            prop_assert_eq!(r.tile_cycles, structural_cycles(d, n));
        }

        #[test]
        fn linear_in_operand_a(seed in any::<u64>(), d in 1usize..64, n in 1usize..16) {
            let mut r = rng::seeded(seed);
            // Keep a1 + a2 inside int8.
            let a1: Vec<i8> = (0..d).map(|_| r.random_range(-64i8..64)).collect();
            let a2: Vec<i8> = (0..d).map(|_| r.random_range(-64i8..64)).collect();
            let sum: Vec<i8> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
            let b = QuantMatrix::new(d, n, 1.0, (0..d * n).map(|_| r.random::<i8>()).collect()).unwrap();
            let run = |a: &[i8]| mac_multiply(&MacJob::new(a, &b).unwrap()).unwrap().acc;
            let lhs = run(&sum);
            let rhs: Vec<i32> = run(&a1).iter().zip(run(&a2)).map(|(x, y)| x + y).collect();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn cycles_monotone(d in 1usize..600, n in 1usize..600, dd in 0usize..40, dn in 0usize..40) {
            prop_assert!(structural_cycles(d + dd, n) >= structural_cycles(d, n));
            prop_assert!(structural_cycles(d, n + dn) >= structural_cycles(d, n));
        }
    }
}
