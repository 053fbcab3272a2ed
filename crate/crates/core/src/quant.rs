//! Conversion between real values and the int8 domain of the MAC array.
//!
//! Weights use symmetric per-matrix scaling (`real = scale * int`, zero
//! point 0) and are rounded stochastically. Activations are requantized
//! with round-half-even and saturate to `[0, 127]` after ReLU.
//!
//! Weight files use the `QM01` little-endian layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "QM01"
//! 4       4     rows  (u32)
//! 8       4     cols  (u32)
//! 12      8     scale (f64)
//! 20      r*c   row-major int8 payload
//! ```

use std::io::{Read, Write};

use half::f16;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::rng;

pub const QM01_MAGIC: &[u8; 4] = b"QM01";
const QM01_HEADER_LEN: usize = 20;

/// Row-major int8 matrix with a single positive scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantMatrix {
    rows: usize,
    cols: usize,
    scale: f64,
    data: Vec<i8>,
}

impl QuantMatrix {
    pub fn new(rows: usize, cols: usize, scale: f64, data: Vec<i8>) -> Result<Self> {
        check_scale(scale)?;
        if data.len() != rows * cols {
            return Err(SimError::Shape(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            scale,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, scale: f64) -> Result<Self> {
        Self::new(rows, cols, scale, vec![0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[i8] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Real value of one entry.
    pub fn real(&self, row: usize, col: usize) -> f64 {
        self.scale * f64::from(self.get(row, col))
    }

    /// Copy of the column block `cols`, keeping the scale.
    pub fn column_block(&self, cols: std::ops::Range<usize>) -> Result<Self> {
        if cols.end > self.cols || cols.start >= cols.end {
            return Err(SimError::Shape(format!(
                "column block {:?} outside 0..{}",
                cols, self.cols
            )));
        }
        let width = cols.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[cols.clone()]);
        }
        Self::new(self.rows, width, self.scale, data)
    }

    /// Stack `other` below `self`. Both must share width and scale.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols || self.scale != other.scale {
            return Err(SimError::Shape(
                "vstack needs equal widths and scales".into(),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(self.rows + other.rows, self.cols, self.scale, data)
    }

    pub fn to_qm01_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(QM01_HEADER_LEN + self.data.len());
        self.write_qm01(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_qm01<W: Write>(&self, w: &mut W) -> Result<()> {
        let rows = u32::try_from(self.rows)
            .map_err(|_| SimError::Format(format!("row count {} exceeds u32", self.rows)))?;
        let cols = u32::try_from(self.cols)
            .map_err(|_| SimError::Format(format!("column count {} exceeds u32", self.cols)))?;
        w.write_all(QM01_MAGIC)?;
        w.write_all(&rows.to_le_bytes())?;
        w.write_all(&cols.to_le_bytes())?;
        w.write_all(&self.scale.to_le_bytes())?;
        let payload: Vec<u8> = self.data.iter().map(|&v| v as u8).collect();
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_qm01<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; QM01_HEADER_LEN];
        r.read_exact(&mut header).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => SimError::Format("truncated QM01 header".into()),
            _ => SimError::Io(e),
        })?;
        if &header[0..4] != QM01_MAGIC {
            return Err(SimError::Format(format!(
                "bad magic {:?}, expected \"QM01\"",
                &header[0..4]
            )));
        }
        let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let scale = f64::from_le_bytes(header[12..20].try_into().unwrap());
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| SimError::Format("QM01 dimensions overflow".into()))?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => SimError::Format(format!(
                "truncated QM01 payload: expected {} bytes",
                len
            )),
            _ => SimError::Io(e),
        })?;
        let data = payload.into_iter().map(|b| b as i8).collect();
        Self::new(rows, cols, scale, data).map_err(|e| match e {
            SimError::InvalidScale(s) => SimError::Format(format!("invalid scale {s} in QM01")),
            other => other,
        })
    }

    pub fn from_qm01_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let m = Self::read_qm01(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(SimError::Format(format!(
                "{} trailing bytes after QM01 payload",
                cursor.len()
            )));
        }
        Ok(m)
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(SimError::InvalidScale(scale))
    }
}

/// `max|m| / 127`, or 1.0 for an all-zero input.
pub fn default_scale(values: &[f64]) -> f64 {
    let max_abs = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if max_abs > 0.0 {
        max_abs / 127.0
    } else {
        1.0
    }
}

/// Round `x` down with probability `1 - frac(x)` and up with probability
/// `frac(x)`, then saturate to the int8 range.
#[inline]
pub fn stochastic_round<R: Rng + ?Sized>(x: f64, rng: &mut R) -> i8 {
    let floor = x.floor();
    let frac = x - floor;
    let draw: f64 = rng.random();
    let rounded = if draw < frac { floor + 1.0 } else { floor };
    rounded.clamp(-128.0, 127.0) as i8
}

/// Quantize a row-major real matrix with stochastic rounding.
pub fn quantize_stochastic(
    values: &[f64],
    rows: usize,
    cols: usize,
    scale: f64,
    seed: u64,
) -> Result<QuantMatrix> {
    check_scale(scale)?;
    if values.len() != rows * cols {
        return Err(SimError::Shape(format!(
            "{}x{} matrix needs {} values, got {}",
            rows,
            cols,
            rows * cols,
            values.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    let data = values
        .iter()
        .map(|&v| stochastic_round(v / scale, &mut rng))
        .collect();
    QuantMatrix::new(rows, cols, scale, data)
}

/// Round-to-nearest-even quantization, used for activations and inputs.
pub fn quantize_nearest(value: f64, scale: f64) -> i8 {
    (value / scale).round_ties_even().clamp(-128.0, 127.0) as i8
}

/// ReLU followed by rescaling into the int8 activation domain.
///
/// `in_scale` is the real value of one accumulator unit, `out_scale` the
/// real value of one output unit.
pub fn requantize_relu(acc: &[i32], in_scale: f64, out_scale: f64) -> Vec<i8> {
    debug_assert!(in_scale > 0.0 && out_scale > 0.0);
    let ratio = in_scale / out_scale;
    acc.iter()
        .map(|&a| {
            let v = f64::from(a.max(0)) * ratio;
            v.round_ties_even().clamp(0.0, 127.0) as i8
        })
        .collect()
}

/// A decoder weight held as an IEEE half-precision float.
///
/// Always finite: conversions saturate at `±f16::MAX`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Fixed16Weight(f16);

impl Fixed16Weight {
    pub const ZERO: Self = Self(f16::ZERO);

    /// Round to the nearest half-precision value, saturating out-of-range
    /// magnitudes. NaN is rejected.
    pub fn from_f64(value: f64) -> Result<Self> {
        if value.is_nan() {
            return Err(SimError::InvalidParam("NaN decoder weight".into()));
        }
        Ok(Self::saturating(value))
    }

    #[inline]
    pub(crate) fn saturating(value: f64) -> Self {
        let h = f16::from_f64(value);
        if h.is_infinite() {
            Self(if value > 0.0 { f16::MAX } else { f16::MIN })
        } else {
            Self(h)
        }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.0.to_f64()
    }

    pub fn to_bits(self) -> u16 {
        self.0.to_bits()
    }

    pub fn from_bits(bits: u16) -> Result<Self> {
        let h = f16::from_bits(bits);
        if h.is_finite() {
            Ok(Self(h))
        } else {
            Err(SimError::Format(format!("non-finite f16 bits {bits:#06x}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn integer_values_are_fixed_points() {
        let m = quantize_stochastic(&[3.0; 64], 8, 8, 1.0, 11).unwrap();
        assert!(m.data().iter().all(|&v| v == 3));
        let m = quantize_stochastic(&[-0.75; 4], 2, 2, 0.25, 5).unwrap();
        assert!(m.data().iter().all(|&v| v == -3));
    }

    #[test]
    fn saturates_out_of_range() {
        let m = quantize_stochastic(&[300.0, -300.0], 1, 2, 1.0, 0).unwrap();
        assert_eq!(m.data(), &[127, -128]);
    }

    #[test]
    fn rejects_bad_scale() {
        assert!(matches!(
            quantize_stochastic(&[1.0], 1, 1, 0.0, 0),
            Err(SimError::InvalidScale(_))
        ));
        assert!(matches!(
            quantize_stochastic(&[1.0], 1, 1, -2.0, 0),
            Err(SimError::InvalidScale(_))
        ));
        assert!(QuantMatrix::new(1, 1, f64::NAN, vec![0]).is_err());
    }

    #[test]
    fn stochastic_mean_is_unbiased() {
        // 2.25 over 1e5 draws: sigma of the mean = sqrt(0.25*0.75/1e5) ~ 1.4e-3.
        let values = vec![2.25; 100_000];
        let m = quantize_stochastic(&values, 1, values.len(), 1.0, 42).unwrap();
        let mean = m.data().iter().map(|&v| f64::from(v)).sum::<f64>() / values.len() as f64;
        assert!((mean - 2.25).abs() < 0.01, "mean {mean}");
        assert!(m.data().iter().all(|&v| v == 2 || v == 3));
    }

    #[test]
    fn requantize_relu_cases() {
        assert_eq!(requantize_relu(&[-5], 0.3, 0.1), vec![0]);
        assert_eq!(requantize_relu(&[64], 1.0, 1.0), vec![64]);
        assert_eq!(requantize_relu(&[1_000_000], 1.0, 1.0), vec![127]);
        // ties go to even
        assert_eq!(requantize_relu(&[5, 7], 1.0, 2.0), vec![2, 4]);
    }

    #[test]
    fn qm01_layout_is_exact() {
        let m = QuantMatrix::new(2, 3, 0.5, vec![1, -1, 2, -128, 127, 0]).unwrap();
        let bytes = m.to_qm01_bytes();
        assert_eq!(&bytes[0..4], b"QM01");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &0.5f64.to_le_bytes());
        assert_eq!(&bytes[20..], &[1, 0xff, 2, 0x80, 0x7f, 0]);
        assert_eq!(QuantMatrix::from_qm01_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn qm01_rejects_corrupt_input() {
        let m = QuantMatrix::new(2, 2, 1.0, vec![1, 2, 3, 4]).unwrap();
        let bytes = m.to_qm01_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            QuantMatrix::from_qm01_bytes(&bad_magic),
            Err(SimError::Format(_))
        ));
        assert!(matches!(
            QuantMatrix::from_qm01_bytes(&bytes[..bytes.len() - 1]),
            Err(SimError::Format(_))
        ));
        let mut zero_scale = bytes.clone();
        zero_scale[12..20].copy_from_slice(&0.0f64.to_le_bytes());
        assert!(matches!(
            QuantMatrix::from_qm01_bytes(&zero_scale),
            Err(SimError::Format(_))
        ));
    }

    #[test]
    fn column_block_and_vstack() {
        let m = QuantMatrix::new(2, 4, 1.0, vec![0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let b = m.column_block(1..3).unwrap();
        assert_eq!(b.data(), &[1, 2, 5, 6]);
        let s = b.vstack(&b).unwrap();
        assert_eq!(s.rows(), 4);
        assert!(m.column_block(3..5).is_err());
    }

    #[test]
    fn f16_weight_saturates_and_rejects_nan() {
        assert_eq!(Fixed16Weight::from_f64(1e9).unwrap().to_f64(), 65504.0);
        assert_eq!(Fixed16Weight::from_f64(-1e9).unwrap().to_f64(), -65504.0);
        assert!(Fixed16Weight::from_f64(f64::NAN).is_err());
        assert!(Fixed16Weight::from_bits(0x7c00).is_err());
    }

    proptest! {
        #[test]
        fn same_seed_same_matrix(seed in any::<u64>(), vals in prop::collection::vec(-200.0f64..200.0, 1..64)) {
            let n = vals.len();
            let a = quantize_stochastic(&vals, 1, n, 1.3, seed).unwrap();
            let b = quantize_stochastic(&vals, 1, n, 1.3, seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn stochastic_round_brackets_value(x in -127.0f64..127.0, seed in any::<u64>()) {
            let mut r = rng::seeded(seed);
            let q = f64::from(stochastic_round(x, &mut r));
            prop_assert!(q == x.floor() || q == x.ceil());
        }

        #[test]
        fn requantize_is_monotone(a in any::<i32>(), b in any::<i32>(), ratio in 1e-6f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let out = requantize_relu(&[lo, hi], ratio, 1.0);
            prop_assert!(out[0] <= out[1]);
        }

        #[test]
        fn qm01_roundtrip(rows in 1usize..8, cols in 1usize..8, scale in 1e-6f64..1e3, seed in any::<u64>()) {
            let mut r = rng::seeded(seed);
            let data = (0..rows * cols).map(|_| r.random::<i8>()).collect();
            let m = QuantMatrix::new(rows, cols, scale, data).unwrap();
            prop_assert_eq!(QuantMatrix::from_qm01_bytes(&m.to_qm01_bytes()).unwrap(), m);
        }
    }
}
