//! Symmetric per-tensor post-training quantization.
//!
//! All bit-widths below 32, 16 included, use integer codes
//! `q = round(w / scale)` with `scale = max|w| / (2^(b-1) - 1)`. 32 bits is
//! a passthrough. Biases are never quantized.

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, SplitKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{evaluate_accuracy, Model};

pub const SUPPORTED_BITS: [u32; 4] = [32, 16, 8, 4];

/// Recorded in reports so the format behind the numbers is explicit.
pub const SCHEME: &str = "symmetric-integer-per-tensor";

fn check_bits(bits: u32) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid(format!("unsupported bit-width {bits}; expected one of 32, 16, 8, 4")))
    }
}

/// Largest code magnitude at `bits`.
pub fn max_code(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

#[derive(Debug, Clone, PartialEq)]
pub enum Codes {
    Int(Vec<i32>),
    /// 32-bit passthrough keeps the values untouched.
    Passthrough(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub bits: u32,
    pub scale: f64,
    pub shape: (usize, usize),
    pub codes: Codes,
}

pub fn quantize_tensor(w: &Matrix, bits: u32) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    let shape = w.dim();
    let values = w.iter();
    if bits == 32 {
        return Ok(QuantizedTensor {
            bits,
            scale: 1.0,
            shape,
            codes: Codes::Passthrough(values.copied().collect()),
        });
    }
    let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !peak.is_finite() {
        return Err(Error::invalid("cannot quantize non-finite values"));
    }
    let qmax = max_code(bits);
    let scale = if peak == 0.0 { 1.0 } else { peak / qmax as f64 };
    let codes = values
        .map(|v| ((v / scale).round() as i32).clamp(-qmax, qmax))
        .collect();
    Ok(QuantizedTensor {
        bits,
        scale,
        shape,
        codes: Codes::Int(codes),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let data = match &q.codes {
        Codes::Int(c) => c.iter().map(|&c| c as f64 * q.scale).collect(),
        Codes::Passthrough(v) => v.clone(),
    };
    Matrix::from_shape_vec(q.shape, data).expect("shape matches code count")
}

/// Weight-only memory in bytes, ignoring the per-tensor scale.
pub fn weight_bytes(weight_params: usize, bits: u32) -> f64 {
    weight_params as f64 * bits as f64 / 8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantMemory {
    pub bits: u32,
    pub weight_params: usize,
    pub bias_params: usize,
    /// `(weights * bits + biases * 32) / 8`.
    pub bytes: f64,
    pub scheme: String,
}

impl QuantMemory {
    pub fn mb(&self) -> f64 {
        self.bytes / 1e6
    }
}

/// Model with every weight matrix (or factor) replaced by its dequantized
/// `bits`-bit version.
pub fn quantize_model(model: &Model, bits: u32) -> Result<(Model, QuantMemory)> {
    check_bits(bits)?;
    let mut out = model.clone();
    let mut weight_params = 0;
    let mut bias_params = 0;
    for layer in &mut out.layers {
        for w in layer.weights_mut() {
            weight_params += w.len();
            *w = dequantize(&quantize_tensor(w, bits)?);
        }
        bias_params += layer.bias().len();
    }
    let bytes = weight_bytes(weight_params, bits) + bias_params as f64 * 4.0;
    Ok((
        out,
        QuantMemory {
            bits,
            weight_params,
            bias_params,
            bytes,
            scheme: SCHEME.to_string(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantCell {
    pub bits: u32,
    pub accuracy: f64,
    /// Weight memory in MB (10^6 bytes).
    pub memory_mb: f64,
    /// Including 32-bit biases.
    pub total_memory_mb: f64,
}

/// One row of the accuracy / memory table: a compression setting evaluated
/// at every supported bit-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRow {
    pub setting: String,
    pub scheme: String,
    pub cells: Vec<QuantCell>,
}

impl QuantRow {
    /// `setting` followed by an `acc{b},mem{b}` pair per bit-width.
    pub fn csv_header(&self) -> String {
        let mut h = String::from("setting");
        for c in &self.cells {
            h.push_str(&format!(",acc{b},mem{b}", b = c.bits));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = self.setting.clone();
        for c in &self.cells {
            row.push_str(&format!(",{},{}", c.accuracy, c.memory_mb));
        }
        row
    }

    pub fn cell(&self, bits: u32) -> Option<&QuantCell> {
        self.cells.iter().find(|c| c.bits == bits)
    }
}

pub fn quantization_row(model: &Model, ds: &Dataset, split: SplitKind, setting: &str, bits: &[u32]) -> Result<QuantRow> {
    let mut cells = Vec::with_capacity(bits.len());
    for &bits in bits {
        let (q, mem) = quantize_model(model, bits)?;
        cells.push(QuantCell {
            bits,
            accuracy: evaluate_accuracy(&q, ds, split)?,
            memory_mb: weight_bytes(mem.weight_params, bits) / 1e6,
            total_memory_mb: mem.mb(),
        });
    }
    Ok(QuantRow {
        setting: setting.to_string(),
        scheme: SCHEME.to_string(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::testutil::random_matrix;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn endpoints_at_eight_bits() {
        let q = quantize_tensor(&array![[-1.0, 0.0, 1.0]], 8).unwrap();
        assert_eq!(q.scale, 1.0 / 127.0);
        assert_eq!(q.codes, Codes::Int(vec![-127, 0, 127]));
    }

    #[test]
    fn passthrough_is_bitwise() {
        let w = random_matrix(5, 7, 3);
        assert_eq!(dequantize(&quantize_tensor(&w, 32).unwrap()), w);
    }

    #[test]
    fn zero_tensor_and_bad_bits() {
        let q = quantize_tensor(&Matrix::zeros((2, 3)), 4).unwrap();
        assert_eq!(q.scale, 1.0);
        assert_eq!(q.codes, Codes::Int(vec![0; 6]));
        assert!(quantize_tensor(&Matrix::zeros((2, 3)), 6).is_err());
    }

    #[test]
    fn rounds_half_away_from_zero() {
        // scale = 7 / 7 = 1 at 4 bits.
        let q = quantize_tensor(&array![[7.0, 2.5, -2.5, 0.5, -7.0]], 4).unwrap();
        assert_eq!(q.codes, Codes::Int(vec![7, 3, -3, 1, -7]));
    }

    #[test]
    fn model_memory_accounting() {
        let m = Model::mlp(&[6, 4, 3], 0).unwrap();
        // 24 + 12 weights, 4 + 3 biases.
        let (_, m32) = quantize_model(&m, 32).unwrap();
        let (_, m16) = quantize_model(&m, 16).unwrap();
        let (_, m4) = quantize_model(&m, 4).unwrap();
        assert_eq!(m32.bytes, 36.0 * 4.0 + 7.0 * 4.0);
        assert_eq!(m16.bytes, 36.0 * 2.0 + 7.0 * 4.0);
        assert_eq!(m4.bytes, 36.0 * 0.5 + 7.0 * 4.0);
        assert_eq!(weight_bytes(36, 16), weight_bytes(36, 32) / 2.0);
        let (q32, _) = quantize_model(&m, 32).unwrap();
        assert_eq!(q32, m);
    }

    #[test]
    fn biases_stay_exact() {
        let mut m = Model::mlp(&[6, 4, 3], 0).unwrap();
        m.layers[0].bias_mut()[1] = 0.123456789;
        let (q, _) = quantize_model(&m, 4).unwrap();
        assert_eq!(q.layers[0].bias(), m.layers[0].bias());
        assert_ne!(q.layers[0].weights()[0], m.layers[0].weights()[0]);
    }

    proptest! {
        #[test]
        fn error_bound_and_idempotence(seed in 0u64..1000, bits_i in 1usize..4, rows in 1usize..9, cols in 1usize..9) {
            let bits = SUPPORTED_BITS[bits_i];
            let w = random_matrix(rows, cols, seed);
            let q = quantize_tensor(&w, bits).unwrap();
            let d = dequantize(&q);
            for (a, b) in w.iter().zip(d.iter()) {
                prop_assert!((a - b).abs() <= q.scale / 2.0 * (1.0 + 1e-12));
            }
            let q2 = quantize_tensor(&d, bits).unwrap();
            prop_assert_eq!(&q2.codes, &q.codes);
            let d2 = dequantize(&q2);
            for (a, b) in d.iter().zip(d2.iter()) {
                prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300));
            }
        }

        #[test]
        fn memory_decreases_with_bits(params in 1usize..100000) {
            let mem: Vec<f64> = SUPPORTED_BITS.iter().map(|&b| weight_bytes(params, b)).collect();
            prop_assert!(mem.windows(2).all(|w| w[1] < w[0]));
        }
    }
}
