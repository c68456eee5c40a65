//! Post-training weight quantization.
//!
//! Two weight-only schemes with one scale per row: symmetric absmax int8 and
//! 4-bit NF4 (normal-quantile codebook, two codes per byte). Only base block
//! weights are quantized; deltas, norms, embedding and output head stay in
//! floating point.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::delta::{CompressedModel, StoredWeight};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// NF4 codebook: normalized standard-normal quantiles, 7 negative levels,
/// zero and 8 positive levels.
pub const NF4_LEVELS: [f64; 16] = [
    -1.0,
    -0.696192805632343,
    -0.5250729594465005,
    -0.3949174259199071,
    -0.28444130892108205,
    -0.1847734028004556,
    -0.09104997598578049,
    0.0,
    0.07958031495840909,
    0.1609301443802907,
    0.2461122513474594,
    0.3379151367131279,
    0.44070973186421625,
    0.5626168879699849,
    0.7229566441594734,
    1.0,
];

pub const NF4_ZERO_CODE: u8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    AbsmaxInt8,
    Nf4,
}

impl QuantScheme {
    pub fn bits(self) -> u8 {
        match self {
            QuantScheme::AbsmaxInt8 => 8,
            QuantScheme::Nf4 => 4,
        }
    }

    pub fn for_bits(bits: u8) -> Result<Self> {
        match bits {
            8 => Ok(QuantScheme::AbsmaxInt8),
            4 => Ok(QuantScheme::Nf4),
            b => Err(Error::InvalidArgument(alloc::format!("unsupported bit width {b}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One scale per row ("vector-wise").
    #[default]
    PerRow,
    PerTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub scheme: QuantScheme,
    /// int8: one `i8` per element stored as its byte. NF4: two 4-bit codes per
    /// byte, low nibble first, row-major over the flattened tensor.
    pub codes: Vec<u8>,
    /// One per row, or a single entry for per-tensor scaling.
    pub scales: Vec<f32>,
}

impl QuantizedTensor {
    pub fn bits(&self) -> u8 {
        self.scheme.bits()
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    fn scale_of_row(&self, row: usize) -> f64 {
        if self.scales.len() == 1 {
            self.scales[0] as f64
        } else {
            self.scales[row] as f64
        }
    }

    /// Signed int8 code or NF4 level index of element `i`.
    pub fn code(&self, i: usize) -> i32 {
        match self.scheme {
            QuantScheme::AbsmaxInt8 => self.codes[i] as i8 as i32,
            QuantScheme::Nf4 => {
                let byte = self.codes[i / 2];
                (if i.is_multiple_of(2) { byte & 0x0f } else { byte >> 4 }) as i32
            }
        }
    }

    pub fn dequantize(&self) -> Tensor {
        let mut out = vec![0.0; self.len()];
        for r in 0..self.rows {
            let s = self.scale_of_row(r);
            for c in 0..self.cols {
                let i = r * self.cols + c;
                out[i] = match self.scheme {
                    QuantScheme::AbsmaxInt8 => self.code(i) as f64 * s,
                    QuantScheme::Nf4 => NF4_LEVELS[self.code(i) as usize] * s,
                };
            }
        }
        Tensor::new(&[self.rows, self.cols], out).expect("consistent shape")
    }

    /// Payload size in bytes: codes plus `f32` scales.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + 4 * self.scales.len()
    }
}

fn nearest_nf4(x: f64) -> u8 {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (i, &l) in NF4_LEVELS.iter().enumerate() {
        let d = (x - l).abs();
        if d < dist {
            dist = d;
            best = i;
        }
    }
    best as u8
}

/// Quantizes a finite 2-D weight.
pub fn quantize_tensor(w: &Tensor, scheme: QuantScheme, granularity: Granularity) -> Result<QuantizedTensor> {
    if w.shape().len() != 2 {
        return Err(Error::Shape { op: "quantize", lhs: w.shape().to_vec(), rhs: vec![2] });
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("quantize"));
    }
    let (rows, cols) = (w.rows(), w.cols());
    let absmax = |xs: &[f64]| xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scales: Vec<f32> = match granularity {
        Granularity::PerRow => (0..rows).map(|r| row_scale(scheme, absmax(w.row(r)))).collect(),
        Granularity::PerTensor => vec![row_scale(scheme, absmax(w.data()))],
    };
    let scale_of = |r: usize| if scales.len() == 1 { scales[0] } else { scales[r] } as f64;
    let n = rows * cols;
    let codes = match scheme {
        QuantScheme::AbsmaxInt8 => {
            let mut codes = Vec::with_capacity(n);
            for r in 0..rows {
                let s = scale_of(r);
                for &x in w.row(r) {
                    let c = if s > 0.0 { libm::round(x / s).clamp(-127.0, 127.0) } else { 0.0 };
                    codes.push(c as i8 as u8);
                }
            }
            codes
        }
        QuantScheme::Nf4 => {
            let mut codes = vec![0u8; n.div_ceil(2)];
            for r in 0..rows {
                let s = scale_of(r);
                for (c, &x) in w.row(r).iter().enumerate() {
                    let code = if s > 0.0 { nearest_nf4(x / s) } else { NF4_ZERO_CODE };
                    let i = r * cols + c;
                    codes[i / 2] |= if i % 2 == 0 { code } else { code << 4 };
                }
            }
            codes
        }
    };
    Ok(QuantizedTensor { rows, cols, scheme, codes, scales })
}

fn row_scale(scheme: QuantScheme, absmax: f64) -> f32 {
    match scheme {
        QuantScheme::AbsmaxInt8 => (absmax / 127.0) as f32,
        QuantScheme::Nf4 => absmax as f32,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantStrategy {
    /// Quantize every base weight except those serving as anchors.
    AnchorSkip,
    /// Quantize every base weight, anchors included.
    AllQuant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantPolicy {
    pub bits: u8,
    pub strategy: QuantStrategy,
    #[serde(default)]
    pub granularity: Granularity,
}

/// Quantizes the stored base weights of a compressed model under `policy`.
pub fn quantize_model(model: &CompressedModel, policy: &QuantPolicy) -> Result<CompressedModel> {
    let scheme = QuantScheme::for_bits(policy.bits)?;
    let anchors = model.plan.anchors();
    let mut weights = BTreeMap::new();
    for (&site, stored) in &model.weights {
        let skip = policy.strategy == QuantStrategy::AnchorSkip && anchors.contains(&site);
        let new = match stored {
            StoredWeight::Dense(t) if !skip => {
                StoredWeight::Quantized(quantize_tensor(t, scheme, policy.granularity)?)
            }
            other => other.clone(),
        };
        weights.insert(site, new);
    }
    let mut out = model.clone();
    out.weights = weights;
    out.quantization = Some(*policy);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_w(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[rows, cols], 0.5, &mut rng)
    }

    #[test]
    fn zero_matrix() {
        let z = Tensor::zeros(&[3, 5]);
        for scheme in [QuantScheme::AbsmaxInt8, QuantScheme::Nf4] {
            let q = quantize_tensor(&z, scheme, Granularity::PerRow).unwrap();
            assert!((0..15).all(|i| match scheme {
                QuantScheme::AbsmaxInt8 => q.code(i) == 0,
                QuantScheme::Nf4 => q.code(i) == NF4_ZERO_CODE as i32,
            }));
            assert_eq!(q.dequantize(), z);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut w = Tensor::zeros(&[2, 2]);
        w.data_mut()[0] = f64::INFINITY;
        assert!(quantize_tensor(&w, QuantScheme::Nf4, Granularity::PerRow).is_err());
    }

    #[test]
    fn nf4_codebook_shape() {
        assert_eq!(NF4_LEVELS[0], -1.0);
        assert_eq!(NF4_LEVELS[15], 1.0);
        assert_eq!(NF4_LEVELS[NF4_ZERO_CODE as usize], 0.0);
        assert!(NF4_LEVELS.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn odd_length_nf4_packing() {
        let w = rand_w(3, 3, 1);
        let q = quantize_tensor(&w, QuantScheme::Nf4, Granularity::PerRow).unwrap();
        assert_eq!(q.codes.len(), 5);
        assert_eq!(q.dequantize().shape(), &[3, 3]);
    }

    #[test]
    fn per_tensor_uses_single_scale() {
        let w = rand_w(4, 6, 2);
        let q = quantize_tensor(&w, QuantScheme::AbsmaxInt8, Granularity::PerTensor).unwrap();
        assert_eq!(q.scales.len(), 1);
        let s = q.scales[0] as f64;
        assert!(q.dequantize().max_abs_diff(&w) <= s / 2.0 + 1e-12);
    }

    proptest! {
        #[test]
        fn int8_round_trip_bound(rows in 1usize..6, cols in 1usize..9, seed in 0u64..500) {
            let w = rand_w(rows, cols, seed);
            let q = quantize_tensor(&w, QuantScheme::AbsmaxInt8, Granularity::PerRow).unwrap();
            let d = q.dequantize();
            for r in 0..rows {
                let s = q.scales[r] as f64;
                prop_assert!(s > 0.0);
                for c in 0..cols {
                    prop_assert!((d.at(r, c) - w.at(r, c)).abs() <= s / 2.0 * (1.0 + 1e-12));
                }
            }
        }

        #[test]
        fn nf4_round_trip_bound(rows in 1usize..6, cols in 1usize..9, seed in 0u64..500) {
            let w = rand_w(rows, cols, seed);
            let q = quantize_tensor(&w, QuantScheme::Nf4, Granularity::PerRow).unwrap();
            let d = q.dequantize();
            let max_half_gap = NF4_LEVELS.windows(2).map(|p| (p[1] - p[0]) / 2.0).fold(0.0, f64::max);
            for r in 0..rows {
                let s = q.scales[r] as f64;
                for c in 0..cols {
                    prop_assert!((d.at(r, c) - w.at(r, c)).abs() <= s * max_half_gap * (1.0 + 1e-9));
                }
            }
        }

        #[test]
        fn quantization_is_idempotent(seed in 0u64..500, nf4 in proptest::bool::ANY) {
            let scheme = if nf4 { QuantScheme::Nf4 } else { QuantScheme::AbsmaxInt8 };
            let w = rand_w(4, 7, seed);
            let q = quantize_tensor(&w, scheme, Granularity::PerRow).unwrap();
            let q2 = quantize_tensor(&q.dequantize(), scheme, Granularity::PerRow).unwrap();
            prop_assert_eq!(q, q2);
        }
    }
}
