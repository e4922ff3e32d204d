//! Per-tensor affine quantization.

use serde::{Deserialize, Serialize};

/// `real = scale × (q − zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub const BIT_WIDTH: u32 = 8;

    /// Signed INT8 parameters covering `[min(values, 0), max(values, 0)]`.
    /// A tensor with zero range gets scale 1 and zero point 0.
    pub fn for_weights(values: &[f32]) -> Self {
        let (lo, hi) = range_with_zero(values);
        if hi - lo <= f32::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
            return QuantParams { scale: 1.0, zero_point: 0 };
        }
        let scale = (hi - lo) / 255.0;
        let zero_point = (-128.0 - lo / scale).round().clamp(-128.0, 127.0) as i32;
        QuantParams { scale, zero_point }
    }

    /// Unsigned 8-bit parameters for an activation tensor.
    pub fn for_activations(values: &[f32]) -> Self {
        let (lo, hi) = range_with_zero(values);
        if !(hi - lo).is_finite() || hi - lo <= 0.0 {
            return QuantParams { scale: 1.0, zero_point: 0 };
        }
        let scale = (hi - lo) / 255.0;
        let zero_point = (-lo / scale).round().clamp(0.0, 255.0) as i32;
        QuantParams { scale, zero_point }
    }

    pub fn quantize_i8(&self, x: f32) -> i8 {
        ((x / self.scale).round() + self.zero_point as f32).clamp(-128.0, 127.0) as i8
    }

    pub fn quantize_u8(&self, x: f32) -> u8 {
        let q = (x / self.scale).round() + self.zero_point as f32;
        if q.is_nan() {
            self.zero_point as u8
        } else {
            q.clamp(0.0, 255.0) as u8
        }
    }

    pub fn dequantize(&self, q: i32) -> f32 {
        self.scale * (i64::from(q) - i64::from(self.zero_point)) as f32
    }
}

fn range_with_zero(values: &[f32]) -> (f32, f32) {
    let mut lo = 0.0f32;
    let mut hi = 0.0f32;
    for &v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

pub fn quantize_tensor(values: &[f32]) -> (QuantParams, Vec<i8>) {
    let qp = QuantParams::for_weights(values);
    (qp, values.iter().map(|&v| qp.quantize_i8(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_tensor() {
        let (qp, q) = quantize_tensor(&[0.0; 6]);
        assert_eq!(qp, QuantParams { scale: 1.0, zero_point: 0 });
        assert!(q.iter().all(|&v| v == 0));
    }

    #[test]
    fn roundtrip_within_step() {
        let w: Vec<f32> = (0..200).map(|i| ((i as f32) * 0.37).sin() * 1.7 - 0.2).collect();
        let (qp, q) = quantize_tensor(&w);
        for (a, b) in w.iter().zip(&q) {
            assert!((qp.dequantize(i32::from(*b)) - a).abs() <= qp.scale);
        }
    }

    #[test]
    fn zero_is_exact() {
        let qp = QuantParams::for_weights(&[0.3, 1.2, 2.0]);
        assert_eq!(qp.dequantize(i32::from(qp.quantize_i8(0.0))), 0.0);
    }
}
