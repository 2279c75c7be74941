//! Affine 8-bit quantization: parameters, fake quantization for training, and
//! integer-only matmul kernels with fixed-point requantization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// EMA decay used for activation ranges.
pub const DEFAULT_EMA_DECAY: f32 = 0.99;

/// Largest inner dimension for which the int32 accumulator cannot overflow.
pub const MAX_ACCUMULATION_DEPTH: usize = 1 << 15;

const MIN_SPAN: f64 = 1e-6;

/// Per-tensor affine parameters: `real = scale · (q − zero_point)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub observed_min: f32,
    pub observed_max: f32,
    pub ema_decay: f32,
}

impl QuantParams {
    /// Asymmetric parameters covering `[min, max]` widened to include zero.
    pub fn from_range(min: f32, max: f32, ema_decay: f32) -> Self {
        let grid = QuantGrid::from_range(min as f64, max as f64);
        QuantParams {
            scale: grid.scale as f32,
            zero_point: grid.zero_point as i32,
            observed_min: grid.lo as f32,
            observed_max: grid.hi as f32,
            ema_decay,
        }
    }

    /// Symmetric parameters for weights: zero point 0 and `m` mapped to level
    /// 127, so re-quantizing a quantized tensor reproduces it exactly. The
    /// recorded range is ±127.5 levels, keeping `scale = (max − min)/255`.
    pub fn symmetric(max_abs: f32) -> Self {
        let m = max_abs.abs().max(MIN_SPAN as f32);
        let scale = m / 127.0;
        QuantParams {
            scale,
            zero_point: 0,
            observed_min: -127.5 * scale,
            observed_max: 127.5 * scale,
            ema_decay: 0.0,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.zero_point == 0
    }

    #[inline]
    pub fn quantize_value(&self, x: f32) -> u8 {
        let q = (x as f64 / self.scale as f64).round() + self.zero_point as f64;
        q.clamp(0.0, 255.0) as u8
    }

    #[inline]
    pub fn dequantize_value(&self, q: u8) -> f32 {
        self.scale * (q as i32 - self.zero_point) as f32
    }
}

/// Quantization grid evaluated in f64; shared by the tape's fake-quant op.
#[derive(Clone, Copy, Debug)]
pub struct QuantGrid {
    pub scale: f64,
    pub zero_point: f64,
    pub lo: f64,
    pub hi: f64,
}

impl QuantGrid {
    pub fn from_range(min: f64, max: f64) -> Self {
        let lo = min.min(0.0);
        let mut hi = max.max(0.0);
        if hi - lo < MIN_SPAN {
            hi = lo + MIN_SPAN;
        }
        let scale = (hi - lo) / 255.0;
        let zero_point = (-lo / scale).round().clamp(0.0, 255.0);
        QuantGrid { scale, zero_point, lo, hi }
    }

    #[inline]
    pub fn fake_quant(&self, x: f64) -> f64 {
        let q = ((x / self.scale).round() + self.zero_point).clamp(0.0, 255.0);
        (q - self.zero_point) * self.scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<u8>,
    pub params: QuantParams,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor<f32> {
        let data = self.values.iter().map(|&q| self.params.dequantize_value(q)).collect();
        Tensor::from_vec(self.rows, self.cols, data).expect("quantized shape")
    }
}

/// Symmetric 8-bit weights (`zero_point == 0`), stored signed.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i8>,
    pub params: QuantParams,
}

impl WeightTensor {
    /// Per-tensor symmetric quantization using the exact min/max of `w`.
    pub fn quantize(w: &Tensor<f32>) -> Self {
        let max_abs = w.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let params = QuantParams::symmetric(max_abs);
        let values = w
            .data()
            .iter()
            .map(|&v| (v as f64 / params.scale as f64).round().clamp(-127.0, 127.0) as i8)
            .collect();
        WeightTensor {
            rows: w.rows(),
            cols: w.cols(),
            values,
            params,
        }
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let s = self.params.scale;
        let data = self.values.iter().map(|&q| s * q as f32).collect();
        Tensor::from_vec(self.rows, self.cols, data).expect("weight shape")
    }

    pub fn dequantize_row(&self, r: usize) -> Vec<f32> {
        let s = self.params.scale;
        self.values[r * self.cols..(r + 1) * self.cols]
            .iter()
            .map(|&q| s * q as f32)
            .collect()
    }
}

/// `q = clamp(round(x/scale) + zero_point, 0, 255)`, rounding half away from zero.
pub fn quantize<T: Real>(x: &Tensor<T>, p: &QuantParams) -> Result<QuantizedTensor> {
    if !(p.scale > 0.0) {
        return Err(Error::InvalidArgument(format!("quantization scale must be positive, got {}", p.scale)));
    }
    Ok(QuantizedTensor {
        rows: x.rows(),
        cols: x.cols(),
        values: x.data().iter().map(|v| p.quantize_value(v.as_f64() as f32)).collect(),
        params: *p,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor<f32> {
    q.dequantize()
}

/// Forward half of fake quantization: `dequantize(quantize(x))`. The
/// straight-through backward lives in the tape op.
pub fn fake_quant<T: Real>(x: &Tensor<T>, p: &QuantParams) -> Tensor<T> {
    let grid = QuantGrid {
        scale: p.scale as f64,
        zero_point: p.zero_point as f64,
        lo: p.observed_min as f64,
        hi: p.observed_max as f64,
    };
    x.map(|v| T::cast_from(grid.fake_quant(v.as_f64())))
}

/// One EMA step of an activation range; zero stays inside the range.
pub fn update_activation_range(p: &QuantParams, batch_min: f32, batch_max: f32) -> QuantParams {
    let d = p.ema_decay;
    let min = d * p.observed_min + (1.0 - d) * batch_min.min(0.0);
    let max = d * p.observed_max + (1.0 - d) * batch_max.max(0.0);
    QuantParams::from_range(min, max, d)
}

/// Fixed-point representation of a positive real multiplier:
/// `M ≈ multiplier · 2^(shift − 31)`, with `multiplier` in `[2^30, 2^31)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedPointMultiplier {
    pub multiplier: i32,
    pub shift: i32,
}

impl FixedPointMultiplier {
    pub fn new(real: f64) -> Result<Self> {
        if !(real > 0.0) || !real.is_finite() {
            return Err(Error::InvalidArgument(format!("requantization multiplier {} must be positive", real)));
        }
        let mut shift = 0i32;
        let mut m = real;
        while m >= 1.0 {
            m /= 2.0;
            shift += 1;
        }
        while m < 0.5 {
            m *= 2.0;
            shift -= 1;
        }
        let mut q = (m * (1u64 << 31) as f64).round() as i64;
        if q == 1i64 << 31 {
            q /= 2;
            shift += 1;
        }
        if shift < -31 {
            return Ok(FixedPointMultiplier { multiplier: 0, shift: 0 });
        }
        Ok(FixedPointMultiplier {
            multiplier: q as i32,
            shift,
        })
    }

    #[inline]
    pub fn apply(&self, acc: i32) -> i32 {
        let left = self.shift.max(0);
        let right = (-self.shift).max(0);
        let x = acc.saturating_mul(1 << left);
        rounding_divide_by_pot(saturating_rounding_doubling_high_mul(x, self.multiplier), right)
    }
}

#[inline]
fn saturating_rounding_doubling_high_mul(a: i32, b: i32) -> i32 {
    if a == i32::MIN && b == i32::MIN {
        return i32::MAX;
    }
    let ab = a as i64 * b as i64;
    let nudge = if ab >= 0 { 1i64 << 30 } else { 1 - (1i64 << 30) };
    ((ab + nudge) / (1i64 << 31)) as i32
}

#[inline]
fn rounding_divide_by_pot(x: i32, exponent: i32) -> i32 {
    if exponent == 0 {
        return x;
    }
    let mask = (1i32 << exponent) - 1;
    let remainder = x & mask;
    let threshold = (mask >> 1) + (x < 0) as i32;
    (x >> exponent) + (remainder > threshold) as i32
}

/// Integer matmul `a (m×k, asymmetric u8) · w (k×n, symmetric i8)` with optional
/// int32 bias at scale `scale_a·scale_w`, requantized to `out`.
pub fn quantized_matmul(
    a: &QuantizedTensor,
    w: &WeightTensor,
    bias: Option<&[i32]>,
    out: &QuantParams,
) -> Result<QuantizedTensor> {
    let kernel = IntegerKernel::new(&a.params, w, bias, out)?;
    if a.cols != w.rows {
        return Err(Error::shape("quantized_matmul", format!("{}×{} · {}×{}", a.rows, a.cols, w.rows, w.cols)));
    }
    Ok(kernel.run(a))
}

/// Precomputed integer matmul: weights, bias and requantization multiplier.
#[derive(Clone, Debug)]
pub struct IntegerKernel<'w> {
    weights: &'w WeightTensor,
    bias: Vec<i32>,
    input: QuantParams,
    output: QuantParams,
    multiplier: FixedPointMultiplier,
}

impl<'w> IntegerKernel<'w> {
    pub fn new(input: &QuantParams, w: &'w WeightTensor, bias: Option<&[i32]>, out: &QuantParams) -> Result<Self> {
        if !w.params.is_symmetric() {
            return Err(Error::InvalidArgument("weights must be symmetric (zero point 0)".into()));
        }
        if w.rows > MAX_ACCUMULATION_DEPTH {
            return Err(Error::InvalidArgument(format!(
                "inner dimension {} exceeds accumulator limit {}",
                w.rows, MAX_ACCUMULATION_DEPTH
            )));
        }
        let bias = match bias {
            Some(b) if b.len() != w.cols => {
                return Err(Error::shape("quantized bias", format!("{} values for {} outputs", b.len(), w.cols)))
            }
            Some(b) => b.to_vec(),
            None => vec![0; w.cols],
        };
        let real = input.scale as f64 * w.params.scale as f64 / out.scale as f64;
        Ok(IntegerKernel {
            weights: w,
            bias,
            input: *input,
            output: *out,
            multiplier: FixedPointMultiplier::new(real)?,
        })
    }

    /// Quantize a float bias at the accumulator scale.
    pub fn quantize_bias(bias: &[f32], input: &QuantParams, w: &WeightTensor) -> Vec<i32> {
        let s = input.scale as f64 * w.params.scale as f64;
        bias.iter()
            .map(|&b| (b as f64 / s).round().clamp(i32::MIN as f64 / 4.0, i32::MAX as f64 / 4.0) as i32)
            .collect()
    }

    pub fn output_params(&self) -> &QuantParams {
        &self.output
    }

    pub fn input_params(&self) -> &QuantParams {
        &self.input
    }

    pub fn run(&self, a: &QuantizedTensor) -> QuantizedTensor {
        let (m, k, n) = (a.rows, a.cols, self.weights.cols);
        let zp_a = a.params.zero_point;
        let zp_out = self.output.zero_point;
        let mut values = vec![0u8; m * n];
        let mut acc = vec![0i32; n];
        let mut centered = vec![0i32; k];
        for i in 0..m {
            acc.copy_from_slice(&self.bias);
            for (c, &q) in centered.iter_mut().zip(&a.values[i * k..(i + 1) * k]) {
                *c = q as i32 - zp_a;
            }
            for (kk, &x) in centered.iter().enumerate() {
                if x == 0 {
                    continue;
                }
                let wrow = &self.weights.values[kk * n..(kk + 1) * n];
                for (s, &w) in acc.iter_mut().zip(wrow) {
                    *s += x * w as i32;
                }
            }
            for (o, &s) in values[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = (zp_out + self.multiplier.apply(s)).clamp(0, 255) as u8;
            }
        }
        QuantizedTensor {
            rows: m,
            cols: n,
            values,
            params: self.output,
        }
    }
}
