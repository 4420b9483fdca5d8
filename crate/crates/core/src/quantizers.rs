//! Fake-quantization kernels: integer and minifloat quantize/dequantize with
//! per-tensor or per-channel outer scales.
//!
//! The minifloat kernel uses two-level scaling: an outer scale `s = t / q_max`
//! shared per tensor or per channel, and an inner per-element power-of-two
//! scale `ss = 2^p` with `p = max(floor(log2 |x/s|) - m, 1 - b - m)` that picks
//! the binade. Rounding is round-half-to-even throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{floor_log2, pow2, IntFormat, MinifloatFormat, NumericFormat};
use crate::tensor::Tensor;

/// Scale granularity for the outer scaling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One scale per slice along the given axis (the output-channel axis of a
    /// weight tensor).
    PerChannel {
        axis: usize,
    },
}

/// Outer scales `s` and the range statistics `t` they derive from.
///
/// `s = t / q_max` elementwise; a channel with `t = 0` gets the smallest
/// positive normal double instead so dead channels quantize to zero rather
/// than aborting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub granularity: Granularity,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
}

impl ScalingSpec {
    /// Per-tensor spec from a range statistic `t`.
    pub fn per_tensor(t: f64, format: &NumericFormat) -> Self {
        Self {
            granularity: Granularity::PerTensor,
            t: vec![t],
            s: vec![scale_from_t(t, format)],
        }
    }

    /// The single scale of a per-tensor spec.
    pub fn scalar_scale(&self) -> f64 {
        debug_assert_eq!(self.s.len(), 1);
        self.s[0]
    }

    /// Scale applying to flat element `idx` of a tensor with the given shape.
    pub fn scale_at(&self, shape: &[usize], idx: usize) -> f64 {
        match self.granularity {
            Granularity::PerTensor => self.s[0],
            Granularity::PerChannel { axis } => {
                let stride: usize = shape[axis + 1..].iter().product();
                self.s[(idx / stride) % shape[axis]]
            }
        }
    }

    /// One scale per row of a `rows x cols` matrix view of the tensor
    /// (per-channel axis-0 scales, or the per-tensor scale broadcast).
    pub fn row_scales(&self, rows: usize) -> Vec<f64> {
        match self.granularity {
            Granularity::PerTensor => vec![self.s[0]; rows],
            Granularity::PerChannel { .. } => {
                debug_assert_eq!(self.s.len(), rows);
                self.s.clone()
            }
        }
    }

    fn check_shape(&self, shape: &[usize]) -> Result<()> {
        match self.granularity {
            Granularity::PerTensor => {
                if self.s.len() != 1 {
                    return Err(Error::ShapeMismatch(
                        "per-tensor spec must hold exactly one scale".into(),
                    ));
                }
            }
            Granularity::PerChannel { axis } => {
                if axis >= shape.len() || self.s.len() != shape[axis] {
                    return Err(Error::ShapeMismatch(format!(
                        "per-channel spec with {} scales does not match axis {} of shape {:?}",
                        self.s.len(),
                        axis,
                        shape
                    )));
                }
            }
        }
        Ok(())
    }
}

fn scale_from_t(t: f64, format: &NumericFormat) -> f64 {
    if t == 0.0 {
        f64::MIN_POSITIVE
    } else {
        t / format.q_max()
    }
}

/// A fake-quantized tensor: real values constrained to the format's grid
/// (after division by the outer scale), plus the spec that produced them.
#[derive(Debug, Clone)]
pub struct QTensor {
    pub values: Tensor,
    pub format: NumericFormat,
    pub scaling: ScalingSpec,
}

/// Computes the outer scales for `x`: `t = max(|x|)` per tensor or per
/// channel, `s = t / q_max`.
pub fn compute_scale(
    x: &Tensor,
    format: &NumericFormat,
    granularity: Granularity,
) -> Result<ScalingSpec> {
    if x.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot compute scales of an empty tensor".into(),
        ));
    }
    let t = match granularity {
        Granularity::PerTensor => vec![x.max_abs()],
        Granularity::PerChannel { axis } => {
            if axis >= x.rank() {
                return Err(Error::InvalidArgument(format!(
                    "channel axis {} out of range for shape {:?}",
                    axis,
                    x.shape()
                )));
            }
            (0..x.shape()[axis])
                .map(|ch| x.max_abs_channel(axis, ch))
                .collect()
        }
    };
    let s = t.iter().map(|&t| scale_from_t(t, format)).collect();
    Ok(ScalingSpec { granularity, t, s })
}

/// Integer fake quantization: `clip(round(x/s), q_min, q_max) * s`.
pub fn int_quantize(x: &Tensor, spec: &ScalingSpec, format: IntFormat) -> Result<QTensor> {
    spec.check_shape(x.shape())?;
    let (q_min, q_max) = (format.q_min() as f64, format.q_max() as f64);
    let mut out = x.clone();
    let shape = x.shape().to_vec();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let s = spec.scale_at(&shape, i);
        let code = (*v / s).round_ties_even().clamp(q_min, q_max);
        *v = s * code;
    }
    Ok(QTensor {
        values: out,
        format: NumericFormat::Int(format),
        scaling: spec.clone(),
    })
}

/// Integer codes for `x` under `spec` (the `clip(round(x/s), ...)` step
/// without the dequantize).
pub fn int_codes(x: &Tensor, spec: &ScalingSpec, format: IntFormat) -> Result<Vec<i64>> {
    spec.check_shape(x.shape())?;
    let (q_min, q_max) = (format.q_min() as f64, format.q_max() as f64);
    Ok(x.data()
        .iter()
        .enumerate()
        .map(|(i, v)| (*v / spec.scale_at(x.shape(), i)).round_ties_even().clamp(q_min, q_max) as i64)
        .collect())
}

/// Quantizes a single already-normalized value `x_bar = x / s` onto the
/// minifloat grid: inner scale selection, round-half-even, saturating clip.
pub fn fp_quantize_normalized(x_bar: f64, format: MinifloatFormat) -> f64 {
    if x_bar == 0.0 {
        return 0.0;
    }
    let m = format.mantissa_bits() as i32;
    let p = (floor_log2(x_bar) - m).max(format.min_scale_exp());
    let ss = pow2(p);
    let q = ss * (x_bar / ss).round_ties_even();
    q.clamp(format.q_min(), format.q_max())
}

/// Minifloat fake quantization with two-level scaling.
pub fn fp_quantize(x: &Tensor, spec: &ScalingSpec, format: MinifloatFormat) -> Result<QTensor> {
    spec.check_shape(x.shape())?;
    let mut out = x.clone();
    let shape = x.shape().to_vec();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let s = spec.scale_at(&shape, i);
        *v = s * fp_quantize_normalized(*v / s, format);
    }
    Ok(QTensor {
        values: out,
        format: NumericFormat::Minifloat(format),
        scaling: spec.clone(),
    })
}

/// Fake-quantizes with either kernel depending on the format.
pub fn quantize(x: &Tensor, spec: &ScalingSpec, format: &NumericFormat) -> Result<QTensor> {
    match format {
        NumericFormat::Int(f) => int_quantize(x, spec, *f),
        NumericFormat::Minifloat(f) => fp_quantize(x, spec, *f),
    }
}

/// Returns the dequantized values. Fake quantization already stores real
/// values, so this is the identity; it exists to make the contract explicit.
pub fn dequantize(q: &QTensor) -> Tensor {
    q.values.clone()
}
