//! One-shot layer-wise quantization with Hessian-based error compensation.
//!
//! Columns of the weight matrix are quantized left to right in the same order
//! for every row; after each column the remaining columns are updated with
//! the compensation read off the upper Cholesky factor of the inverse
//! Hessian. Updates inside the active block happen immediately, trailing
//! columns are batched per block — but both paths perform the identical
//! sequence of rank-1 updates, so results are bit-identical for every block
//! size. Convolutions are lowered with im2col and solved per group.

use crate::error::{Error, Result};
use crate::formats::NumericFormat;
use crate::graph::{im2col, LayerKind};
use crate::linalg::{cholesky_lower, spd_inverse, transpose};
use crate::quantizers::fp_quantize_normalized;
use crate::tensor::Tensor;

/// Streaming accumulator for the layer Hessian `H = sum 2 x x^T` over
/// calibration rows.
#[derive(Debug, Clone)]
pub struct HessianAccumulator {
    dim: usize,
    h: Vec<f64>,
    samples: usize,
}

impl HessianAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            h: vec![0.0; dim * dim],
            samples: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Adds one input row: `H += 2 x x^T`.
    pub fn accumulate(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "hessian expects rows of width {}, got {}",
                self.dim,
                x.len()
            )));
        }
        for i in 0..self.dim {
            if x[i] == 0.0 {
                continue;
            }
            let xi2 = 2.0 * x[i];
            for j in 0..self.dim {
                self.h[i * self.dim + j] += xi2 * x[j];
            }
        }
        self.samples += 1;
        Ok(())
    }

    /// Adds every column of a `dim x n` column matrix.
    pub fn accumulate_columns(&mut self, cols: &[f64], n: usize) -> Result<()> {
        if cols.len() != self.dim * n {
            return Err(Error::ShapeMismatch("column matrix size mismatch".into()));
        }
        for k in 0..n {
            let row: Vec<f64> = (0..self.dim).map(|i| cols[i * n + k]).collect();
            self.accumulate(&row)?;
        }
        Ok(())
    }

    pub fn matrix(&self) -> &[f64] {
        &self.h
    }

    /// Damped copy `H + damping * mean(diag H) * I`, the matrix actually
    /// inverted.
    pub fn damped(&self, damping: f64) -> Vec<f64> {
        let mut h = self.h.clone();
        let mean_diag =
            (0..self.dim).map(|i| self.h[i * self.dim + i]).sum::<f64>() / self.dim as f64;
        let bump = damping * mean_diag;
        for i in 0..self.dim {
            h[i * self.dim + i] += bump;
        }
        h
    }
}

/// GPTQ settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GptqSettings {
    pub block_size: usize,
    pub damping: f64,
}

impl Default for GptqSettings {
    fn default() -> Self {
        Self {
            block_size: 32,
            damping: 0.01,
        }
    }
}

fn quantize_scalar(w: f64, s: f64, format: &NumericFormat) -> f64 {
    match format {
        NumericFormat::Int(f) => {
            s * (w / s)
                .round_ties_even()
                .clamp(f.q_min() as f64, f.q_max() as f64)
        }
        NumericFormat::Minifloat(f) => s * fp_quantize_normalized(w / s, *f),
    }
}

/// Upper-triangular Cholesky factor `U` of the inverse of the damped
/// Hessian, with `H^-1 = U^T U`.
fn inverse_cholesky_upper(h: &[f64], dim: usize) -> Result<Vec<f64>> {
    let hinv = spd_inverse(h, dim).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!(
            "Hessian not positive definite after damping: {msg}"
        )),
        other => other,
    })?;
    let l = cholesky_lower(&hinv, dim).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!(
            "inverse Hessian lost positive definiteness: {msg}"
        )),
        other => other,
    })?;
    Ok(transpose(&l, dim, dim))
}

/// Quantizes a `rows x dim` weight matrix column by column with lazy batched
/// compensation. Returns the quantized values (`s` times grid points).
pub fn gptq_quantize_matrix(
    w: &[f64],
    rows: usize,
    row_scales: &[f64],
    hessian: &HessianAccumulator,
    format: &NumericFormat,
    settings: &GptqSettings,
) -> Result<Vec<f64>> {
    let dim = hessian.dim();
    if w.len() != rows * dim || row_scales.len() != rows {
        return Err(Error::ShapeMismatch(
            "weight matrix does not match the Hessian dimension".into(),
        ));
    }
    let block = settings.block_size.max(1);
    let damped = hessian.damped(settings.damping);
    let u = inverse_cholesky_upper(&damped, dim)?;

    let mut work = w.to_vec();
    let mut out = vec![0.0; rows * dim];
    // per-row quantization error of each column in the active block,
    // pre-divided by U[q][q]
    let mut block_err = vec![0.0; rows * block];

    let mut start = 0;
    while start < dim {
        let end = (start + block).min(dim);
        for q in start..end {
            let uqq = u[q * dim + q];
            for r in 0..rows {
                let wq = work[r * dim + q];
                let quantized = quantize_scalar(wq, row_scales[r], format);
                out[r * dim + q] = quantized;
                let err = (wq - quantized) / uqq;
                block_err[r * block + (q - start)] = err;
                // immediate update of the remaining columns in the block
                for j in q + 1..end {
                    work[r * dim + j] -= err * u[q * dim + j];
                }
            }
        }
        // lazy batch update of everything past the block: identical rank-1
        // updates, just deferred
        for q in start..end {
            for r in 0..rows {
                let err = block_err[r * block + (q - start)];
                for j in end..dim {
                    work[r * dim + j] -= err * u[q * dim + j];
                }
            }
        }
        start = end;
    }
    Ok(out)
}

/// Quantizes a convolution layer with per-group Hessians built from im2col
/// patches of the calibration inputs. `inputs` are the layer's input feature
/// maps. Returns the quantized weight tensor.
pub fn gptq_quantize_conv(
    kind: &LayerKind,
    inputs: &[Tensor],
    row_scales: &[f64],
    format: &NumericFormat,
    settings: &GptqSettings,
) -> Result<Tensor> {
    let (weight, stride, padding, groups) = match kind {
        LayerKind::Conv2d {
            weight,
            stride,
            padding,
            groups,
            ..
        } => (weight, *stride, *padding, *groups),
        _ => {
            return Err(Error::InvalidArgument(
                "gptq_quantize_conv expects a Conv2d layer".into(),
            ))
        }
    };
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no calibration inputs".into()));
    }
    let (c_out, c_in_g, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let dim = c_in_g * kh * kw;
    let out_per_group = c_out / groups;

    let mut hessians: Vec<HessianAccumulator> =
        (0..groups).map(|_| HessianAccumulator::new(dim)).collect();
    for x in inputs {
        let (cols, oh, ow) = im2col(x, kh, kw, stride, padding);
        let spatial = oh * ow;
        for (g, hess) in hessians.iter_mut().enumerate() {
            let g_cols = &cols[g * dim * spatial..(g + 1) * dim * spatial];
            hess.accumulate_columns(g_cols, spatial)?;
        }
    }

    let mut out = vec![0.0; weight.len()];
    for g in 0..groups {
        let w_g = &weight.data()[g * out_per_group * dim..(g + 1) * out_per_group * dim];
        let scales_g = &row_scales[g * out_per_group..(g + 1) * out_per_group];
        let q = gptq_quantize_matrix(w_g, out_per_group, scales_g, &hessians[g], format, settings)?;
        out[g * out_per_group * dim..(g + 1) * out_per_group * dim].copy_from_slice(&q);
    }
    Tensor::new(weight.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::IntFormat;
    use crate::quantizers::{self, Granularity};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn int_fmt(bits: u32) -> NumericFormat {
        NumericFormat::Int(IntFormat::new(bits).unwrap())
    }

    #[test]
    fn hessian_accumulates_outer_products() {
        let mut h = HessianAccumulator::new(2);
        h.accumulate(&[1.0, 0.0]).unwrap();
        assert_eq!(h.matrix(), &[2.0, 0.0, 0.0, 0.0]);
        // identity-basis rows: H = 2 I after d rows
        let mut h = HessianAccumulator::new(2);
        h.accumulate(&[1.0, 0.0]).unwrap();
        h.accumulate(&[0.0, 1.0]).unwrap();
        assert_eq!(h.matrix(), &[2.0, 0.0, 0.0, 2.0]);
        // zero rows leave H zero
        let h = HessianAccumulator::new(3);
        assert!(h.matrix().iter().all(|v| *v == 0.0));
        // width mismatch rejected
        let mut h = HessianAccumulator::new(2);
        assert!(h.accumulate(&[1.0]).is_err());
    }

    /// Reconstruction objective `||(W - Q) X||^2` expressed through H/2.
    fn objective(w: &[f64], q: &[f64], h: &[f64], rows: usize, dim: usize) -> f64 {
        let mut total = 0.0;
        for r in 0..rows {
            for i in 0..dim {
                for j in 0..dim {
                    total += (w[r * dim + i] - q[r * dim + i]) * 0.5 * h[i * dim + j]
                        * (w[r * dim + j] - q[r * dim + j]);
                }
            }
        }
        total
    }

    #[test]
    fn identity_hessian_reduces_to_round_to_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (rows, dim) = (4, 6);
        let w: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scales = vec![0.3; rows];
        let mut hess = HessianAccumulator::new(dim);
        for i in 0..dim {
            let mut row = vec![0.0; dim];
            row[i] = 1.0;
            hess.accumulate(&row).unwrap();
        }
        let fmt = int_fmt(3);
        let q = gptq_quantize_matrix(&w, rows, &scales, &hess, &fmt, &GptqSettings::default())
            .unwrap();
        let rtn = crate::rounding::rtn_values(&w, rows, dim, &scales, &fmt);
        assert_eq!(q, rtn);
    }

    #[test]
    fn compensation_matches_hand_worked_example() {
        // W = [0.6, 0.6], H = [[2,1],[1,2]], integer-like grid {.., 0, 1, ..}
        // with s = 1: first column rounds to 1, the compensation pushes the
        // second to 0.4, which rounds to 0
        // rows u = sqrt(3)/2 * [1, 1] and v = 1/2 * [1, -1] give
        // H = 2(u u^T + v v^T) = [[2, 1], [1, 2]]
        let mut hess = HessianAccumulator::new(2);
        let u = (1.5f64 / 2.0).sqrt();
        let v = (0.5f64 / 2.0).sqrt();
        hess.accumulate(&[u, u]).unwrap();
        hess.accumulate(&[v, -v]).unwrap();
        for (got, want) in hess.matrix().iter().zip([2.0, 1.0, 1.0, 2.0]) {
            assert!((got - want).abs() < 1e-12, "H = {:?}", hess.matrix());
        }

        let settings = GptqSettings {
            damping: 0.0,
            ..GptqSettings::default()
        };
        let fmt = int_fmt(4); // grid step 1 at s = 1 covers {0, 1}
        let q = gptq_quantize_matrix(&[0.6, 0.6], 1, &[1.0], &hess, &fmt, &settings).unwrap();
        assert_eq!(q, vec![1.0, 0.0]);

        // brute-force oracle over all four assignments of {0, 1}
        let mut best = (f64::INFINITY, vec![]);
        for c0 in [0.0, 1.0] {
            for c1 in [0.0, 1.0] {
                let cand = vec![c0, c1];
                let obj = objective(&[0.6, 0.6], &cand, hess.matrix(), 1, 2);
                if obj < best.0 {
                    best = (obj, cand);
                }
            }
        }
        let gptq_obj = objective(&[0.6, 0.6], &q, hess.matrix(), 1, 2);
        let rtn_obj = objective(&[0.6, 0.6], &[1.0, 1.0], hess.matrix(), 1, 2);
        assert!(gptq_obj <= rtn_obj);
        // (1,0) and (0,1) tie at the optimum; greedy picks one of them
        assert!(
            (gptq_obj - best.0).abs() < 1e-12,
            "greedy {gptq_obj} vs exhaustive {}",
            best.0
        );
    }

    fn random_correlated_hessian(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> HessianAccumulator {
        let mut hess = HessianAccumulator::new(dim);
        let mix: Vec<f64> = (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..n {
            let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let row: Vec<f64> = (0..dim)
                .map(|i| (0..dim).map(|j| mix[i * dim + j] * raw[j]).sum())
                .collect();
            hess.accumulate(&row).unwrap();
        }
        hess
    }

    #[test]
    fn block_size_does_not_change_the_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let fmt = int_fmt(3);
        for _ in 0..50 {
            let (rows, dim) = (8, 8);
            let w: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scales = vec![t / 3.0; rows];
            let hess = random_correlated_hessian(&mut rng, dim, 32);
            let mut previous: Option<Vec<f64>> = None;
            for block_size in [1, 2, 3, 8] {
                let settings = GptqSettings {
                    block_size,
                    ..GptqSettings::default()
                };
                let q = gptq_quantize_matrix(&w, rows, &scales, &hess, &fmt, &settings).unwrap();
                if let Some(prev) = &previous {
                    // bit-identical across block sizes
                    assert_eq!(prev, &q, "block size {block_size} diverged");
                }
                previous = Some(q);
            }
        }
    }

    #[test]
    fn median_objective_beats_round_to_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let fmt = int_fmt(3);
        let mut gptq_objs = Vec::new();
        let mut rtn_objs = Vec::new();
        for _ in 0..200 {
            let (rows, dim) = (4, 8);
            let w: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scales = vec![t / 3.0; rows];
            let hess = random_correlated_hessian(&mut rng, dim, 24);
            let q = gptq_quantize_matrix(&w, rows, &scales, &hess, &fmt, &GptqSettings::default())
                .unwrap();
            let rtn = crate::rounding::rtn_values(&w, rows, dim, &scales, &fmt);
            gptq_objs.push(objective(&w, &q, hess.matrix(), rows, dim));
            rtn_objs.push(objective(&w, &rtn, hess.matrix(), rows, dim));
        }
        gptq_objs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rtn_objs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med_gptq = gptq_objs[100];
        let med_rtn = rtn_objs[100];
        assert!(
            med_gptq < med_rtn,
            "median GPTQ {med_gptq} vs median RTN {med_rtn}"
        );
    }

    #[test]
    fn exhaustive_oracle_on_tiny_layers() {
        // <= 8 weights, <= 4 grid points: enumerate every assignment; GPTQ
        // must never lose to RTN, and the greedy/optimal gap is reported
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let fmt = int_fmt(2); // grid {-2,-1,0,1}
        let mut gap_sum = 0.0;
        let mut worse_than_rtn = 0;
        let trials = 50;
        for _ in 0..trials {
            let (rows, dim) = (2, 4);
            let w: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-0.9..0.9)).collect();
            let scales = vec![0.5; rows];
            let hess = random_correlated_hessian(&mut rng, dim, 16);
            let q = gptq_quantize_matrix(&w, rows, &scales, &hess, &fmt, &GptqSettings::default())
                .unwrap();
            let rtn = crate::rounding::rtn_values(&w, rows, dim, &scales, &fmt);
            let obj_q = objective(&w, &q, hess.matrix(), rows, dim);
            let obj_rtn = objective(&w, &rtn, hess.matrix(), rows, dim);
            if obj_q > obj_rtn + 1e-12 {
                worse_than_rtn += 1;
            }

            // exhaustive minimum over all grid assignments, row by row (rows
            // are independent in the objective)
            let grid = [-1.0, -0.5, 0.0, 0.5]; // codes * s
            let mut best_total = 0.0;
            for r in 0..rows {
                let wr = &w[r * dim..(r + 1) * dim];
                let mut best = f64::INFINITY;
                let combos = grid.len().pow(dim as u32);
                for mut c in 0..combos {
                    let mut cand = vec![0.0; dim];
                    for slot in cand.iter_mut() {
                        *slot = grid[c % grid.len()];
                        c /= grid.len();
                    }
                    let obj = objective(wr, &cand, hess.matrix(), 1, dim);
                    best = best.min(obj);
                }
                best_total += best;
            }
            gap_sum += obj_q - best_total;
            assert!(obj_q >= best_total - 1e-12, "greedy beat the exhaustive minimum?");
        }
        // the gap is informational: greedy is not optimal, only never-worse
        // than RTN in aggregate
        println!(
            "greedy/optimal mean gap over {trials} layers: {:.6}",
            gap_sum / trials as f64
        );
        assert!(
            worse_than_rtn <= trials / 5,
            "GPTQ lost to RTN on {worse_than_rtn}/{trials} tiny layers"
        );
    }

    #[test]
    fn conv_1x1_matches_matrix_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let (c_in, c_out, h, w) = (4, 3, 5, 5);
        let weight = Tensor::new(
            vec![c_out, c_in, 1, 1],
            (0..c_out * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let kind = LayerKind::Conv2d {
            weight: weight.clone(),
            bias: vec![0.0; c_out],
            stride: 1,
            padding: 0,
            groups: 1,
        };
        let inputs: Vec<Tensor> = (0..6)
            .map(|_| {
                Tensor::new(
                    vec![c_in, h, w],
                    (0..c_in * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let fmt = int_fmt(4);
        let spec = quantizers::compute_scale(&weight, &fmt, Granularity::PerChannel { axis: 0 })
            .unwrap();
        let scales = spec.row_scales(c_out);
        let settings = GptqSettings::default();
        let q_conv = gptq_quantize_conv(&kind, &inputs, &scales, &fmt, &settings).unwrap();

        // a 1x1 convolution is exactly a linear layer over per-pixel columns
        let mut hess = HessianAccumulator::new(c_in);
        for x in &inputs {
            let (cols, oh, ow) = im2col(x, 1, 1, 1, 0);
            hess.accumulate_columns(&cols, oh * ow).unwrap();
        }
        let q_mat =
            gptq_quantize_matrix(weight.data(), c_out, &scales, &hess, &fmt, &settings).unwrap();
        assert_eq!(q_conv.data(), q_mat.as_slice());
    }

    #[test]
    fn depthwise_identity_hessian_is_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let c = 4;
        let weight = Tensor::new(
            vec![c, 1, 3, 3],
            (0..c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let kind = LayerKind::Conv2d {
            weight: weight.clone(),
            bias: vec![0.0; c],
            stride: 1,
            padding: 1,
            groups: c,
        };
        let fmt = int_fmt(3);
        let spec =
            quantizers::compute_scale(&weight, &fmt, Granularity::PerChannel { axis: 0 }).unwrap();
        let scales = spec.row_scales(c);
        // craft inputs whose im2col columns form (scaled) identity bases per
        // group is fiddly; instead check structure: each output channel is an
        // independent single-row solve, so RTN equality under an identity
        // Hessian reduces to the matrix test per group
        for g in 0..c {
            let mut hess = HessianAccumulator::new(9);
            for i in 0..9 {
                let mut row = vec![0.0; 9];
                row[i] = 1.0;
                hess.accumulate(&row).unwrap();
            }
            let w_g = &weight.data()[g * 9..(g + 1) * 9];
            let q = gptq_quantize_matrix(
                w_g,
                1,
                &scales[g..g + 1],
                &hess,
                &fmt,
                &GptqSettings::default(),
            )
            .unwrap();
            let rtn = crate::rounding::rtn_values(w_g, 1, 9, &scales[g..g + 1], &fmt);
            assert_eq!(q, rtn);
        }
        let _ = kind;
    }

    #[test]
    fn grid_membership_for_minifloat_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let f = crate::formats::MinifloatFormat::new(2, 1).unwrap();
        let fmt = NumericFormat::Minifloat(f);
        let grid = f.enumerate_grid();
        let (rows, dim) = (4, 6);
        let w: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scales = vec![t / f.q_max(); rows];
        let hess = random_correlated_hessian(&mut rng, dim, 32);
        let q = gptq_quantize_matrix(&w, rows, &scales, &hess, &fmt, &GptqSettings::default())
            .unwrap();
        for (i, v) in q.iter().enumerate() {
            let norm = v / scales[i / dim];
            let snapped = crate::quantizers::fp_quantize_normalized(norm, f);
            assert!(
                (norm - snapped).abs() <= 1e-12 * f.q_max(),
                "element {i}: {norm} off grid"
            );
            let _ = &grid;
        }
    }

    #[test]
    fn cholesky_failure_carries_diagnostic() {
        let hess = HessianAccumulator::new(2); // zero matrix
        let settings = GptqSettings {
            damping: 0.0,
            ..GptqSettings::default()
        };
        let fmt = int_fmt(3);
        let err = gptq_quantize_matrix(&[0.5, 0.5], 1, &[1.0], &hess, &fmt, &settings)
            .unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "got {err:?}");
        assert!(err.to_string().contains("pivot"));
    }
}
