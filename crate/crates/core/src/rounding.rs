//! Gradient-based learned rounding for weight quantization.
//!
//! Each weight gets a floor/ceil decision parameterized by a rectified
//! sigmoid `h(V)`; the layer-wise reconstruction error `||WX - W_hat X||^2`
//! plus an annealed binarization regularizer is minimized by Adam with
//! analytic gradients. For minifloats, the inner power-of-two scale of each
//! weight is frozen at its initial value so the decision stays a clean
//! floor/ceil choice on a fixed grid rung. The hardened result is kept only
//! if it reconstructs at least as well as round-to-nearest, otherwise the
//! optimizer falls back to round-to-nearest.

use crate::error::{Error, Result};
use crate::formats::{floor_log2, pow2, IntFormat, MinifloatFormat, NumericFormat};
use crate::quantizers::fp_quantize_normalized;

pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;

/// Hyperparameters of the rounding optimization.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RoundingHyper {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Fraction of the step budget run without the regularizer.
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for RoundingHyper {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-2,
            lambda: 0.1,
            beta_start: 20.0,
            beta_end: 2.0,
            warmup_frac: 0.2,
            seed: 0,
        }
    }
}

/// Rectified sigmoid `clip(sigmoid(v) * (zeta - gamma) + gamma, 0, 1)`.
pub fn rectified_sigmoid(v: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-v).exp());
    (sig * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

/// Derivative of the rectified sigmoid, zero in the clipped regions.
pub fn rectified_sigmoid_grad(v: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-v).exp());
    let raw = sig * (ZETA - GAMMA) + GAMMA;
    if raw <= 0.0 || raw >= 1.0 {
        0.0
    } else {
        (ZETA - GAMMA) * sig * (1.0 - sig)
    }
}

/// `V` value whose rectified sigmoid equals `h` (for `h` in [0, 1]).
fn init_v(h: f64) -> f64 {
    let target = ((h - GAMMA) / (ZETA - GAMMA)).clamp(1e-9, 1.0 - 1e-9);
    (target / (1.0 - target)).ln()
}

/// Binarization penalty `1 - |2h - 1|^beta` and its derivative in `h`.
fn reg_term(h: f64, beta: f64) -> (f64, f64) {
    let t = 2.0 * h - 1.0;
    let a = t.abs();
    let value = 1.0 - a.powf(beta);
    let grad = if a == 0.0 {
        0.0
    } else {
        -2.0 * beta * a.powf(beta - 1.0) * t.signum()
    };
    (value, grad)
}

/// Soft integer code: `clip(floor(w_norm) + h, q_min, q_max)` on the
/// normalized weight `w / s`.
pub fn soft_int_code(w_norm: f64, h: f64, format: IntFormat) -> f64 {
    (w_norm.floor() + h).clamp(format.q_min() as f64, format.q_max() as f64)
}

/// Frozen inner scale of the minifloat soft quantizer, from the two-level
/// scale rule evaluated at the normalized weight.
pub fn frozen_inner_scale(w_bar: f64, format: MinifloatFormat) -> f64 {
    if w_bar == 0.0 {
        pow2(format.min_scale_exp())
    } else {
        let p = (floor_log2(w_bar) - format.mantissa_bits() as i32).max(format.min_scale_exp());
        pow2(p)
    }
}

/// Soft minifloat value on the normalized weight:
/// `clip(ss * (floor(w_bar/ss) + h), q_min, q_max)` with `ss` frozen at the
/// initial `w_bar`.
pub fn soft_fp_value(w_bar: f64, h: f64, format: MinifloatFormat) -> f64 {
    let ss = frozen_inner_scale(w_bar, format);
    (ss * ((w_bar / ss).floor() + h)).clamp(format.q_min(), format.q_max())
}

/// Result of optimizing one layer's rounding.
#[derive(Debug, Clone)]
pub struct RoundingOutcome {
    /// Quantized weight values (`s` times a grid point), row-major.
    pub values: Vec<f64>,
    /// Reconstruction error of the returned values, `||(W_hat - W) X||^2`.
    pub error: f64,
    /// Reconstruction error of plain round-to-nearest.
    pub rtn_error: f64,
    /// True when the optimizer diverged or lost to round-to-nearest and the
    /// round-to-nearest weights were returned instead.
    pub used_fallback: bool,
    /// Fraction of `h(V)` entries within 1e-3 of {0, 1} after annealing.
    pub hardened_frac: f64,
}

struct SoftElement {
    /// Outer scale of this element's row.
    s: f64,
    /// Frozen inner scale (1 for integer formats).
    ss: f64,
    /// Floor of the (inner-)normalized weight.
    base: f64,
    /// Clip bounds in the inner domain.
    lo: f64,
    hi: f64,
}

impl SoftElement {
    /// Quantized value and d(value)/dh.
    fn value_and_grad(&self, h: f64) -> (f64, f64) {
        let inner = self.ss * (self.base + h);
        if inner <= self.lo {
            (self.s * self.lo, 0.0)
        } else if inner >= self.hi {
            (self.s * self.hi, 0.0)
        } else {
            (self.s * inner, self.s * self.ss)
        }
    }
}

/// Gram matrix `X X^T` of a `d x n` column matrix.
pub fn gram(x_cols: &[f64], d: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(x_cols.len(), d * n);
    let mut g = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for k in 0..n {
                acc += x_cols[i * n + k] * x_cols[j * n + k];
            }
            g[i * d + j] = acc;
            g[j * d + i] = acc;
        }
    }
    g
}

/// `sum_r (d_r G d_r^T)` for row-major `diff` rows (the reconstruction error
/// `||diff * X||_F^2` expressed through the Gram matrix `G = X X^T`).
fn recon_error(diff: &[f64], g: &[f64], rows: usize, d: usize) -> f64 {
    let mut total = 0.0;
    for r in 0..rows {
        let dr = &diff[r * d..(r + 1) * d];
        for i in 0..d {
            if dr[i] == 0.0 {
                continue;
            }
            let gi = &g[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += gi[j] * dr[j];
            }
            total += dr[i] * acc;
        }
    }
    total
}

/// Round-to-nearest quantized values for a weight matrix with per-row scales.
pub fn rtn_values(
    w: &[f64],
    rows: usize,
    d: usize,
    row_scales: &[f64],
    format: &NumericFormat,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let s = row_scales[r];
        for c in 0..d {
            let wn = w[r * d + c] / s;
            out[r * d + c] = match format {
                NumericFormat::Int(f) => {
                    s * wn
                        .round_ties_even()
                        .clamp(f.q_min() as f64, f.q_max() as f64)
                }
                NumericFormat::Minifloat(f) => s * fp_quantize_normalized(wn, *f),
            };
        }
    }
    out
}

/// Optimizes the rounding of a `rows x d` weight matrix against calibration
/// columns `x_cols` (`d x n_cols`), returning hardened quantized values with
/// the never-worse-than-round-to-nearest guarantee.
pub fn learn_rounding(
    w: &[f64],
    rows: usize,
    d: usize,
    row_scales: &[f64],
    format: &NumericFormat,
    x_cols: &[f64],
    n_cols: usize,
    hyper: &RoundingHyper,
) -> Result<RoundingOutcome> {
    if w.len() != rows * d || row_scales.len() != rows {
        return Err(Error::ShapeMismatch(
            "weight matrix and scales disagree".into(),
        ));
    }
    if x_cols.len() != d * n_cols || n_cols == 0 {
        return Err(Error::ShapeMismatch(
            "calibration columns do not match the weight matrix".into(),
        ));
    }
    let g = gram(x_cols, d, n_cols);
    let rtn = rtn_values(w, rows, d, row_scales, format);
    let rtn_diff: Vec<f64> = rtn.iter().zip(w).map(|(a, b)| a - b).collect();
    let rtn_error = recon_error(&rtn_diff, &g, rows, d);

    // per-element soft-quantizer state and V initialized so h reproduces the
    // exact fractional remainder (the soft weights start identical to W)
    let count = rows * d;
    let mut elems = Vec::with_capacity(count);
    let mut v = vec![0.0; count];
    for r in 0..rows {
        let s = row_scales[r];
        for c in 0..d {
            let wn = w[r * d + c] / s;
            let (ss, lo, hi) = match format {
                NumericFormat::Int(f) => (1.0, f.q_min() as f64, f.q_max() as f64),
                NumericFormat::Minifloat(f) => {
                    (frozen_inner_scale(wn, *f), f.q_min(), f.q_max())
                }
            };
            let base = (wn / ss).floor();
            let frac = wn / ss - base;
            v[r * d + c] = init_v(frac);
            elems.push(SoftElement { s, ss, base, lo, hi });
        }
    }

    // reconstruction is a mean over output entries (rows x columns) so the
    // regularizer sum with a fixed lambda keeps the same relative strength
    // across layer and calibration sizes
    let scale_norm = 1.0 / (rows * n_cols) as f64;
    let reg_norm = 1.0;
    let warmup = ((hyper.steps as f64) * hyper.warmup_frac) as usize;

    // Adam state
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; count];
    let mut vv = vec![0.0; count];

    let mut values = vec![0.0; count];
    let mut dvdh = vec![0.0; count];
    let mut diverged = false;

    'outer: for step in 0..hyper.steps {
        for (i, e) in elems.iter().enumerate() {
            let h = rectified_sigmoid(v[i]);
            let (val, gr) = e.value_and_grad(h);
            values[i] = val;
            dvdh[i] = gr;
        }
        // gradient of the mean reconstruction error w.r.t. the soft values:
        // 2 * (W_hat - W) * G, row by row
        let mut grad = vec![0.0; count];
        for r in 0..rows {
            let base = r * d;
            for i in 0..d {
                let diff_i = values[base + i] - w[base + i];
                if diff_i == 0.0 {
                    continue;
                }
                let gi = &g[i * d..(i + 1) * d];
                for j in 0..d {
                    grad[base + j] += 2.0 * diff_i * gi[j] * scale_norm;
                }
            }
        }
        let beta = if step < warmup {
            hyper.beta_start
        } else if hyper.steps == warmup {
            hyper.beta_end
        } else {
            let t = (step - warmup) as f64 / (hyper.steps - warmup) as f64;
            hyper.beta_start + (hyper.beta_end - hyper.beta_start) * t
        };
        for i in 0..count {
            let h = rectified_sigmoid(v[i]);
            let hg = rectified_sigmoid_grad(v[i]);
            let mut gi = grad[i] * dvdh[i] * hg;
            if step >= warmup {
                let (_, reg_grad) = reg_term(h, beta);
                gi += hyper.lambda * reg_grad * reg_norm * hg;
            }
            if !gi.is_finite() {
                diverged = true;
                break 'outer;
            }
            // Adam update
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            vv[i] = beta2 * vv[i] + (1.0 - beta2) * gi * gi;
            let mh = m[i] / (1.0 - beta1.powi(step as i32 + 1));
            let vh = vv[i] / (1.0 - beta2.powi(step as i32 + 1));
            v[i] -= hyper.lr * mh / (vh.sqrt() + eps);
        }
    }

    // harden h to {0, 1} at threshold 0.5 and verify grid membership
    let mut hardened = vec![0.0; count];
    let mut near_binary = 0usize;
    for (i, e) in elems.iter().enumerate() {
        let h = rectified_sigmoid(v[i]);
        if h <= 1e-3 || h >= 1.0 - 1e-3 {
            near_binary += 1;
        }
        let bit = if h >= 0.5 { 1.0 } else { 0.0 };
        let (val, _) = e.value_and_grad(bit);
        hardened[i] = match format {
            NumericFormat::Int(_) => val,
            NumericFormat::Minifloat(f) => {
                // re-snap in case a frozen-scale ceiling crossed a binade
                e.s * fp_quantize_normalized(val / e.s, *f)
            }
        };
    }
    let hard_diff: Vec<f64> = hardened.iter().zip(w).map(|(a, b)| a - b).collect();
    let hard_error = recon_error(&hard_diff, &g, rows, d);

    if diverged || !hard_error.is_finite() || hard_error > rtn_error {
        return Ok(RoundingOutcome {
            values: rtn,
            error: rtn_error,
            rtn_error,
            used_fallback: true,
            hardened_frac: near_binary as f64 / count as f64,
        });
    }
    Ok(RoundingOutcome {
        values: hardened,
        error: hard_error,
        rtn_error,
        used_fallback: false,
        hardened_frac: near_binary as f64 / count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn int3() -> NumericFormat {
        NumericFormat::Int(IntFormat::new(3).unwrap())
    }

    #[test]
    fn soft_int_code_floor_ceil_and_mid() {
        let f = IntFormat::new(4).unwrap();
        assert_eq!(soft_int_code(2.6, 0.0, f), 2.0);
        assert_eq!(soft_int_code(2.6, 1.0, f), 3.0);
        assert_eq!(soft_int_code(2.6, 0.5, f), 2.5);
        // clip at the range edges
        assert_eq!(soft_int_code(7.4, 1.0, f), 7.0);
        assert_eq!(soft_int_code(-8.6, 0.0, f), -8.0);
    }

    #[test]
    fn soft_fp_value_examples() {
        // w_bar = 5.2 in e2m1(b=1): ss = 2, floor = 2 -> h=0 gives 4, h=1 gives 6
        let f = MinifloatFormat::with_bias(2, 1, 1).unwrap();
        assert_eq!(soft_fp_value(5.2, 0.0, f), 4.0);
        assert_eq!(soft_fp_value(5.2, 1.0, f), 6.0);
        // hardened results are adjacent grid points
        let grid = f.enumerate_grid();
        for w_bar in [0.3, 0.9, 1.7, 2.4, 5.9] {
            for h in [0.0, 1.0] {
                let val = soft_fp_value(w_bar, h, f);
                assert!(
                    grid.binary_search_by(|g| g.partial_cmp(&val).unwrap()).is_ok(),
                    "w_bar {w_bar}, h {h}: {val} off grid"
                );
            }
        }
    }

    #[test]
    fn rectified_sigmoid_stays_in_unit_interval() {
        for v in [-50.0, -3.0, 0.0, 3.0, 50.0] {
            let h = rectified_sigmoid(v);
            assert!((0.0..=1.0).contains(&h));
        }
        assert_eq!(rectified_sigmoid(50.0), 1.0);
        assert_eq!(rectified_sigmoid(-50.0), 0.0);
        // gradient vanishes in the clipped regions
        assert_eq!(rectified_sigmoid_grad(50.0), 0.0);
        assert!(rectified_sigmoid_grad(0.0) > 0.0);
    }

    #[test]
    fn reg_is_zero_iff_binary() {
        for beta in [2.0, 7.0, 20.0] {
            assert!(reg_term(0.0, beta).0.abs() < 1e-12);
            assert!(reg_term(1.0, beta).0.abs() < 1e-12);
            for h in [0.1, 0.5, 0.9] {
                assert!(reg_term(h, beta).0 > 0.0);
            }
        }
    }

    /// Full objective (mean reconstruction + regularizer) evaluated directly,
    /// for the finite-difference gradient check.
    fn objective(
        v: &[f64],
        w: &[f64],
        rows: usize,
        d: usize,
        row_scales: &[f64],
        format: &NumericFormat,
        x_cols: &[f64],
        n_cols: usize,
        lambda: f64,
        beta: f64,
    ) -> f64 {
        let mut recon = 0.0;
        // direct ||(W_hat - W) X||^2, independent of the Gram shortcut
        for r in 0..rows {
            for k in 0..n_cols {
                let mut acc = 0.0;
                for c in 0..d {
                    let s = row_scales[r];
                    let wn = w[r * d + c] / s;
                    let (ss, lo, hi) = match format {
                        NumericFormat::Int(f) => (1.0, f.q_min() as f64, f.q_max() as f64),
                        NumericFormat::Minifloat(f) => {
                            (frozen_inner_scale(wn, *f), f.q_min(), f.q_max())
                        }
                    };
                    let base = (wn / ss).floor();
                    let h = rectified_sigmoid(v[r * d + c]);
                    let val = s * (ss * (base + h)).clamp(lo, hi);
                    acc += (val - w[r * d + c]) * x_cols[c * n_cols + k];
                }
                recon += acc * acc;
            }
        }
        let mut reg = 0.0;
        for vi in v {
            reg += reg_term(rectified_sigmoid(*vi), beta).0;
        }
        recon / (rows * n_cols) as f64 + lambda * reg
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for format in [
            int3(),
            NumericFormat::Minifloat(MinifloatFormat::new(2, 2).unwrap()),
        ] {
            let (rows, d, n_cols) = (3usize, 4usize, 6usize);
            let w: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-0.9..0.9)).collect();
            let row_scales = vec![0.31; rows];
            let x_cols: Vec<f64> = (0..d * n_cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // V away from the sigmoid clips and codes away from range edges
            let v: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let (lambda, beta) = (0.01, 4.0);

            // analytic gradient assembled the same way the optimizer does
            let g = gram(&x_cols, d, n_cols);
            let count = rows * d;
            let mut values = vec![0.0; count];
            let mut dvdh = vec![0.0; count];
            let mut elems = Vec::new();
            for r in 0..rows {
                let s = row_scales[r];
                for c in 0..d {
                    let wn = w[r * d + c] / s;
                    let (ss, lo, hi) = match format {
                        NumericFormat::Int(f) => (1.0, f.q_min() as f64, f.q_max() as f64),
                        NumericFormat::Minifloat(f) => {
                            (frozen_inner_scale(wn, f), f.q_min(), f.q_max())
                        }
                    };
                    elems.push(SoftElement {
                        s,
                        ss,
                        base: (wn / ss).floor(),
                        lo,
                        hi,
                    });
                }
            }
            for (i, e) in elems.iter().enumerate() {
                let h = rectified_sigmoid(v[i]);
                let (val, gr) = e.value_and_grad(h);
                values[i] = val;
                dvdh[i] = gr;
            }
            let scale_norm = 1.0 / (rows * n_cols) as f64;
            let reg_norm = 1.0;
            let mut analytic = vec![0.0; count];
            for r in 0..rows {
                let base = r * d;
                for i in 0..d {
                    let diff_i = values[base + i] - w[base + i];
                    for j in 0..d {
                        analytic[base + j] += 2.0 * diff_i * g[i * d + j] * scale_norm;
                    }
                }
            }
            for i in 0..count {
                let h = rectified_sigmoid(v[i]);
                let hg = rectified_sigmoid_grad(v[i]);
                let (_, rg) = reg_term(h, beta);
                analytic[i] = analytic[i] * dvdh[i] * hg + lambda * rg * reg_norm * hg;
            }

            // central finite differences on the direct objective
            let eps = 1e-6;
            for i in 0..count {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[i] += eps;
                vm[i] -= eps;
                let fp = objective(
                    &vp, &w, rows, d, &row_scales, &format, &x_cols, n_cols, lambda, beta,
                );
                let fm = objective(
                    &vm, &w, rows, d, &row_scales, &format, &x_cols, n_cols, lambda, beta,
                );
                let fd = (fp - fm) / (2.0 * eps);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-10);
                assert!(
                    (fd - analytic[i]).abs() / denom < 1e-5,
                    "format {format:?} element {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn single_weight_reproduces_round_to_nearest() {
        // lambda = 0, one weight, X = 1: optimum picks the closer neighbor
        let hyper = RoundingHyper {
            lambda: 0.0,
            steps: 400,
            ..RoundingHyper::default()
        };
        for (w, want_code) in [(0.26, 3.0), (0.24, 2.0), (-0.17, -2.0)] {
            let out = learn_rounding(&[w], 1, 1, &[0.1], &int3(), &[1.0], 1, &hyper).unwrap();
            assert!(
                (out.values[0] - 0.1 * want_code).abs() < 1e-12,
                "w {w}: got {}, want code {want_code}",
                out.values[0]
            );
        }
    }

    #[test]
    fn on_grid_weights_harden_to_zero_error() {
        // scale 0.25 keeps every value exactly representable in f64
        let w: Vec<f64> = vec![-0.75, -0.25, 0.0, 0.5, 0.75];
        let out = learn_rounding(
            &w,
            1,
            5,
            &[0.25],
            &int3(),
            &(0..5 * 4).map(|i| (i % 5) as f64 - 2.0).collect::<Vec<_>>(),
            4,
            &RoundingHyper::default(),
        )
        .unwrap();
        assert!(out.error < 1e-20, "error {}", out.error);
        assert_eq!(out.values, w);
    }

    #[test]
    fn beats_or_matches_rtn_on_random_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut better = 0;
        let trials = 20;
        for _ in 0..trials {
            let (rows, d, n) = (8usize, 8usize, 64usize);
            let w: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scales = vec![t / 3.0; rows];
            // correlated calibration columns make compensation worthwhile
            let mix: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let raw: Vec<f64> = (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = crate::linalg::matmul(&mix, &raw, d, d, n);
            let out =
                learn_rounding(&w, rows, d, &scales, &int3(), &x, n, &RoundingHyper::default())
                    .unwrap();
            assert!(out.error <= out.rtn_error, "never-worse contract violated");
            if out.error < out.rtn_error && !out.used_fallback {
                better += 1;
            }
        }
        assert!(
            better >= trials * 7 / 10,
            "learned rounding beat RTN on only {better}/{trials} layers"
        );
    }

    #[test]
    fn anneal_hardens_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let (rows, d, n) = (8usize, 8usize, 32usize);
        let w: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scales = vec![0.33; rows];
        let x: Vec<f64> = (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out =
            learn_rounding(&w, rows, d, &scales, &int3(), &x, n, &RoundingHyper::default())
                .unwrap();
        assert!(
            out.hardened_frac >= 0.99,
            "only {:.1}% of h entries hardened",
            100.0 * out.hardened_frac
        );
    }

    #[test]
    fn fp_output_stays_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let f = MinifloatFormat::new(2, 1).unwrap();
        let fmt = NumericFormat::Minifloat(f);
        let grid = f.enumerate_grid();
        let (rows, d, n) = (4usize, 6usize, 16usize);
        let w: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scales = vec![t / f.q_max(); rows];
        let x: Vec<f64> = (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = learn_rounding(&w, rows, d, &scales, &fmt, &x, n, &RoundingHyper::default())
            .unwrap();
        for (i, v) in out.values.iter().enumerate() {
            let norm = v / scales[i / d];
            let snapped = fp_quantize_normalized(norm, f);
            assert!(
                (norm - snapped).abs() < 1e-9 * f.q_max()
                    || grid.binary_search_by(|g| g.partial_cmp(&norm).unwrap()).is_ok(),
                "element {i}: {norm} not on grid"
            );
        }
    }
}
