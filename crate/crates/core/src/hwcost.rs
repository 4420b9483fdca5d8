//! FPGA MAC cost model: dot-product bit-width, accumulator-width formulas,
//! bit-accurate integer and minifloat MAC simulators with long fixed-point
//! accumulators, and the lookup table of published LUT utilization numbers.
//!
//! The integer MAC accumulates two's-complement products directly; its
//! register is `r_a + r_b + ceil(log2 n) + 1` bits. The minifloat MAC forms
//! integer significand products, shifts them by the operands' exponent sum
//! relative to the smallest possible sum, negates by the sign XOR, and
//! accumulates into a register of `2^e_a + m_a + 2^e_b + m_b + ceil(log2 n) - 1`
//! bits; the accumulator times its LSB weight `2^(2 - b_a - b_b - m_a - m_b)`
//! equals the exact real dot product of the decoded operands.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;

use crate::error::{Error, Result};
use crate::formats::{IntFormat, MinifloatFormat, NumericFormat};

/// A MAC instance: the two operand formats and the maximum dot-product
/// length `n` the accumulator must support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacConfig {
    pub fmt_a: NumericFormat,
    pub fmt_b: NumericFormat,
    pub max_products: usize,
}

/// Largest convolution dot-product size among the reference models.
pub const DEFAULT_MAX_PRODUCTS: usize = 4608;

impl MacConfig {
    pub fn new(fmt_a: NumericFormat, fmt_b: NumericFormat, max_products: usize) -> Result<Self> {
        if max_products == 0 {
            return Err(Error::InvalidArgument(
                "MAC needs room for at least one product".into(),
            ));
        }
        Ok(Self {
            fmt_a,
            fmt_b,
            max_products,
        })
    }

    /// Accumulator width in bits for whichever kind the operands are.
    /// Mixed integer/minifloat operand pairs have no modeled MAC.
    pub fn acc_width(&self) -> Result<u32> {
        match (&self.fmt_a, &self.fmt_b) {
            (NumericFormat::Int(a), NumericFormat::Int(b)) => {
                Ok(int_acc_width(a.bits(), b.bits(), self.max_products))
            }
            (NumericFormat::Minifloat(a), NumericFormat::Minifloat(b)) => Ok(fp_acc_width(
                a.exp_bits(),
                a.mantissa_bits(),
                b.exp_bits(),
                b.mantissa_bits(),
                self.max_products,
            )),
            _ => Err(Error::InvalidArgument(
                "mixed integer/minifloat MAC is not modeled".into(),
            )),
        }
    }
}

/// Memory-cost proxy: product of the operand bit-widths.
pub fn dot_product_bitwidth(w_bits: u32, a_bits: u32) -> u32 {
    w_bits * a_bits
}

fn ceil_log2(n: usize) -> u32 {
    debug_assert!(n >= 1);
    usize::BITS - (n - 1).leading_zeros()
}

/// Integer accumulator width: `r_a + r_b + ceil(log2 n) + 1`.
pub fn int_acc_width(r_a: u32, r_b: u32, n: usize) -> u32 {
    r_a + r_b + ceil_log2(n) + 1
}

/// Minifloat accumulator width:
/// `2^e_a + m_a + 2^e_b + m_b + ceil(log2 n) - 1`.
pub fn fp_acc_width(e_a: u32, m_a: u32, e_b: u32, m_b: u32, n: usize) -> u32 {
    (1 << e_a) + m_a + (1 << e_b) + m_b + ceil_log2(n) - 1
}

/// Two's-complement wrap of `v` into `bits` bits.
fn wrap(v: BigInt, bits: u32) -> BigInt {
    let modulus = BigInt::from(1) << bits;
    let half = BigInt::from(1) << (bits - 1);
    let mut r = v % &modulus;
    if r < BigInt::from(0) {
        r += &modulus;
    }
    if r >= half {
        r -= &modulus;
    }
    r
}

/// Runs the integer MAC in a register of exactly `width` bits.
pub fn simulate_int_mac_at_width(
    format_a: IntFormat,
    format_b: IntFormat,
    max_products: usize,
    width: u32,
    codes_a: &[i64],
    codes_b: &[i64],
) -> Result<BigInt> {
    if codes_a.len() != codes_b.len() {
        return Err(Error::ShapeMismatch("operand vectors differ in length".into()));
    }
    if codes_a.len() > max_products {
        return Err(Error::InvalidArgument(format!(
            "{} products exceed the configured maximum {max_products}",
            codes_a.len()
        )));
    }
    for (codes, fmt) in [(codes_a, format_a), (codes_b, format_b)] {
        if let Some(bad) = codes.iter().find(|c| **c < fmt.q_min() || **c > fmt.q_max()) {
            return Err(Error::InvalidArgument(format!(
                "code {bad} outside int{} range",
                fmt.bits()
            )));
        }
    }
    let mut acc = BigInt::from(0);
    for (a, b) in codes_a.iter().zip(codes_b) {
        acc = wrap(acc + BigInt::from(a * b), width);
    }
    Ok(acc)
}

/// Integer MAC at the modeled register width. The result equals the exact
/// dot product for any admissible input (width sufficiency).
pub fn simulate_int_mac(cfg: &MacConfig, codes_a: &[i64], codes_b: &[i64]) -> Result<BigInt> {
    let (a, b) = match (&cfg.fmt_a, &cfg.fmt_b) {
        (NumericFormat::Int(a), NumericFormat::Int(b)) => (*a, *b),
        _ => {
            return Err(Error::InvalidArgument(
                "integer MAC needs integer operand formats".into(),
            ))
        }
    };
    let width = int_acc_width(a.bits(), b.bits(), cfg.max_products);
    simulate_int_mac_at_width(a, b, cfg.max_products, width, codes_a, codes_b)
}

/// Minifloat MAC outcome: the long-register contents and the weight of its
/// least significant bit as a power-of-two exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct FpMacResult {
    pub acc: BigInt,
    /// `value = acc * 2^lsb_exp`.
    pub lsb_exp: i32,
}

impl FpMacResult {
    /// Accumulator scaled back to a real (may round for very wide registers;
    /// exactness tests compare `acc` and `lsb_exp` directly).
    pub fn value(&self) -> f64 {
        let acc_f64 = {
            let (sign, digits) = self.acc.to_u64_digits();
            let mut v = 0.0f64;
            for d in digits.iter().rev() {
                v = v * 2f64.powi(64) + *d as f64;
            }
            match sign {
                num_bigint::Sign::Minus => -v,
                _ => v,
            }
        };
        acc_f64 * 2f64.powi(self.lsb_exp)
    }
}

fn decode_operand(fmt: MinifloatFormat, code: u32) -> Result<(bool, u64, i64)> {
    let r = fmt.bits();
    if code >= 1u32 << r {
        return Err(Error::InvalidArgument(format!(
            "code {code:#x} wider than e{}m{}",
            fmt.exp_bits(),
            fmt.mantissa_bits()
        )));
    }
    let m = fmt.mantissa_bits();
    let mant = (code & ((1 << m) - 1)) as u64;
    let u = (code >> m) & ((1 << fmt.exp_bits()) - 1);
    let negative = (code >> (r - 1)) & 1 == 1;
    // exponents are compared with zero to pick the implicit bit
    let (implicit, eff_exp) = if u == 0 { (0u64, 1i64) } else { (1u64, u as i64) };
    let significand = (implicit << m) | mant;
    Ok((negative, significand, eff_exp))
}

/// Runs the minifloat MAC in a register of exactly `width` bits.
pub fn simulate_fp_mac_at_width(
    fmt_a: MinifloatFormat,
    fmt_b: MinifloatFormat,
    max_products: usize,
    width: u32,
    codes_a: &[u32],
    codes_b: &[u32],
) -> Result<FpMacResult> {
    if codes_a.len() != codes_b.len() {
        return Err(Error::ShapeMismatch("operand vectors differ in length".into()));
    }
    if codes_a.len() > max_products {
        return Err(Error::InvalidArgument(format!(
            "{} products exceed the configured maximum {max_products}",
            codes_a.len()
        )));
    }
    let mut acc = BigInt::from(0);
    for (ca, cb) in codes_a.iter().zip(codes_b) {
        let (neg_a, sig_a, ua) = decode_operand(fmt_a, *ca)?;
        let (neg_b, sig_b, ub) = decode_operand(fmt_b, *cb)?;
        // shift the significand product to its position above the smallest
        // possible exponent sum
        let shift = (ua + ub - 2) as u32;
        let mut product = BigInt::from(sig_a as u128 * sig_b as u128) << shift;
        // invert the sign after shifting, per the sign XOR of the operands
        if neg_a != neg_b {
            product = -product;
        }
        acc = wrap(acc + product, width);
    }
    let lsb_exp = 2 - fmt_a.bias() - fmt_b.bias()
        - fmt_a.mantissa_bits() as i32
        - fmt_b.mantissa_bits() as i32;
    Ok(FpMacResult { acc, lsb_exp })
}

/// Minifloat MAC at the modeled register width. Accumulator times LSB weight
/// equals the exact real dot product of the decoded operands.
pub fn simulate_fp_mac(cfg: &MacConfig, codes_a: &[u32], codes_b: &[u32]) -> Result<FpMacResult> {
    let (a, b) = match (&cfg.fmt_a, &cfg.fmt_b) {
        (NumericFormat::Minifloat(a), NumericFormat::Minifloat(b)) => (*a, *b),
        _ => {
            return Err(Error::InvalidArgument(
                "minifloat MAC needs minifloat operand formats".into(),
            ))
        }
    };
    let width = fp_acc_width(
        a.exp_bits(),
        a.mantissa_bits(),
        b.exp_bits(),
        b.mantissa_bits(),
        cfg.max_products,
    );
    simulate_fp_mac_at_width(a, b, cfg.max_products, width, codes_a, codes_b)
}

/// Reference models of the published LUT table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefModel {
    ResNet18,
    MobileNetV2,
    VitB32,
}

impl fmt::Display for RefModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RefModel::ResNet18 => "resnet18",
            RefModel::MobileNetV2 => "mobilenetv2",
            RefModel::VitB32 => "vit_b_32",
        };
        write!(f, "{s}")
    }
}

impl FromStr for RefModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(RefModel::ResNet18),
            "mobilenetv2" => Ok(RefModel::MobileNetV2),
            "vit_b_32" => Ok(RefModel::VitB32),
            other => Err(Error::InvalidArgument(format!("unknown model {other:?}"))),
        }
    }
}

/// Format family of a LUT column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacKind {
    Int,
    Fp,
}

/// Published post-synthesis LUT counts per MAC, per model and format family,
/// for each (weight bits, activation bits) configuration. Shipped verbatim as
/// a static reference dataset; values for formats outside the table are
/// deliberately not extrapolated.
///
/// Row layout: (w, a, [rn18 int, rn18 fp, mbv2 int, mbv2 fp, vit int, vit fp]).
pub const LUT_TABLE: [(u32, u32, [u32; 6]); 21] = [
    (3, 3, [25, 27, 25, 27, 25, 27]),
    (3, 4, [37, 42, 37, 42, 37, 42]),
    (3, 5, [38, 54, 38, 54, 38, 54]),
    (4, 4, [40, 43, 40, 43, 40, 43]),
    (3, 6, [44, 75, 44, 75, 44, 75]),
    (4, 5, [50, 78, 50, 78, 50, 78]),
    (3, 7, [51, 60, 51, 74, 51, 74]),
    (3, 8, [57, 107, 57, 86, 57, 86]),
    (4, 6, [56, 64, 56, 58, 56, 83]),
    (5, 5, [55, 83, 55, 83, 55, 83]),
    (4, 7, [64, 78, 64, 111, 64, 111]),
    (5, 6, [63, 82, 63, 89, 63, 95]),
    (4, 8, [67, 69, 67, 110, 67, 110]),
    (5, 7, [71, 103, 71, 87, 71, 118]),
    (6, 6, [72, 89, 72, 102, 72, 103]),
    (5, 8, [78, 126, 78, 101, 78, 126]),
    (6, 7, [78, 122, 78, 119, 78, 115]),
    (6, 8, [87, 110, 87, 96, 87, 110]),
    (7, 7, [92, 131, 92, 107, 92, 111]),
    (7, 8, [110, 147, 110, 114, 110, 121]),
    (8, 8, [116, 136, 116, 125, 116, 170]),
];

/// Looks up the published LUT count for a MAC. Partial: `None` for
/// configurations outside the table.
pub fn lut_lookup(model: RefModel, kind: MacKind, w_bits: u32, a_bits: u32) -> Option<u32> {
    let row = LUT_TABLE.iter().find(|(w, a, _)| *w == w_bits && *a == a_bits)?;
    let base = match model {
        RefModel::ResNet18 => 0,
        RefModel::MobileNetV2 => 2,
        RefModel::VitB32 => 4,
    };
    let offset = match kind {
        MacKind::Int => 0,
        MacKind::Fp => 1,
    };
    Some(row.2[base + offset])
}
