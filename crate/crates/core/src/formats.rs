//! Integer and minifloat numeric formats and their grid mathematics.
//!
//! A minifloat code of width `r = 1 + e + m` is laid out sign / exponent /
//! mantissa from the most significant bit down. Exponent field `u = 0` marks a
//! subnormal (implicit leading significand digit 0, effective exponent `1 - b`);
//! every other field value denotes a normal number. There are no inf or NaN
//! codes; all `2^r` codes decode to finite reals, with two encodings of zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Exact power of two as an `f64`, valid down into the subnormal range.
pub fn pow2(p: i32) -> f64 {
    if (-1022..=1023).contains(&p) {
        f64::from_bits(((p + 1023) as u64) << 52)
    } else if (-1074..-1022).contains(&p) {
        f64::from_bits(1u64 << (p + 1074))
    } else if p < 0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `floor(log2(|x|))` computed from the binary representation, exact for any
/// finite non-zero `x` (including subnormal doubles).
pub fn floor_log2(x: f64) -> i32 {
    debug_assert!(x != 0.0 && x.is_finite());
    let bits = x.abs().to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i32;
    if exp_field == 0 {
        // subnormal double: value = mantissa * 2^-1074
        let mant = bits & ((1u64 << 52) - 1);
        (63 - mant.leading_zeros() as i32) - 1074
    } else {
        exp_field - 1023
    }
}

/// Signed integer format with zero-point 0.
///
/// Codes span `[-2^(r-1), 2^(r-1) - 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IntFormat {
    bits: u32,
}

impl IntFormat {
    /// Signed integer format of the given bit-width (`r >= 2`).
    pub fn new(bits: u32) -> Result<Self> {
        if !(2..=32).contains(&bits) {
            return Err(Error::InvalidFormat(format!(
                "integer bit-width must be in 2..=32, got {bits}"
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn q_min(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    pub fn q_max(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// `(q_min, q_max)` of the signed range.
    pub fn range(&self) -> (i64, i64) {
        (self.q_min(), self.q_max())
    }
}

/// Minifloat format: `e` exponent bits, `m` mantissa bits, exponent bias `b`.
///
/// The bias defaults to `2^(e-1) - 1` and may be overridden for
/// experimentation. Values outside the representable range saturate on
/// quantization; there are no inf/NaN codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MinifloatFormat {
    exp_bits: u32,
    mantissa_bits: u32,
    bias: i32,
}

impl MinifloatFormat {
    /// Format with the IEEE-style default bias `2^(e-1) - 1`.
    pub fn new(exp_bits: u32, mantissa_bits: u32) -> Result<Self> {
        if exp_bits < 1 {
            return Err(Error::InvalidFormat(
                "minifloat needs at least one exponent bit".into(),
            ));
        }
        let bias = (1i32 << (exp_bits.min(30) - 1)) - 1;
        Self::with_bias(exp_bits, mantissa_bits, bias)
    }

    /// Format with an explicit exponent bias.
    pub fn with_bias(exp_bits: u32, mantissa_bits: u32, bias: i32) -> Result<Self> {
        if exp_bits < 1 || mantissa_bits < 1 {
            return Err(Error::InvalidFormat(format!(
                "minifloat needs e >= 1 and m >= 1, got e={exp_bits}, m={mantissa_bits}"
            )));
        }
        let r = 1 + exp_bits + mantissa_bits;
        if r > 16 {
            return Err(Error::InvalidFormat(format!(
                "minifloat width {r} exceeds the supported 16 bits"
            )));
        }
        // Keep every grid value exactly representable as a normal f64 so that
        // decode/encode arithmetic stays exact in double precision.
        let max_exp = (1i64 << exp_bits) - bias as i64 - 1;
        let min_exp = 1 - bias as i64 - mantissa_bits as i64;
        if max_exp > 1000 || min_exp < -1000 {
            return Err(Error::InvalidFormat(format!(
                "bias {bias} puts the grid outside the exactly-representable f64 range"
            )));
        }
        Ok(Self {
            exp_bits,
            mantissa_bits,
            bias,
        })
    }

    pub fn exp_bits(&self) -> u32 {
        self.exp_bits
    }

    pub fn mantissa_bits(&self) -> u32 {
        self.mantissa_bits
    }

    pub fn bias(&self) -> i32 {
        self.bias
    }

    /// Total bit-width `1 + e + m`.
    pub fn bits(&self) -> u32 {
        1 + self.exp_bits + self.mantissa_bits
    }

    pub fn has_default_bias(&self) -> bool {
        self.bias == (1i32 << (self.exp_bits - 1)) - 1
    }

    /// Largest representable magnitude: `(2 - 2^-m) * 2^(2^e - b - 1)`.
    pub fn q_max(&self) -> f64 {
        let m = self.mantissa_bits as i32;
        (2.0 - pow2(-m)) * pow2((1i32 << self.exp_bits) - self.bias - 1)
    }

    pub fn q_min(&self) -> f64 {
        -self.q_max()
    }

    /// Smallest positive subnormal, `2^(1 - b - m)`.
    pub fn min_subnormal(&self) -> f64 {
        pow2(1 - self.bias - self.mantissa_bits as i32)
    }

    /// Exponent of the per-element scale floor in the two-level scheme,
    /// `1 - b - m`.
    pub fn min_scale_exp(&self) -> i32 {
        1 - self.bias - self.mantissa_bits as i32
    }

    /// Decodes a raw code of `bits()` bits into its real value.
    ///
    /// Sign-magnitude layout; exponent field 0 selects the subnormal
    /// interpretation. Exact in double precision for every accepted format.
    pub fn decode(&self, code: u32) -> f64 {
        let r = self.bits();
        debug_assert!(code < (1u32 << r), "code wider than format");
        let m = self.mantissa_bits;
        let mant = code & ((1 << m) - 1);
        let u = (code >> m) & ((1 << self.exp_bits) - 1);
        let sign = if code >> (r - 1) & 1 == 1 { -1.0 } else { 1.0 };
        let frac = mant as f64 * pow2(-(m as i32));
        if u == 0 {
            sign * pow2(1 - self.bias) * frac
        } else {
            sign * pow2(u as i32 - self.bias) * (1.0 + frac)
        }
    }

    /// Every representable value, deduplicated (the two zero codes collapse)
    /// and sorted ascending.
    pub fn enumerate_grid(&self) -> Vec<f64> {
        let r = self.bits();
        let mut values: Vec<f64> = (0u32..1 << r).map(|c| self.decode(c) + 0.0).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        values
    }
}

/// A quantization target format: signed integer or minifloat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NumericFormat {
    Int(IntFormat),
    Minifloat(MinifloatFormat),
}

impl NumericFormat {
    pub fn int(bits: u32) -> Result<Self> {
        Ok(Self::Int(IntFormat::new(bits)?))
    }

    pub fn minifloat(e: u32, m: u32) -> Result<Self> {
        Ok(Self::Minifloat(MinifloatFormat::new(e, m)?))
    }

    pub fn bits(&self) -> u32 {
        match self {
            Self::Int(f) => f.bits(),
            Self::Minifloat(f) => f.bits(),
        }
    }

    /// Upper end of the quantization range, as a real.
    pub fn q_max(&self) -> f64 {
        match self {
            Self::Int(f) => f.q_max() as f64,
            Self::Minifloat(f) => f.q_max(),
        }
    }

    pub fn is_int(&self) -> bool {
        matches!(self, Self::Int(_))
    }

    pub fn as_int(&self) -> Option<IntFormat> {
        match self {
            Self::Int(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_minifloat(&self) -> Option<MinifloatFormat> {
        match self {
            Self::Minifloat(f) => Some(*f),
            _ => None,
        }
    }
}

impl fmt::Display for NumericFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Int(i) => write!(f, "int{}", i.bits()),
            Self::Minifloat(mf) => {
                write!(f, "e{}m{}", mf.exp_bits(), mf.mantissa_bits())?;
                if !mf.has_default_bias() {
                    write!(f, "b{}", mf.bias())?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for NumericFormat {
    type Err = Error;

    /// Parses the format literals used in config files and CLI flags:
    /// `"intR"` (e.g. `int4`) or `"eEmM"` with an optional `"bB"` bias suffix
    /// (e.g. `e2m1`, `e2m1b2`).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidFormat(format!("cannot parse format literal {s:?}"));
        if let Some(rest) = s.strip_prefix("int") {
            let bits: u32 = rest.parse().map_err(|_| bad())?;
            return NumericFormat::int(bits);
        }
        let rest = s.strip_prefix('e').ok_or_else(bad)?;
        let m_pos = rest.find('m').ok_or_else(bad)?;
        let e: u32 = rest[..m_pos].parse().map_err(|_| bad())?;
        let tail = &rest[m_pos + 1..];
        let (m_str, bias_str) = match tail.find('b') {
            Some(b_pos) => (&tail[..b_pos], Some(&tail[b_pos + 1..])),
            None => (tail, None),
        };
        let m: u32 = m_str.parse().map_err(|_| bad())?;
        match bias_str {
            Some(b) => {
                let bias: i32 = b.parse().map_err(|_| bad())?;
                Ok(NumericFormat::Minifloat(MinifloatFormat::with_bias(
                    e, m, bias,
                )?))
            }
            None => NumericFormat::minifloat(e, m),
        }
    }
}

impl Serialize for NumericFormat {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NumericFormat {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int_ranges() {
        assert_eq!(IntFormat::new(4).unwrap().range(), (-8, 7));
        assert_eq!(IntFormat::new(8).unwrap().range(), (-128, 127));
        assert_eq!(IntFormat::new(2).unwrap().range(), (-2, 1));
        assert!(IntFormat::new(1).is_err());
    }

    #[test]
    fn decode_zero_code() {
        let f = MinifloatFormat::with_bias(2, 1, 1).unwrap();
        assert_eq!(f.decode(0b0000), 0.0);
        // negative zero collapses to +0 when enumerated
        assert_eq!(f.decode(0b1000), -0.0);
    }

    #[test]
    fn decode_normal_code() {
        // e=2, m=1, b=1: sign=0, u=3, d=1 -> 1.5 * 2^(3-1) = 6.0
        let f = MinifloatFormat::with_bias(2, 1, 1).unwrap();
        assert_eq!(f.decode(0b0111), 6.0);
    }

    #[test]
    fn q_max_e4m3_default_bias() {
        // (2 - 2^-3) * 2^(2^4 - 7 - 1) = 1.875 * 256 = 480
        let f = MinifloatFormat::new(4, 3).unwrap();
        assert_eq!(f.bias(), 7);
        assert_eq!(f.q_max(), 480.0);
        let max_code_positive = (1u32 << 7) - 1; // sign 0, all exponent/mantissa bits set
        assert_eq!(f.decode(max_code_positive), 480.0);
    }

    #[test]
    fn enumerate_grid_e1m1_bias0() {
        // 8 codes: subnormals {0, 1}, normals {2, 3}, mirrored in sign, zeros collapsed.
        let f = MinifloatFormat::with_bias(1, 1, 0).unwrap();
        assert_eq!(
            f.enumerate_grid(),
            vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn enumerate_grid_e2m1_bias1() {
        let f = MinifloatFormat::with_bias(2, 1, 1).unwrap();
        let grid = f.enumerate_grid();
        assert_eq!(
            grid,
            vec![
                -6.0, -4.0, -3.0, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0
            ]
        );
        assert_eq!(*grid.last().unwrap(), f.q_max());
        assert_eq!(f.min_subnormal(), 0.5);
    }

    #[test]
    fn grid_symmetric_and_max_matches_formula() {
        for r in 3..=10u32 {
            for e in 1..r - 1 {
                let m = r - 1 - e;
                let f = MinifloatFormat::new(e, m).unwrap();
                let grid = f.enumerate_grid();
                assert_eq!(*grid.last().unwrap(), f.q_max(), "format {f:?}");
                // symmetry about zero
                for (lo, hi) in grid.iter().zip(grid.iter().rev()) {
                    assert_eq!(*lo, -*hi, "format {f:?}");
                }
            }
        }
    }

    #[test]
    fn grid_spacing_per_binade() {
        // Spacing in [2^k, 2^(k+1)) is 2^(k-m); subnormal spacing is 2^(1-b-m).
        for (e, m) in [(2u32, 3u32), (3, 2), (4, 3), (1, 4)] {
            let f = MinifloatFormat::new(e, m).unwrap();
            let grid = f.enumerate_grid();
            let positives: Vec<f64> = grid.iter().copied().filter(|v| *v > 0.0).collect();
            let sub_step = f.min_subnormal();
            for w in positives.windows(2) {
                let (a, b) = (w[0], w[1]);
                let expected = if b <= pow2(1 - f.bias()) {
                    sub_step
                } else {
                    pow2(floor_log2(a) - m as i32)
                };
                assert_eq!(b - a, expected, "format e{e}m{m} between {a} and {b}");
            }
        }
    }

    #[test]
    fn decode_injective_on_nonzero_codes() {
        for (e, m) in [(1u32, 1u32), (2, 1), (3, 2), (4, 3)] {
            let f = MinifloatFormat::new(e, m).unwrap();
            let r = f.bits();
            let mut seen = std::collections::HashMap::new();
            for code in 0..(1u32 << r) {
                let v = f.decode(code);
                if v == 0.0 {
                    continue;
                }
                if let Some(prev) = seen.insert(v.to_bits(), code) {
                    panic!("codes {prev:#b} and {code:#b} both decode to {v}");
                }
            }
        }
    }

    #[test]
    fn enumerate_grid_rejects_wide_formats() {
        assert!(MinifloatFormat::new(10, 6).is_err()); // r = 17
    }

    #[test]
    fn parse_and_display_roundtrip() {
        for s in ["int4", "int8", "e2m1", "e4m3", "e2m1b2", "e2m1b0"] {
            let f: NumericFormat = s.parse().unwrap();
            assert_eq!(f.to_string(), s);
        }
        // bias 0 is the default for a single exponent bit, so the suffix drops
        assert_eq!("e1m1b0".parse::<NumericFormat>().unwrap().to_string(), "e1m1");
        assert_eq!(
            "e2m1".parse::<NumericFormat>().unwrap(),
            "e2m1b1".parse::<NumericFormat>().unwrap()
        );
        assert!("int".parse::<NumericFormat>().is_err());
        assert!("e2".parse::<NumericFormat>().is_err());
        assert!("f8".parse::<NumericFormat>().is_err());
    }

    #[test]
    fn pow2_exactness() {
        assert_eq!(pow2(0), 1.0);
        assert_eq!(pow2(-1), 0.5);
        assert_eq!(pow2(10), 1024.0);
        assert_eq!(pow2(-1074), f64::MIN_POSITIVE * pow2(-52));
        assert_eq!(pow2(-1075), 0.0);
    }

    #[test]
    fn floor_log2_exact_at_boundaries() {
        assert_eq!(floor_log2(1.0), 0);
        assert_eq!(floor_log2(0.999999999), -1);
        assert_eq!(floor_log2(2.0), 1);
        assert_eq!(floor_log2(6.0), 2);
        assert_eq!(floor_log2(0.25), -2);
        assert_eq!(floor_log2(f64::MIN_POSITIVE / 4.0), -1024);
    }
}
