//! Fixed-point number formats and the quantization operator used throughout
//! training and deployment.
//!
//! A format `(w, p)` describes a two's-complement word of `w` bits with `p`
//! fractional bits. Quantization rounds half away from zero onto the `2^-p`
//! grid and then clips to `[-2^(w-p-1), 2^(w-p-1) - 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FxpError {
    #[error("invalid fixed-point format w={width} p={precision}: {reason}")]
    InvalidFormat { width: u32, precision: u32, reason: &'static str },
    #[error("non-finite value {0} cannot be quantized")]
    NonFinite(f64),
    #[error("code {code} does not fit in {width} bits")]
    CodeOutOfRange { code: i64, width: u32 },
}

/// Where the positive clip bound sits.
///
/// `Literal` uses `2^(w-p-1) - 1`, an integer-valued bound that leaves the top
/// `2^p - 1` codes unused. `LargestCode` uses the largest representable value
/// `2^(w-p-1) - 2^-p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum UpperClip {
    #[default]
    Literal,
    LargestCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxpFormat {
    pub width_bits: u32,
    pub precision_bits: u32,
    #[serde(default)]
    pub upper: UpperClip,
}

impl FxpFormat {
    pub fn new(width_bits: u32, precision_bits: u32) -> Result<Self, FxpError> {
        Self::with_upper(width_bits, precision_bits, UpperClip::Literal)
    }

    pub fn with_upper(width_bits: u32, precision_bits: u32, upper: UpperClip) -> Result<Self, FxpError> {
        let err = |reason| FxpError::InvalidFormat { width: width_bits, precision: precision_bits, reason };
        if !(2..=32).contains(&width_bits) {
            return Err(err("width must be in 2..=32"));
        }
        if precision_bits >= width_bits {
            return Err(err("precision must be below width"));
        }
        Ok(Self { width_bits, precision_bits, upper })
    }

    /// 32-bit word with 16 fractional bits; used where quantization should be
    /// effectively transparent.
    pub fn generous() -> Self {
        Self { width_bits: 32, precision_bits: 16, upper: UpperClip::Literal }
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        pow2(self.precision_bits as i32)
    }

    /// Smallest representable step.
    #[inline]
    pub fn lsb(&self) -> f64 {
        pow2(-(self.precision_bits as i32))
    }

    #[inline]
    pub fn min_value(&self) -> f64 {
        -pow2((self.width_bits - self.precision_bits - 1) as i32)
    }

    #[inline]
    pub fn max_value(&self) -> f64 {
        let top = pow2((self.width_bits - self.precision_bits - 1) as i32);
        match self.upper {
            UpperClip::Literal => top - 1.0,
            UpperClip::LargestCode => top - self.lsb(),
        }
    }

    /// The format's constants, precomputed for hot loops.
    pub fn grid(&self) -> Grid {
        Grid { scale: self.scale(), lsb: self.lsb(), min: self.min_value(), max: self.max_value() }
    }

    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.width_bits - 1))
    }

    /// Largest code reachable through quantization (not the largest word).
    pub fn max_code(&self) -> i64 {
        (self.max_value() * self.scale()) as i64
    }

    /// Quantize without the finiteness check. NaN propagates.
    #[inline(always)]
    pub fn apply(&self, x: f64) -> f64 {
        (round_half_away(x * self.scale()) * self.lsb()).clamp(self.min_value(), self.max_value())
    }

    /// Straight-through surrogate: identity inside the clip range, saturating outside.
    #[inline]
    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.min_value(), self.max_value())
    }

    /// True when `x` lies strictly inside the clip range.
    #[inline]
    pub fn passes_gradient(&self, x: f64) -> bool {
        x > self.min_value() && x < self.max_value()
    }

    #[inline]
    pub fn fits_code(&self, code: i64) -> bool {
        code >= self.min_code() && code <= (1i64 << (self.width_bits - 1)) - 1
    }
}

/// Exact `2^e` for exponents in the normal range.
#[inline]
pub fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((1023 + e) as u64) << 52)
}

impl std::fmt::Display for FxpFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{}]", self.width_bits, self.precision_bits)
    }
}

/// The seven `(w, p)` formats the architecture search may pick from.
pub const SEARCH_FORMATS: [(u32, u32); 7] = [(32, 16), (24, 16), (16, 10), (16, 8), (16, 12), (12, 6), (12, 8)];

pub fn search_formats() -> Vec<FxpFormat> {
    SEARCH_FORMATS.iter().map(|&(w, p)| FxpFormat::new(w, p).expect("static format")).collect()
}

/// Weight and activation formats of one network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantPair {
    pub weights: FxpFormat,
    pub activations: FxpFormat,
}

impl QuantPair {
    pub fn new(weights: FxpFormat, activations: FxpFormat) -> Self {
        Self { weights, activations }
    }

    pub fn generous() -> Self {
        Self::new(FxpFormat::generous(), FxpFormat::generous())
    }

    pub fn total_bits(&self) -> u32 {
        self.weights.width_bits + self.activations.width_bits
    }

    /// Whether both formats belong to the search space.
    pub fn in_search_space(&self) -> bool {
        let member = |f: &FxpFormat| SEARCH_FORMATS.contains(&(f.width_bits, f.precision_bits));
        member(&self.weights) && member(&self.activations)
    }
}

impl std::fmt::Display for QuantPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "w{}a{}", self.weights, self.activations)
    }
}

pub fn quantize(x: f64, fmt: FxpFormat) -> Result<f64, FxpError> {
    if !x.is_finite() {
        return Err(FxpError::NonFinite(x));
    }
    Ok(fmt.apply(x))
}

/// Integer code of an already-quantized value.
pub fn to_code(x: f64, fmt: FxpFormat) -> Result<i64, FxpError> {
    if !x.is_finite() {
        return Err(FxpError::NonFinite(x));
    }
    let code = (x * fmt.scale()).round();
    if code.abs() > 9.0e18 {
        return Err(FxpError::CodeOutOfRange { code: code as i64, width: fmt.width_bits });
    }
    let code = code as i64;
    if !fmt.fits_code(code) {
        return Err(FxpError::CodeOutOfRange { code, width: fmt.width_bits });
    }
    Ok(code)
}

pub fn from_code(code: i64, fmt: FxpFormat) -> Result<f64, FxpError> {
    if !fmt.fits_code(code) {
        return Err(FxpError::CodeOutOfRange { code, width: fmt.width_bits });
    }
    Ok(code as f64 / fmt.scale())
}

/// Clipped straight-through estimator for `quantize`.
#[inline]
pub fn ste_grad(upstream: f64, x: f64, fmt: FxpFormat) -> f64 {
    if fmt.passes_gradient(x) {
        upstream
    } else {
        0.0
    }
}

/// Round half away from zero onto a `2^-frac_bits` grid, without clipping.
/// Models a MAC accumulator with `frac_bits` fractional bits.
#[inline]
pub fn round_to_frac(x: f64, frac_bits: u32) -> f64 {
    round_half_away(x * pow2(frac_bits as i32)) * pow2(-(frac_bits as i32))
}

/// Scale, step and clip bounds of a format, so that quantizing in a loop does
/// not rebuild them per element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub scale: f64,
    pub lsb: f64,
    pub min: f64,
    pub max: f64,
}

impl Grid {
    /// Same as [`FxpFormat::apply`].
    #[inline(always)]
    pub fn apply(&self, x: f64) -> f64 {
        (round_half_away(x * self.scale) * self.lsb).clamp(self.min, self.max)
    }

    #[inline(always)]
    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.min, self.max)
    }
}

/// Nearest integer, ties away from zero. Same result as `f64::round`, which
/// is a software routine on baseline x86-64 and dominates training time.
#[inline(always)]
pub fn round_half_away(y: f64) -> f64 {
    const TWO_52: f64 = 4_503_599_627_370_496.0;
    let a = y.abs();
    // Beyond 2^52 every double is an integer; NaN also takes this branch.
    if !(a < TWO_52) {
        return y;
    }
    // Adding and removing 2^52 rounds to nearest, ties to even, exactly.
    let mut r = (a + TWO_52) - TWO_52;
    if a - r == 0.5 {
        r += 1.0;
    }
    r.copysign(y)
}

/// Integer counterpart of [`round_to_frac`]: divide by `2^shift`, rounding half
/// away from zero.
#[inline]
pub fn shift_round(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let half = 1i128 << (shift - 1);
    if v >= 0 {
        (v + half) >> shift
    } else {
        -((-v + half) >> shift)
    }
}

/// Integer division rounding half away from zero. `den` must be positive.
#[inline]
pub fn div_round(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = (2 * num.abs() + den) / (2 * den);
    if num < 0 {
        -q
    } else {
        q
    }
}

/// Requantize an integer value carrying `from_frac` fractional bits into the
/// code space of `fmt`, rounding half away from zero and clipping.
#[inline]
pub fn requantize_code(v: i128, from_frac: u32, fmt: FxpFormat) -> i64 {
    let p = fmt.precision_bits;
    let r = if from_frac >= p { shift_round(v, from_frac - p) } else { v << (p - from_frac) };
    r.clamp(fmt.min_code() as i128, fmt.max_code() as i128) as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f(w: u32, p: u32) -> FxpFormat {
        FxpFormat::new(w, p).unwrap()
    }

    #[test]
    fn rounding_ties_and_extremes() {
        for y in [0.5, 1.5, 2.5, -0.5, -2.5, 0.49999999999999994, 4503599627370495.5, 1e300, -1e300, 0.0] {
            assert_eq!(round_half_away(y), y.round(), "{y}");
        }
        assert!(round_half_away(f64::NAN).is_nan());
    }

    proptest! {
        #[test]
        fn rounding_matches_std(y in -1e7f64..1e7, k in -40i32..40) {
            let y = y * pow2(k);
            prop_assert_eq!(round_half_away(y), y.round());
            let t = y.trunc() + 0.5;
            prop_assert_eq!(round_half_away(t), t.round());
        }
    }

    #[test]
    fn zero_is_fixed_point() {
        for fmt in search_formats() {
            assert_eq!(quantize(0.0, fmt).unwrap(), 0.0);
        }
    }

    #[test]
    fn hand_evaluated_examples() {
        assert_eq!(quantize(0.3, f(8, 4)).unwrap(), 0.3125);
        assert_eq!(quantize(100.0, f(4, 0)).unwrap(), 7.0);
        assert_eq!(quantize(-100.0, f(4, 0)).unwrap(), -8.0);
        // half rounds away from zero
        assert_eq!(quantize(0.5, f(8, 0)).unwrap(), 1.0);
        assert_eq!(quantize(-0.5, f(8, 0)).unwrap(), -1.0);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(quantize(f64::NAN, f(8, 4)), Err(FxpError::NonFinite(_))));
        assert!(matches!(quantize(f64::INFINITY, f(8, 4)), Err(FxpError::NonFinite(_))));
    }

    #[test]
    fn format_bounds_checked() {
        assert!(FxpFormat::new(1, 0).is_err());
        assert!(FxpFormat::new(33, 0).is_err());
        assert!(FxpFormat::new(8, 8).is_err());
        assert!(FxpFormat::new(32, 31).is_ok());
    }

    #[test]
    fn literal_upper_bound_and_alternative() {
        let lit = f(8, 4);
        assert_eq!(lit.max_value(), 7.0);
        assert_eq!(lit.min_value(), -8.0);
        let alt = FxpFormat::with_upper(8, 4, UpperClip::LargestCode).unwrap();
        assert_eq!(alt.max_value(), 8.0 - 1.0 / 16.0);
        assert_eq!(alt.apply(100.0), 7.9375);
        assert_eq!(alt.max_code(), 127);
        assert_eq!(lit.max_code(), 112);
    }

    #[test]
    fn code_examples() {
        assert_eq!(to_code(0.3125, f(8, 4)).unwrap(), 5);
        assert_eq!(to_code(-1.0, f(8, 4)).unwrap(), -16);
        assert_eq!(from_code(0, f(8, 4)).unwrap(), 0.0);
        assert_eq!(from_code(0, f(32, 16)).unwrap(), 0.0);
        assert!(matches!(from_code(128, f(8, 4)), Err(FxpError::CodeOutOfRange { .. })));
        assert!(matches!(to_code(9.0, f(8, 4)), Err(FxpError::CodeOutOfRange { .. })));
    }

    #[test]
    fn ste_examples() {
        let fmt = f(16, 8);
        assert_eq!(ste_grad(0.7, 0.1, fmt), 0.7);
        assert_eq!(ste_grad(0.7, 1e6, fmt), 0.0);
        assert_eq!(ste_grad(0.7, -1e6, fmt), 0.0);
        assert_eq!(ste_grad(0.0, 0.1, fmt), 0.0);
        assert_eq!(ste_grad(0.0, 1e6, fmt), 0.0);
    }

    #[test]
    fn integer_rounding_helpers() {
        assert_eq!(shift_round(5, 1), 3);
        assert_eq!(shift_round(-5, 1), -3);
        assert_eq!(shift_round(4, 1), 2);
        assert_eq!(shift_round(-7, 2), -2);
        assert_eq!(div_round(7, 2), 4);
        assert_eq!(div_round(-7, 2), -4);
        assert_eq!(div_round(10, 4), 3);
        assert_eq!(div_round(9, 4), 2);
        assert_eq!(requantize_code(1000, 4, f(8, 4)), 112);
        assert_eq!(requantize_code(-1000, 4, f(8, 4)), -128);
        assert_eq!(requantize_code(3, 0, f(8, 2)), 12);
    }

    fn any_format() -> impl Strategy<Value = FxpFormat> {
        (2u32..=32).prop_flat_map(|w| (Just(w), 0..w)).prop_map(|(w, p)| f(w, p))
    }

    proptest! {
        #[test]
        fn integer_requantize_matches_float(v in -1_000_000i64..1_000_000, from in 0u32..20, fmt in any_format()) {
            let real = v as f64 / (from as f64).exp2();
            let expected = to_code(fmt.apply(real), fmt).unwrap();
            prop_assert_eq!(requantize_code(v as i128, from, fmt), expected);
        }

        #[test]
        fn rounding_to_frac_matches_shift(v in -1_000_000i64..1_000_000, from in 0u32..24, to in 0u32..24) {
            prop_assume!(to <= from);
            let real = v as f64 / (from as f64).exp2();
            let r = round_to_frac(real, to) * (to as f64).exp2();
            prop_assert_eq!(r as i128, shift_round(v as i128, from - to));
        }

        #[test]
        fn code_round_trip(x in -1.0e4f64..1.0e4, fmt in any_format()) {
            let q = fmt.apply(x);
            let c = to_code(q, fmt).unwrap();
            prop_assert_eq!(from_code(c, fmt).unwrap(), q);
        }
    }
}
