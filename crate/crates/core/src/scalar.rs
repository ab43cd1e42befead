//! Scalar abstraction shared by the numeric parts of the crate.
//!
//! Metrics, cosine similarity and token matching are written once against
//! [`Scalar`] and instantiated for `f32` and `f64`. Split ratios are exact
//! rationals ([`SplitRatio`]) so train/test counts never depend on float
//! rounding.

use std::fmt::{Debug, Display};

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from a count.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as float")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Exact train fraction used by dataset splitting.
pub type SplitRatio = Ratio<u64>;

/// Parse a split ratio written either as a decimal (`0.8`) or a fraction (`4/5`).
pub fn parse_ratio(text: &str) -> Option<SplitRatio> {
    let text = text.trim();
    if let Some((num, den)) = text.split_once('/') {
        let num: u64 = num.trim().parse().ok()?;
        let den: u64 = den.trim().parse().ok()?;
        if den == 0 || num > den {
            return None;
        }
        return Some(Ratio::new(num, den));
    }
    let (int_part, frac_part) = text.split_once('.').unwrap_or((text, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    if frac_part.len() > 18 {
        return None;
    }
    let den = 10u64.pow(frac_part.len() as u32);
    let int: u64 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
    let frac: u64 = if frac_part.is_empty() { 0 } else { frac_part.parse().ok()? };
    let num = int.checked_mul(den)?.checked_add(frac)?;
    if num > den {
        return None;
    }
    Some(Ratio::new(num, den))
}

/// Render a ratio the way [`parse_ratio`] accepts it.
pub fn format_ratio(r: &SplitRatio) -> String {
    format!("{}/{}", r.numer(), r.denom())
}
