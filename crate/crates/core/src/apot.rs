//! Additive powers-of-two approximation of proposal centres.
//!
//! A centre `c` is approximated greedily: start from the nearest power of two
//! (rounded in the log domain), then keep adding the power-of-two rounding of
//! the residual while the residual is still at least `δ·|c|` and the order
//! budget allows another term. Every emitted value is an exact sum of its
//! terms, so hardware can realise the multiply with shifts and adds.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clusters::ProposalSet;
use crate::error::{param_err, Error, Result};

/// One signed power of two, `±2^exponent`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pow2Term {
    pub negative: bool,
    pub exponent: i32,
}

impl Pow2Term {
    pub fn value(self) -> f64 {
        let magnitude = exp2i(self.exponent);
        if self.negative {
            -magnitude
        } else {
            magnitude
        }
    }
}

impl fmt::Display for Pow2Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.negative { '-' } else { '+' };
        write!(f, "{sign}2^{}", self.exponent)
    }
}

impl std::str::FromStr for Pow2Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad power-of-two term `{s}`"));
        let (negative, rest) = match s.as_bytes().first() {
            Some(b'+') => (false, &s[1..]),
            Some(b'-') => (true, &s[1..]),
            _ => return Err(bad()),
        };
        let exponent = rest
            .strip_prefix("2^")
            .ok_or_else(bad)?
            .parse::<i32>()
            .map_err(|_| bad())?;
        Ok(Pow2Term { negative, exponent })
    }
}

/// Exact `2^e` for every exponent representable as a normal or subnormal f64.
pub(crate) fn exp2i(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else if (-1074..-1022).contains(&e) {
        f64::from_bits(1u64 << (e + 1074))
    } else if e > 1023 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// `floor(log2 |x|)` and the mantissa `|x| / 2^floor`, both exact.
fn split_exponent(x: f64) -> (i32, f64) {
    let a = x.abs();
    let bits = a.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // subnormal: rescale into the normal range first
        let (e, m) = split_exponent(a * exp2i(64));
        return (e - 64, m);
    }
    let mantissa = f64::from_bits((bits & ((1u64 << 52) - 1)) | (1023u64 << 52));
    (biased - 1023, mantissa)
}

/// Rounds `x` to `sgn(x)·2^round(log2|x|)`.
///
/// The exponent is rounded half-up, i.e. `|x| ≥ √2·2^k` goes to `2^(k+1)`.
pub fn pow2_round(x: f64) -> Result<Pow2Term> {
    if x == 0.0 || !x.is_finite() {
        return param_err(format!("pow2_round needs a finite nonzero input, got {x}"));
    }
    let (floor, mantissa) = split_exponent(x);
    let exponent = if mantissa >= std::f64::consts::SQRT_2 {
        floor + 1
    } else {
        floor
    };
    Ok(Pow2Term {
        negative: x < 0.0,
        exponent,
    })
}

/// A codebook value together with the power-of-two terms that produce it.
/// Zero carries no terms and has order 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApotValue {
    value: f64,
    terms: Vec<Pow2Term>,
}

impl ApotValue {
    pub fn zero() -> Self {
        ApotValue {
            value: 0.0,
            terms: Vec::new(),
        }
    }

    /// Builds a value from its terms; the sum is exact for any realistic
    /// exponent spread.
    pub fn from_terms(terms: Vec<Pow2Term>) -> Self {
        let value = terms.iter().map(|t| t.value()).sum();
        ApotValue { value, terms }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn terms(&self) -> &[Pow2Term] {
        &self.terms
    }

    pub fn order(&self) -> usize {
        self.terms.len()
    }

    pub fn relative_error(&self, target: f64) -> f64 {
        (target - self.value).abs() / target.abs()
    }

    /// Term list rendered as space-separated `±2^e` tokens.
    pub fn terms_string(&self) -> String {
        self.terms
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn parse_terms(s: &str) -> Result<Vec<Pow2Term>> {
    s.split_whitespace().map(str::parse).collect()
}

/// Greedy order-limited approximation of a nonzero centre.
pub fn apot_approximate(c: f64, omega: usize, delta: f64) -> Result<ApotValue> {
    apot_approximate_clamped(c, omega, delta, None)
}

/// As [`apot_approximate`], but terms below `2^min_exponent` are never
/// emitted (b-bit hardware clamp). The leading term is kept regardless so the
/// result is never empty.
pub fn apot_approximate_clamped(
    c: f64,
    omega: usize,
    delta: f64,
    min_exponent: Option<i32>,
) -> Result<ApotValue> {
    if omega == 0 {
        return param_err("order must be at least 1");
    }
    if !(delta > 0.0 && delta < 1.0) {
        return param_err(format!("delta must lie in (0, 1), got {delta}"));
    }
    let first = pow2_round(c)?;
    let mut approx = first.value();
    let mut terms = vec![first];
    let budget = delta * c.abs();
    while terms.len() < omega {
        let residual = c - approx;
        if residual.abs() < budget || residual == 0.0 {
            break;
        }
        let term = pow2_round(residual)?;
        if min_exponent.is_some_and(|floor| term.exponent < floor) {
            break;
        }
        approx += term.value();
        terms.push(term);
    }
    Ok(ApotValue {
        value: approx,
        terms,
    })
}

/// The working codebook for one order: sorted, deduplicated, always holding 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    omega: usize,
    entries: Vec<ApotValue>,
    values: Vec<f64>,
}

impl Codebook {
    pub fn omega(&self) -> usize {
        self.omega
    }

    pub fn entries(&self) -> &[ApotValue] {
        &self.entries
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Maps every nonzero proposal through [`apot_approximate`] and merges
/// duplicates. When two proposals land on the same value the shorter term
/// list wins.
pub fn approximate_set(proposals: &ProposalSet, omega: usize, delta: f64) -> Result<Codebook> {
    let mut entries = vec![ApotValue::zero()];
    for &c in proposals.values() {
        if c != 0.0 {
            entries.push(apot_approximate(c, omega, delta)?);
        }
    }
    entries.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.order().cmp(&b.order())));
    entries.dedup_by(|later, earlier| later.value == earlier.value);
    let values = entries.iter().map(|e| e.value).collect();
    Ok(Codebook {
        omega,
        entries,
        values,
    })
}
