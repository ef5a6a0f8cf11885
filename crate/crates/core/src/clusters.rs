//! Full-precision proposal centres and the thresholded relative distance.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

const MAX_CHAIN: usize = 1 << 20;

/// `|w − c| / |w|` for weights at or above the prune threshold, 0 below it.
#[inline]
pub fn relative_distance(w: f64, c: f64, delta0: f64) -> f64 {
    if w.abs() >= delta0 {
        (w - c).abs() / w.abs()
    } else {
        0.0
    }
}

/// Proposal centres `{a·δ₀·((1+δ)/(1−δ))^j | a ∈ {−1, 0, +1}}`, truncated at
/// the largest weight magnitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    delta: f64,
    delta0: f64,
    values: Vec<f64>,
}

impl ProposalSet {
    /// Grows the positive chain from `delta0` by the ratio `(1+δ)/(1−δ)` and
    /// keeps every centre that does not exceed `w_max`.
    pub fn generate(delta: f64, delta0: f64, w_max: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return param_err(format!("delta must lie in (0, 1), got {delta}"));
        }
        if !(delta0 > 0.0 && delta0.is_finite()) {
            return param_err(format!("delta0 must be positive, got {delta0}"));
        }
        if !(w_max.is_finite() && delta0 <= w_max) {
            return param_err(format!(
                "delta0 ({delta0}) exceeds the largest weight ({w_max})"
            ));
        }
        let ratio = (1.0 + delta) / (1.0 - delta);
        let mut positive = Vec::new();
        let mut c = delta0;
        while c <= w_max {
            if positive.len() == MAX_CHAIN {
                return param_err("proposal chain too long; raise delta or delta0");
            }
            positive.push(c);
            c *= ratio;
        }
        Ok(Self::from_positive(delta, delta0, &positive))
    }

    /// A set holding only the zero centre, used when every weight is already
    /// below the prune threshold.
    pub fn zero_only(delta: f64, delta0: f64) -> Self {
        Self::from_positive(delta, delta0, &[])
    }

    fn from_positive(delta: f64, delta0: f64, positive: &[f64]) -> Self {
        let mut values: Vec<f64> = positive.iter().rev().map(|c| -c).collect();
        values.push(0.0);
        values.extend_from_slice(positive);
        ProposalSet {
            delta,
            delta0,
            values,
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn delta0(&self) -> f64 {
        self.delta0
    }

    /// All centres, ascending.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The positive chain, ascending.
    pub fn positive(&self) -> &[f64] {
        &self.values[self.values.len() / 2 + 1..]
    }

    pub fn max_centre(&self) -> f64 {
        self.positive().last().copied().unwrap_or(0.0)
    }
}

/// Index of the centre minimising the relative distance to `w`, plus that
/// distance.
///
/// For `|w| ≥ δ₀` this is the centre closest in absolute terms; exact ties go
/// to the smaller-magnitude centre. Below δ₀ every distance is 0 and the zero
/// centre (or the smallest-magnitude one if 0 is absent) is returned.
pub fn nearest_centre(w: f64, centres: &[f64], delta0: f64) -> Result<(usize, f64)> {
    if centres.is_empty() {
        return param_err("nearest_centre needs at least one centre");
    }
    if w.abs() < delta0 {
        let idx = smallest_magnitude(centres);
        return Ok((idx, 0.0));
    }
    let upper = centres.partition_point(|&c| c < w);
    let best = match (upper.checked_sub(1), centres.get(upper)) {
        (None, _) => upper,
        (Some(lo), None) => lo,
        (Some(lo), Some(&hi_val)) => {
            let d_lo = (w - centres[lo]).abs();
            let d_hi = (hi_val - w).abs();
            if d_lo < d_hi {
                lo
            } else if d_hi < d_lo {
                upper
            } else if centres[lo].abs() <= hi_val.abs() {
                lo
            } else {
                upper
            }
        }
    };
    Ok((best, relative_distance(w, centres[best], delta0)))
}

fn smallest_magnitude(centres: &[f64]) -> usize {
    let pos = centres.partition_point(|&c| c < 0.0);
    match (pos.checked_sub(1), centres.get(pos)) {
        (None, _) => pos,
        (Some(lo), None) => lo,
        (Some(lo), Some(&hi)) => {
            if hi <= centres[lo].abs() {
                pos
            } else {
                lo
            }
        }
    }
}
