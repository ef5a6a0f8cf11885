//! Cluster-attraction regulariser.
//!
//! For each free weight `w` at or above δ₀ with distances `d_j` to the
//! centres, `L_w = Σ_j d_j·p_j` where `p = softmin(d)`. The derivative is
//! `∂L_w/∂d_j = p_j·(1 − d_j + L_w)` and
//! `∂d_j/∂w = (sgn(w − c_j) − d_j·sgn(w)) / |w|`.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

/// Terms with `d_j − d_min` above this are skipped. Their softmin weight is
/// below e^-40, far under the 1e-12 contribution budget for any realistic
/// distance.
const SOFTMIN_CUTOFF: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegContext {
    centres: Vec<f64>,
    delta0: f64,
    free_ids: Vec<usize>,
}

impl RegContext {
    /// Centres are sorted and deduplicated.
    pub fn new(mut centres: Vec<f64>, delta0: f64, free_ids: Vec<usize>) -> Result<Self> {
        if centres.is_empty() {
            return param_err("regulariser needs at least one centre");
        }
        if centres.iter().any(|c| !c.is_finite()) {
            return param_err("regulariser centres must be finite");
        }
        centres.sort_by(f64::total_cmp);
        centres.dedup();
        Ok(RegContext {
            centres,
            delta0,
            free_ids,
        })
    }

    pub fn centres(&self) -> &[f64] {
        &self.centres
    }

    pub fn delta0(&self) -> f64 {
        self.delta0
    }

    pub fn free_ids(&self) -> &[usize] {
        &self.free_ids
    }
}

/// Loss of one weight and `∂L/∂w`.
fn weight_term(w: f64, centres: &[f64], delta0: f64, with_grad: bool) -> (f64, f64) {
    if w.abs() < delta0 {
        return (0.0, 0.0);
    }
    let inv = 1.0 / w.abs();
    let dist = |c: f64| (w - c).abs() * inv;
    // relative distance grows monotonically away from w, so scan outwards
    // from the insertion point and stop once past the cutoff on each side
    let split = centres.partition_point(|&c| c < w);
    let nearest = [
        split.checked_sub(1),
        (split < centres.len()).then_some(split),
    ]
    .into_iter()
    .flatten()
    .map(|i| dist(centres[i]))
    .fold(f64::INFINITY, f64::min);
    let mut lo = split;
    while lo > 0 && dist(centres[lo - 1]) - nearest <= SOFTMIN_CUTOFF {
        lo -= 1;
    }
    let mut hi = split;
    while hi < centres.len() && dist(centres[hi]) - nearest <= SOFTMIN_CUTOFF {
        hi += 1;
    }
    let window = &centres[lo..hi];
    let mut z = 0.0;
    let mut weighted = 0.0;
    for &c in window {
        let d = dist(c);
        let e = (nearest - d).exp();
        z += e;
        weighted += d * e;
    }
    let loss = weighted / z;
    if !with_grad {
        return (loss, 0.0);
    }
    let sgn_w = w.signum();
    let mut grad = 0.0;
    for &c in window {
        let d = dist(c);
        let p = (nearest - d).exp() / z;
        let sgn = if w > c {
            1.0
        } else if w < c {
            -1.0
        } else {
            0.0
        };
        grad += p * (1.0 - d + loss) * (sgn - d * sgn_w) * inv;
    }
    (loss, grad)
}

pub fn reg_loss(params: &[f64], ctx: &RegContext) -> f64 {
    ctx.free_ids
        .iter()
        .map(|&i| weight_term(params[i], &ctx.centres, ctx.delta0, false).0)
        .sum()
}

/// Regulariser value and its gradient over the full parameter vector (zero
/// outside the free set).
pub fn reg_loss_and_grad(params: &[f64], ctx: &RegContext) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for &i in &ctx.free_ids {
        let (l, g) = weight_term(params[i], &ctx.centres, ctx.delta0, true);
        total += l;
        grad[i] = g;
    }
    (total, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(centres: &[f64], free: &[usize]) -> RegContext {
        RegContext::new(centres.to_vec(), 0.01, free.to_vec()).unwrap()
    }

    #[test]
    fn hand_example() {
        // distances {0.5, 0}; p = softmax(−d); oracle value 0.5·σ(−0.5)
        let l = reg_loss(&[0.5], &ctx(&[0.25, 0.5], &[0]));
        assert!((l - 0.188_770_334_399_072_73).abs() < 1e-15);
    }

    #[test]
    fn zero_cases() {
        assert_eq!(reg_loss(&[0.3], &ctx(&[0.3], &[0])), 0.0);
        assert_eq!(reg_loss(&[0.005, -0.002], &ctx(&[0.25], &[0, 1])), 0.0);
        assert_eq!(reg_loss(&[0.5], &ctx(&[0.25], &[])), 0.0);
        assert!(RegContext::new(vec![], 0.01, vec![]).is_err());
    }

    #[test]
    fn cutoff_matches_full_sum() {
        let centres: Vec<f64> = (-200..=200).map(|k| k as f64 * 0.01).collect();
        let c = ctx(&centres, &[0]);
        let w = 0.037;
        let full: f64 = {
            let d: Vec<f64> = centres.iter().map(|c| (w - c).abs() / w).collect();
            let z: f64 = d.iter().map(|d| (-d).exp()).sum();
            d.iter().map(|d| d * (-d).exp() / z).sum()
        };
        assert!((reg_loss(&[w], &c) - full).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let centres = [-0.5, -0.25, -0.125, 0.0, 0.0625, 0.125, 0.1875, 0.25, 0.5];
        let params = [0.3, -0.2, 0.07, 0.11, -0.4, 0.9, 0.004, 0.2, -0.13, 0.051];
        let c = ctx(&centres, &(0..10).collect::<Vec<_>>());
        let (_, g) = reg_loss_and_grad(&params, &c);
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params;
            p[i] += h;
            let up = reg_loss(&p, &c);
            p[i] -= 2.0 * h;
            let down = reg_loss(&p, &c);
            let n = (up - down) / (2.0 * h);
            assert!(
                (g[i] - n).abs() / g[i].abs().max(n.abs()).max(1e-6) < 1e-4,
                "{i}: {} vs {n}",
                g[i]
            );
        }
    }

    #[test]
    fn descent_pulls_weight_to_nearest_centre() {
        let c = ctx(&[0.125, 0.25, 0.5], &[0]);
        let mut w = 0.21;
        let mut prev = (w - 0.25f64).abs();
        for _ in 0..2000 {
            let (_, g) = reg_loss_and_grad(&[w], &c);
            w -= 1e-4 * g[0];
            let now = (w - 0.25f64).abs();
            if prev > 1e-3 {
                assert!(now < prev);
            }
            prev = now;
        }
        assert!(prev < 1e-3, "ended at {w}");
    }
}
