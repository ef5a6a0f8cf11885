//! The clustering stage: greedy modal-cluster weight fixing.
//!
//! Each fixing iteration `t` keeps picking the centre that is nearest to the
//! most free weights (the modal centre), sorts all free weights by relative
//! distance to it and fixes the longest prefix whose mean distance stays
//! within `δ^t`. When that prefix is empty the codebook order ω is raised and
//! the search repeats. The iteration ends once the fixed fraction passes
//! `p_t`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apot::{approximate_set, Codebook};
use crate::clusters::{nearest_centre, relative_distance, ProposalSet};
use crate::error::{param_err, Result};
use crate::model::{CodebookEntry, LayerKind, Network};

/// `δ^t = δ·(T − t + 1)`.
pub fn delta_schedule(delta: f64, iterations: usize, t: usize) -> Result<f64> {
    if t == 0 || t > iterations {
        return param_err(format!("iteration {t} outside 1..={iterations}"));
    }
    Ok(delta * (iterations - t + 1) as f64)
}

/// Largest `n` with `Σ_{i<n} d_i ≤ n·δ_t` over an ascending distance list.
pub fn select_batch(sorted_dists: &[f64], delta_t: f64) -> usize {
    let mut sum = 0.0;
    let mut best = 0;
    for (i, &d) in sorted_dists.iter().enumerate() {
        sum += d;
        if sum <= (i + 1) as f64 * delta_t {
            best = i + 1;
        }
    }
    best
}

/// Fixed-fraction targets `p_1 … p_T` (ending at 1) plus the base threshold δ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    base_delta: f64,
    fractions: Vec<f64>,
}

impl Schedule {
    /// Validates a strictly increasing fraction list ending at exactly 1.
    pub fn new(base_delta: f64, fractions: Vec<f64>) -> Result<Self> {
        if fractions.windows(2).any(|w| w[0] >= w[1]) {
            return param_err("fixed fractions must be strictly increasing");
        }
        Self::checked(base_delta, fractions)
    }

    /// `p_t = t/T`.
    pub fn linear(base_delta: f64, iterations: usize) -> Result<Self> {
        let fractions = (1..=iterations)
            .map(|t| t as f64 / iterations as f64)
            .collect();
        Self::new(base_delta, fractions)
    }

    fn checked(base_delta: f64, fractions: Vec<f64>) -> Result<Self> {
        if fractions.is_empty() {
            return param_err("schedule needs at least one iteration");
        }
        if fractions.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return param_err("fixed fractions must lie in (0, 1]");
        }
        if *fractions.last().unwrap() != 1.0 {
            return param_err("the last fixed fraction must be 1");
        }
        if !(base_delta > 0.0 && base_delta * (fractions.len() as f64) < 1.0) {
            return param_err(format!(
                "delta must be positive with delta·T < 1 (delta = {base_delta}, T = {})",
                fractions.len()
            ));
        }
        Ok(Schedule {
            base_delta,
            fractions,
        })
    }

    /// `p_t ← max(floor, p_t)`, keeping T. The result may plateau.
    pub fn with_floor(&self, floor: f64) -> Result<Self> {
        let fractions = self.fractions.iter().map(|&p| p.max(floor)).collect();
        Self::checked(self.base_delta, fractions)
    }

    pub fn iterations(&self) -> usize {
        self.fractions.len()
    }

    pub fn base_delta(&self) -> f64 {
        self.base_delta
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn fraction(&self, t: usize) -> Result<f64> {
        match t.checked_sub(1).and_then(|i| self.fractions.get(i)) {
            Some(&p) => Ok(p),
            None => param_err(format!("iteration {t} outside 1..={}", self.iterations())),
        }
    }

    pub fn delta_at(&self, t: usize) -> Result<f64> {
        delta_schedule(self.base_delta, self.iterations(), t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixerConfig {
    /// Prune threshold δ₀.
    pub delta0: f64,
    /// Highest codebook order tried before the full-precision fallback.
    pub omega_max: usize,
    /// Leave norm-layer parameters out of fixing entirely.
    pub exclude_norm: bool,
}

impl Default for FixerConfig {
    fn default() -> Self {
        FixerConfig {
            delta0: 1e-3,
            omega_max: 12,
            exclude_norm: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSource {
    /// Admitted under the mean-distance rule around the modal centre.
    Modal,
    /// Single weight fixed to its nearest full-precision proposal after ω ran out.
    Fallback,
    /// Pruned to zero before the first iteration.
    Prune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub source: BatchSource,
    pub centre: f64,
    /// Codebook order ω the batch was found at (0 for prune/fallback).
    pub omega: usize,
    /// Power-of-two terms of the centre, `None` for full-precision values.
    pub terms: Option<String>,
    pub size: usize,
    pub mean_distance: f64,
    pub weight_ids: Vec<usize>,
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub delta_t: f64,
    pub p_t: f64,
    pub fixed_count: usize,
    pub max_omega: usize,
    pub batches: Vec<BatchRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub centre: f64,
    /// Escalation level ω at which the weight was fixed.
    pub omega: usize,
    /// Number of power-of-two terms in the centre (`None`: full precision).
    pub order: Option<usize>,
    pub iteration: usize,
}

/// Everything the clustering stage has decided so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixingState {
    pub t: usize,
    pub delta_t: f64,
    pub p_t: f64,
    /// Weights taking part in fixing (norm parameters may be excluded).
    pub eligible: Vec<bool>,
    pub assignments: Vec<Option<Assignment>>,
    pub history: Vec<IterationRecord>,
}

impl FixingState {
    pub fn new(net: &Network, cfg: &FixerConfig) -> Self {
        let mut eligible = vec![true; net.num_params()];
        if cfg.exclude_norm {
            for layer in net.layer_info() {
                if layer.kind() == LayerKind::Norm {
                    eligible[layer.ids()].iter_mut().for_each(|e| *e = false);
                }
            }
        }
        // weights fixed before this state existed still count as fixed
        let assignments = net
            .fixed_value_index()
            .iter()
            .map(|slot| {
                slot.map(|s| {
                    let entry = &net.codebook()[s as usize];
                    Assignment {
                        centre: entry.value,
                        omega: 0,
                        order: entry.order(),
                        iteration: 0,
                    }
                })
            })
            .collect();
        FixingState {
            t: 0,
            delta_t: 0.0,
            p_t: 0.0,
            eligible,
            assignments,
            history: Vec::new(),
        }
    }

    pub fn eligible_count(&self) -> usize {
        self.eligible.iter().filter(|&&e| e).count()
    }

    pub fn fixed_eligible(&self) -> usize {
        self.eligible
            .iter()
            .zip(&self.assignments)
            .filter(|(e, a)| **e && a.is_some())
            .count()
    }

    pub fn fixed_fraction(&self) -> f64 {
        let n = self.eligible_count();
        if n == 0 {
            1.0
        } else {
            self.fixed_eligible() as f64 / n as f64
        }
    }

    pub fn all_fixed(&self) -> bool {
        self.fixed_eligible() == self.eligible_count()
    }

    fn free_ids(&self) -> Vec<usize> {
        (0..self.eligible.len())
            .filter(|&i| self.eligible[i] && self.assignments[i].is_none())
            .collect()
    }

    /// Fixes `ids` to zero before any iteration runs (pruning at init).
    pub fn prune(&mut self, net: &mut Network, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Ok(());
        }
        let slot = net.intern(CodebookEntry::full_precision(0.0));
        let mut distances = Vec::with_capacity(ids.len());
        for &id in ids {
            if !self.eligible.get(id).copied().unwrap_or(false) {
                return param_err(format!("weight {id} cannot be pruned"));
            }
            distances.push(if net.params()[id] == 0.0 { 0.0 } else { 1.0 });
            net.fix(id, slot)?;
            self.assignments[id] = Some(Assignment {
                centre: 0.0,
                omega: 0,
                order: Some(0),
                iteration: 0,
            });
        }
        let mean = distances.iter().sum::<f64>() / distances.len() as f64;
        self.history.push(IterationRecord {
            t: 0,
            delta_t: 0.0,
            p_t: self.fixed_fraction(),
            fixed_count: self.fixed_eligible(),
            max_omega: 0,
            batches: vec![BatchRecord {
                source: BatchSource::Prune,
                centre: 0.0,
                omega: 0,
                terms: Some(String::new()),
                size: ids.len(),
                mean_distance: mean,
                weight_ids: ids.to_vec(),
                distances,
            }],
        });
        Ok(())
    }

    /// Histogram of centre orders over fixed weights. Full-precision
    /// fallbacks are keyed `None`.
    pub fn order_histogram(&self) -> std::collections::BTreeMap<Option<usize>, usize> {
        let mut hist = std::collections::BTreeMap::new();
        for a in self.assignments.iter().flatten() {
            *hist.entry(a.order).or_insert(0) += 1;
        }
        hist
    }
}

/// Codebooks for ω = 1..=omega_max, built on demand for one iteration.
struct Codebooks<'a> {
    proposals: &'a ProposalSet,
    delta: f64,
    books: Vec<Codebook>,
}

impl<'a> Codebooks<'a> {
    fn get(&mut self, omega: usize) -> Result<&Codebook> {
        while self.books.len() < omega {
            let next = approximate_set(self.proposals, self.books.len() + 1, self.delta)?;
            self.books.push(next);
        }
        Ok(&self.books[omega - 1])
    }
}

struct Batch {
    centre: CodebookEntry,
    omega: usize,
    source: BatchSource,
    ids: Vec<usize>,
    distances: Vec<f64>,
}

/// Index of the modal centre: most nearest weights, ties to larger |c| then
/// lower index.
fn modal_centre(counts: &[usize], values: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..counts.len() {
        let better = counts[k] > counts[best]
            || (counts[k] == counts[best] && values[k].abs() > values[best].abs());
        if better {
            best = k;
        }
    }
    best
}

fn modal_batch(
    params: &[f64],
    free: &[usize],
    book: &Codebook,
    delta0: f64,
    delta_t: f64,
) -> Result<Option<Batch>> {
    let values = book.values();
    let nearest: Vec<usize> = free
        .par_iter()
        .map(|&id| nearest_centre(params[id], values, delta0).map(|(k, _)| k))
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; values.len()];
    for k in nearest {
        counts[k] += 1;
    }
    let k = modal_centre(&counts, values);
    let centre = values[k];

    // sub-threshold weights are reserved for the zero centre
    let mut candidates: Vec<(f64, usize)> = free
        .iter()
        .filter(|&&id| centre == 0.0 || params[id].abs() >= delta0)
        .map(|&id| (relative_distance(params[id], centre, delta0), id))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let dists: Vec<f64> = candidates.iter().map(|c| c.0).collect();
    let n = select_batch(&dists, delta_t);
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(Batch {
        centre: CodebookEntry::from_apot(&book.entries()[k]),
        omega: book.omega(),
        source: BatchSource::Modal,
        ids: candidates[..n].iter().map(|c| c.1).collect(),
        distances: dists[..n].to_vec(),
    }))
}

fn fallback_batch(params: &[f64], free: &[usize], proposals: &ProposalSet) -> Result<Batch> {
    let mut best: Option<(f64, usize, f64)> = None;
    for &id in free {
        let (k, d) = nearest_centre(params[id], proposals.values(), proposals.delta0())?;
        if best.is_none_or(|(bd, bid, _)| d < bd || (d == bd && id < bid)) {
            best = Some((d, id, proposals.values()[k]));
        }
    }
    let (d, id, value) = best.expect("fallback called with free weights");
    log::debug!(
        "no admissible batch up to the maximum order; fixing weight {id} to full-precision {value}"
    );
    Ok(Batch {
        centre: CodebookEntry::full_precision(value),
        omega: 0,
        source: BatchSource::Fallback,
        ids: vec![id],
        distances: vec![d],
    })
}

/// Runs the clustering stage of iteration `t`: fixes whole batches until
/// more than `N·p_t` eligible weights are fixed (or none are free).
pub fn fixing_iteration(
    net: &mut Network,
    state: &mut FixingState,
    proposals: &ProposalSet,
    schedule: &Schedule,
    t: usize,
    cfg: &FixerConfig,
) -> Result<()> {
    if cfg.omega_max == 0 {
        return param_err("omega_max must be at least 1");
    }
    if state.assignments.len() != net.num_params() {
        return param_err("fixing state does not match the network");
    }
    let delta_t = schedule.delta_at(t)?;
    let p_t = schedule.fraction(t)?;
    let target = state.eligible_count() as f64 * p_t;
    let mut books = Codebooks {
        proposals,
        delta: delta_t,
        books: Vec::new(),
    };
    let mut record = IterationRecord {
        t,
        delta_t,
        p_t,
        fixed_count: 0,
        max_omega: 0,
        batches: Vec::new(),
    };

    loop {
        let free = state.free_ids();
        if free.is_empty() || state.fixed_eligible() as f64 > target {
            break;
        }
        let mut omega = 0;
        let batch = loop {
            omega += 1;
            if omega > cfg.omega_max {
                break fallback_batch(net.params(), &free, proposals)?;
            }
            let book = books.get(omega)?;
            if let Some(b) = modal_batch(net.params(), &free, book, cfg.delta0, delta_t)? {
                break b;
            }
        };

        let slot = net.intern(batch.centre.clone());
        for &id in &batch.ids {
            net.fix(id, slot)?;
            state.assignments[id] = Some(Assignment {
                centre: batch.centre.value,
                omega: batch.omega,
                order: batch.centre.order(),
                iteration: t,
            });
        }
        record.max_omega = record.max_omega.max(batch.omega);
        let mean = batch.distances.iter().sum::<f64>() / batch.ids.len() as f64;
        record.batches.push(BatchRecord {
            source: batch.source,
            centre: batch.centre.value,
            omega: batch.omega,
            terms: batch.centre.terms.as_ref().map(|t| {
                t.iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            }),
            size: batch.ids.len(),
            mean_distance: mean,
            weight_ids: batch.ids,
            distances: batch.distances,
        });
    }

    record.fixed_count = state.fixed_eligible();
    state.t = t;
    state.delta_t = delta_t;
    state.p_t = p_t;
    state.history.push(record);
    Ok(())
}

/// Runs all `T` clustering stages, calling `train` between consecutive ones
/// (never after the last, when nothing is free).
pub fn run_fixing_schedule<F>(
    mut net: Network,
    proposals: &ProposalSet,
    schedule: &Schedule,
    cfg: &FixerConfig,
    mut train: F,
) -> Result<(Network, FixingState)>
where
    F: FnMut(&mut Network, &FixingState, usize) -> Result<()>,
{
    let mut state = FixingState::new(&net, cfg);
    run_fixing_schedule_from(&mut net, &mut state, proposals, schedule, cfg, &mut train)?;
    Ok((net, state))
}

/// As [`run_fixing_schedule`] but continuing from an existing state (e.g.
/// after pruning at initialisation).
pub fn run_fixing_schedule_from<F>(
    net: &mut Network,
    state: &mut FixingState,
    proposals: &ProposalSet,
    schedule: &Schedule,
    cfg: &FixerConfig,
    train: &mut F,
) -> Result<()>
where
    F: FnMut(&mut Network, &FixingState, usize) -> Result<()>,
{
    let iterations = schedule.iterations();
    for t in 1..=iterations {
        fixing_iteration(net, state, proposals, schedule, t, cfg)?;
        if t < iterations {
            train(net, state, t)?;
        }
    }
    Ok(())
}
