//! Training: baseline fitting and the alternating train/fix loop.
//!
//! During weight fixing each optimisation step applies Adam to
//! `g_CE + γ·g_reg` with `γ = α·L_CE / L_reg` taken as a plain number from
//! the current batch (0 when `L_reg` is 0). Fixed parameters receive no
//! update and keep their optimiser moments.

mod adam;
mod nn;
mod reg;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apot::approximate_set;
use crate::clusters::ProposalSet;
use crate::data::Dataset;
use crate::error::{param_err, Result};
use crate::fixer::{run_fixing_schedule_from, FixerConfig, FixingState, Schedule};
use crate::model::Network;

pub use adam::{Adam, AdamParams};
pub use nn::{
    backward, ce_loss_and_grad, forward, forward_with, loss_ce, loss_ce_grad, predict, relu_after,
    Forward,
};
pub use reg::{reg_loss, reg_loss_and_grad, RegContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub alpha: f64,
    pub epochs_per_iteration: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamParams,
    /// Whether norm-layer parameters take part in fixing.
    pub fix_norm_params: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 2e-4,
            alpha: 0.4,
            epochs_per_iteration: 3,
            batch_size: 32,
            seed: 0,
            adam: AdamParams::default(),
            fix_norm_params: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return param_err(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return param_err(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return param_err("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// One optimisation step, as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss_ce: f64,
    pub loss_reg: f64,
    pub gamma: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iteration={} epoch={} step={} loss_ce={:.6e} loss_reg={:.6e} gamma={:.6e}",
            self.iteration, self.epoch, self.step, self.loss_ce, self.loss_reg, self.gamma
        )
    }
}

/// Everything that went into one step, handed to step observers.
pub struct StepDetail<'a> {
    pub log: &'a StepLog,
    pub frozen: &'a [bool],
    pub before: &'a [f64],
    pub after: &'a [f64],
    pub grad_ce: &'a [f64],
    pub grad_reg: &'a [f64],
    /// The gradient handed to Adam (zero at frozen entries).
    pub combined: &'a [f64],
    /// Optimiser state before the step, for replaying it.
    pub adam_before: &'a Adam,
    pub eta: f64,
}

/// Applies one detached-γ Adam step on a batch and returns its log entry.
/// `log.iteration/epoch/step` are left at 0 for the caller to fill in.
pub fn combined_step(
    net: &mut Network,
    x: &[f64],
    labels: &[usize],
    ctx: &RegContext,
    cfg: &TrainConfig,
    opt: &mut Adam,
    observer: Option<&mut dyn FnMut(&StepDetail)>,
) -> Result<StepLog> {
    if opt.len() != net.num_params() {
        return param_err("optimiser state does not match the network");
    }
    let frozen = net.fix_mask();
    if let Some(&id) = ctx
        .free_ids()
        .iter()
        .find(|&&i| frozen.get(i).copied().unwrap_or(true))
    {
        return param_err(format!("regulariser lists weight {id}, which is not free"));
    }
    let before = net.params().to_vec();
    let (loss_ce, grad_ce) = ce_loss_and_grad(net, &before, x, labels)?;
    let (loss_reg, grad_reg) = reg_loss_and_grad(&before, ctx);
    let gamma = if loss_reg > 0.0 {
        cfg.alpha * loss_ce / loss_reg
    } else {
        0.0
    };
    let combined: Vec<f64> = (0..before.len())
        .map(|i| {
            if frozen[i] {
                0.0
            } else {
                grad_ce[i] + gamma * grad_reg[i]
            }
        })
        .collect();
    let adam_before = observer.is_some().then(|| opt.clone());
    let mut after = before.clone();
    opt.step(&mut after, &combined, &frozen, cfg.eta);
    net.set_free_params(&after)?;
    let log = StepLog {
        iteration: 0,
        epoch: 0,
        step: 0,
        loss_ce,
        loss_reg,
        gamma,
    };
    if let (Some(obs), Some(adam_before)) = (observer, adam_before.as_ref()) {
        obs(&StepDetail {
            log: &log,
            frozen: &frozen,
            before: &before,
            after: net.params(),
            grad_ce: &grad_ce,
            grad_reg: &grad_reg,
            combined: &combined,
            adam_before,
            eta: cfg.eta,
        });
    }
    Ok(log)
}

pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    let pred = predict(net, data.features())?;
    let hits = pred
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Runs shuffled mini-batch epochs of [`combined_step`].
#[allow(clippy::too_many_arguments)]
fn train_epochs(
    net: &mut Network,
    data: &Dataset,
    ctx: &RegContext,
    cfg: &TrainConfig,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    iteration: usize,
    epochs: usize,
    log: &mut Vec<StepLog>,
    observer: &mut dyn FnMut(&StepDetail),
) -> Result<()> {
    if data.dim() != net.input().len() {
        return Err(crate::Error::Shape(format!(
            "dataset has {} features, network expects {}",
            data.dim(),
            net.input().len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(rng);
        for (step, rows) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.gather(rows);
            let mut entry = combined_step(net, &x, &y, ctx, cfg, opt, Some(&mut *observer))?;
            entry.iteration = iteration;
            entry.epoch = epoch;
            entry.step = step + 1;
            log::trace!("{entry}");
            log.push(entry);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamParams,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            eta: 1e-2,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            adam: AdamParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss_ce: f64,
    pub accuracy: f64,
}

/// Plain cross-entropy training of every free parameter.
pub fn train_baseline(
    net: &mut Network,
    data: &Dataset,
    cfg: &BaselineConfig,
) -> Result<Vec<EpochLog>> {
    let tc = TrainConfig {
        eta: cfg.eta,
        alpha: 0.0,
        epochs_per_iteration: 1,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        adam: cfg.adam,
        fix_norm_params: true,
    };
    tc.validate()?;
    let ctx = RegContext::new(vec![0.0], f64::INFINITY, Vec::new())?;
    let mut opt = Adam::new(net.num_params(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut steps = Vec::new();
        train_epochs(
            net,
            data,
            &ctx,
            &tc,
            &mut opt,
            &mut rng,
            0,
            1,
            &mut steps,
            &mut |_| {},
        )?;
        let mean_loss_ce = steps.iter().map(|s| s.loss_ce).sum::<f64>() / steps.len() as f64;
        let entry = EpochLog {
            epoch,
            mean_loss_ce,
            accuracy: accuracy(net, data)?,
        };
        log::debug!(
            "baseline epoch {epoch}: loss {mean_loss_ce:.5} acc {:.4}",
            entry.accuracy
        );
        out.push(entry);
    }
    Ok(out)
}

/// Per-iteration summary of a weight-fixing run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub t: usize,
    pub delta_t: f64,
    pub p_t: f64,
    pub fixed_fraction: f64,
    pub unique_fixed_values: usize,
    pub accuracy_after_fixing: f64,
    /// `None` after the final iteration, which has no training stage.
    pub accuracy_after_training: Option<f64>,
    pub mean_loss_ce: Option<f64>,
    pub mean_loss_reg: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct WfnRun {
    pub network: Network,
    pub state: FixingState,
    pub history: Vec<IterationMetrics>,
    pub steps: Vec<StepLog>,
}

/// Regulariser for the training stage after fixing: the order-1 codebook
/// plus every value already in use, over the still-free eligible weights.
pub fn reg_context(
    net: &Network,
    state: &FixingState,
    proposals: &ProposalSet,
    delta0: f64,
) -> Result<RegContext> {
    let base = approximate_set(proposals, 1, proposals.delta())?;
    let mut centres = base.values().to_vec();
    centres.extend(net.codebook().iter().map(|e| e.value));
    let free = (0..net.num_params())
        .filter(|&i| state.eligible[i] && state.assignments[i].is_none())
        .collect();
    RegContext::new(centres, delta0, free)
}

/// Alternates clustering and training over the whole schedule, starting
/// from a fresh fixing state. Norm-layer eligibility follows
/// `cfg.fix_norm_params`.
pub fn run_wfn(
    net: Network,
    train: &Dataset,
    eval: &Dataset,
    proposals: &ProposalSet,
    schedule: &Schedule,
    fixer: &FixerConfig,
    cfg: &TrainConfig,
) -> Result<WfnRun> {
    let fixer = FixerConfig {
        exclude_norm: !cfg.fix_norm_params,
        ..fixer.clone()
    };
    let state = FixingState::new(&net, &fixer);
    run_wfn_from(
        net,
        state,
        train,
        eval,
        proposals,
        schedule,
        &fixer,
        cfg,
        &mut |_| {},
    )
}

/// As [`run_wfn`] but continuing from a prepared state (e.g. after pruning)
/// and reporting every optimisation step to `observer`.
#[allow(clippy::too_many_arguments)]
pub fn run_wfn_from(
    mut net: Network,
    mut state: FixingState,
    train: &Dataset,
    eval: &Dataset,
    proposals: &ProposalSet,
    schedule: &Schedule,
    fixer: &FixerConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepDetail),
) -> Result<WfnRun> {
    cfg.validate()?;
    let mut opt = Adam::new(net.num_params(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut steps = Vec::new();
    let mut history: Vec<IterationMetrics> = Vec::new();

    let mut hook = |net: &mut Network, state: &FixingState, t: usize| -> Result<()> {
        let after_fix = accuracy(net, eval)?;
        let ctx = reg_context(net, state, proposals, fixer.delta0)?;
        let first = steps.len();
        train_epochs(
            net,
            train,
            &ctx,
            cfg,
            &mut opt,
            &mut rng,
            t,
            cfg.epochs_per_iteration,
            &mut steps,
            observer,
        )?;
        let fresh = &steps[first..];
        let mean = |f: fn(&StepLog) -> f64| {
            (!fresh.is_empty()).then(|| fresh.iter().map(f).sum::<f64>() / fresh.len() as f64)
        };
        let m = iteration_metrics(net, state, after_fix, Some(accuracy(net, eval)?));
        history.push(IterationMetrics {
            mean_loss_ce: mean(|s| s.loss_ce),
            mean_loss_reg: mean(|s| s.loss_reg),
            ..m
        });
        log::info!(
            "iteration {t}: fixed {:.3}, accuracy {:.4} -> {:.4}",
            state.fixed_fraction(),
            after_fix,
            history
                .last()
                .and_then(|h| h.accuracy_after_training)
                .unwrap_or(after_fix)
        );
        Ok(())
    };
    run_fixing_schedule_from(&mut net, &mut state, proposals, schedule, fixer, &mut hook)?;
    let final_acc = accuracy(&net, eval)?;
    history.push(iteration_metrics(&net, &state, final_acc, None));
    log::info!("final accuracy {final_acc:.4}");
    Ok(WfnRun {
        network: net,
        state,
        history,
        steps,
    })
}

fn iteration_metrics(
    net: &Network,
    state: &FixingState,
    after_fix: f64,
    after_train: Option<f64>,
) -> IterationMetrics {
    let mut values: Vec<u64> = (0..net.num_params())
        .filter(|&i| net.is_fixed(i))
        .map(|i| net.params()[i].to_bits())
        .collect();
    values.sort_unstable();
    values.dedup();
    IterationMetrics {
        t: state.t,
        delta_t: state.delta_t,
        p_t: state.p_t,
        fixed_fraction: state.fixed_fraction(),
        unique_fixed_values: values.len(),
        accuracy_after_fixing: after_fix,
        accuracy_after_training: after_train,
        mean_loss_ce: None,
        mean_loss_reg: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_moons;
    use crate::fixer::{fixing_iteration, FixerConfig};

    fn toy() -> (Network, Dataset) {
        (
            Network::mlp(&[2, 8, 2], 1).unwrap(),
            two_moons(64, 0.1, 2).unwrap(),
        )
    }

    #[test]
    fn alpha_zero_is_plain_adam() {
        let (mut net, data) = toy();
        let mut reference = net.clone();
        let cfg = TrainConfig {
            alpha: 0.0,
            ..TrainConfig::default()
        };
        let ctx = RegContext::new(vec![0.0, 0.25], 1e-3, net.free_ids()).unwrap();
        let mut opt = Adam::new(net.num_params(), cfg.adam);
        let (x, y) = data.gather(&(0..16).collect::<Vec<_>>());
        let log = combined_step(&mut net, &x, &y, &ctx, &cfg, &mut opt, None).unwrap();
        assert_eq!(log.gamma, 0.0);

        let mut plain = Adam::new(reference.num_params(), cfg.adam);
        let mut p = reference.params().to_vec();
        let (_, g) = ce_loss_and_grad(&reference, &p.clone(), &x, &y).unwrap();
        plain.step(&mut p, &g, &reference.fix_mask(), cfg.eta);
        reference.set_free_params(&p).unwrap();
        assert_eq!(net.params(), reference.params());
    }

    #[test]
    fn fully_fixed_step_is_a_no_op() {
        let (mut net, data) = toy();
        let slot = net.intern(crate::model::CodebookEntry::full_precision(0.5));
        for id in 0..net.num_params() {
            net.fix(id, slot).unwrap();
        }
        let before = net.params().to_vec();
        let ctx = RegContext::new(vec![0.5], 1e-3, Vec::new()).unwrap();
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(net.num_params(), cfg.adam);
        let (x, y) = data.gather(&[0, 1, 2]);
        combined_step(&mut net, &x, &y, &ctx, &cfg, &mut opt, None).unwrap();
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn regulariser_must_not_list_fixed_weights() {
        let (mut net, data) = toy();
        let slot = net.intern(crate::model::CodebookEntry::full_precision(0.5));
        net.fix(0, slot).unwrap();
        let ctx = RegContext::new(vec![0.5], 1e-3, vec![0, 1]).unwrap();
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(net.num_params(), cfg.adam);
        let (x, y) = data.gather(&[0]);
        assert!(combined_step(&mut net, &x, &y, &ctx, &cfg, &mut opt, None).is_err());
    }

    #[test]
    fn observer_sees_replayable_detached_update() {
        let (mut net, data) = toy();
        let ctx = RegContext::new(vec![-0.5, -0.25, 0.0, 0.25, 0.5], 1e-3, net.free_ids()).unwrap();
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(net.num_params(), cfg.adam);
        let (x, y) = data.gather(&(0..8).collect::<Vec<_>>());
        let mut checked = false;
        let mut obs = |d: &StepDetail| {
            assert!(d.log.gamma > 0.0);
            let mut replay = d.adam_before.clone();
            let mut p = d.before.to_vec();
            let g: Vec<f64> = (0..p.len())
                .map(|i| d.grad_ce[i] + d.log.gamma * d.grad_reg[i])
                .collect();
            replay.step(&mut p, &g, d.frozen, d.eta);
            assert_eq!(p, d.after);
            checked = true;
        };
        combined_step(&mut net, &x, &y, &ctx, &cfg, &mut opt, Some(&mut obs)).unwrap();
        assert!(checked);
    }

    #[test]
    fn single_iteration_equals_single_shot_quantisation() {
        let (net, data) = toy();
        let proposals = ProposalSet::generate(0.01, 1e-3, 2.0).unwrap();
        let schedule = Schedule::linear(0.01, 1).unwrap();
        let fixer = FixerConfig::default();
        let cfg = TrainConfig {
            epochs_per_iteration: 0,
            ..TrainConfig::default()
        };
        let run = run_wfn(
            net.clone(),
            &data,
            &data,
            &proposals,
            &schedule,
            &fixer,
            &cfg,
        )
        .unwrap();

        let mut direct = net;
        let mut state = FixingState::new(&direct, &fixer);
        fixing_iteration(&mut direct, &mut state, &proposals, &schedule, 1, &fixer).unwrap();
        assert_eq!(run.network, direct);
        assert!(run.state.all_fixed());
        assert!(run.steps.is_empty());
    }

    #[test]
    fn history_is_monotone_and_seeded() {
        let (net, data) = toy();
        let proposals = ProposalSet::generate(0.01, 1e-3, 2.0).unwrap();
        let schedule = Schedule::linear(0.01, 3).unwrap();
        let fixer = FixerConfig::default();
        let cfg = TrainConfig {
            epochs_per_iteration: 1,
            ..TrainConfig::default()
        };
        let a = run_wfn(
            net.clone(),
            &data,
            &data,
            &proposals,
            &schedule,
            &fixer,
            &cfg,
        )
        .unwrap();
        let b = run_wfn(net, &data, &data, &proposals, &schedule, &fixer, &cfg).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.history.len(), 3);
        for pair in a.history.windows(2) {
            assert!(pair[1].delta_t <= pair[0].delta_t);
            assert!(pair[1].fixed_fraction >= pair[0].fixed_fraction);
        }
        assert!(a.state.all_fixed());
    }
}
