//! Side studies: weight-noise tolerance, pruning at initialisation and
//! δ sweeps.
//!
//! Noise is applied to the weights of one layer (not its bias):
//!
//! * relative: `w ← w + β·|w|·ε`
//! * absolute: `w ← w + β·mean_l|w|·ε`
//!
//! with `ε ~ N(0, 1)` drawn per weight. The draws for a given
//! `(seed, layer, β, trial)` are shared by both modes, so the two modes are
//! compared on identical noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clusters::ProposalSet;
use crate::data::Dataset;
use crate::error::{param_err, Error, Result};
use crate::fixer::{FixerConfig, FixingState, Schedule};
use crate::metrics::{build_report, value_histogram};
use crate::model::{LayerKind, Network};
use crate::trainer::{accuracy, run_wfn_from, TrainConfig, WfnRun};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Relative,
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub layer_index: usize,
    pub beta: f64,
    pub mode: NoiseMode,
    pub repeats: usize,
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn trial_rng(cell: &NoiseSpec, trial: usize) -> ChaCha8Rng {
    let mut s = splitmix(cell.seed);
    for part in [cell.layer_index as u64, cell.beta.to_bits(), trial as u64] {
        s = splitmix(s ^ part);
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// A perturbed copy of `net` for trial `trial` of `cell`. The copy has
/// nothing fixed.
pub fn inject_noise(net: &Network, cell: &NoiseSpec, trial: usize) -> Result<Network> {
    let layer = net.layer_info().get(cell.layer_index).ok_or_else(|| {
        Error::Param(format!(
            "layer {} out of range ({} layers)",
            cell.layer_index,
            net.layer_info().len()
        ))
    })?;
    if !(cell.beta >= 0.0 && cell.beta.is_finite()) {
        return param_err(format!(
            "noise scale must be non-negative, got {}",
            cell.beta
        ));
    }
    let ids = layer.weight_ids();
    let mut values = net.params().to_vec();
    if cell.beta > 0.0 && !ids.is_empty() {
        let mean_abs = values[ids.clone()].iter().map(|w| w.abs()).sum::<f64>() / ids.len() as f64;
        let mut rng = trial_rng(cell, trial);
        for w in &mut values[ids] {
            let eps: f64 = rng.sample(StandardNormal);
            let scale = match cell.mode {
                NoiseMode::Relative => w.abs(),
                NoiseMode::Absolute => mean_abs,
            };
            *w += cell.beta * scale * eps;
        }
    }
    net.with_params(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub layer: usize,
    pub beta: f64,
    pub mode: NoiseMode,
    pub repeats: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
}

/// Layers with a weight tensor worth perturbing (everything but norm).
pub fn noise_layers(net: &Network) -> Vec<usize> {
    net.layer_info()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind() != LayerKind::Norm)
        .map(|(i, _)| i)
        .collect()
}

/// Mean accuracy with a 95% interval for every `(layer, β, mode)` cell;
/// rows ordered by layer, β, then mode.
pub fn noise_experiment(
    net: &Network,
    data: &Dataset,
    layers: &[usize],
    betas: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<Vec<NoiseRow>> {
    if repeats == 0 {
        return param_err("repeats must be at least 1");
    }
    let mut cells = Vec::new();
    for &layer in layers {
        for &beta in betas {
            for mode in [NoiseMode::Relative, NoiseMode::Absolute] {
                cells.push(NoiseSpec {
                    layer_index: layer,
                    beta,
                    mode,
                    repeats,
                    seed,
                });
            }
        }
    }
    let trials: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..repeats).map(move |r| (c, r)))
        .collect();
    let accs: Vec<f64> = trials
        .par_iter()
        .map(|&(c, r)| accuracy(&inject_noise(net, &cells[c], r)?, data))
        .collect::<Result<_>>()?;
    let mut rows: Vec<NoiseRow> = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let xs = &accs[c * repeats..(c + 1) * repeats];
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            NoiseRow {
                layer: cell.layer_index,
                beta: cell.beta,
                mode: cell.mode,
                repeats,
                mean_accuracy: mean,
                std_accuracy: std,
                ci95: 1.96 * std / n.sqrt(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.layer
            .cmp(&b.layer)
            .then(a.beta.total_cmp(&b.beta))
            .then(a.mode.cmp(&b.mode))
    });
    Ok(rows)
}

/// Inputs shared by every full weight-fixing run of an experiment.
#[derive(Clone, Debug)]
pub struct RunSetup<'a> {
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    pub schedule: &'a Schedule,
    pub fixer: &'a FixerConfig,
    pub train_cfg: &'a TrainConfig,
}

impl RunSetup<'_> {
    fn fixer(&self) -> FixerConfig {
        FixerConfig {
            exclude_norm: !self.train_cfg.fix_norm_params,
            ..self.fixer.clone()
        }
    }
}

/// Proposal set for `net` at threshold δ, covering its largest weight.
pub fn proposals_for(net: &Network, delta: f64, delta0: f64) -> Result<ProposalSet> {
    let w_max = net.params().iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if w_max < delta0 {
        return Ok(ProposalSet::zero_only(delta, delta0));
    }
    ProposalSet::generate(delta, delta0, w_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub p: f64,
    pub pruned: usize,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
    pub entropy_bits: f64,
    pub unique_nonzero: usize,
}

pub struct PruneOutcome {
    pub row: PruneRow,
    pub pruned_ids: Vec<usize>,
    pub run: WfnRun,
}

/// Prunes a uniformly random fraction `p` of each layer's eligible
/// parameters to zero, then runs weight fixing with `p_t = max(p, p_t)`.
pub fn prune_init_experiment(
    net: &Network,
    setup: &RunSetup,
    p: f64,
    seed: u64,
) -> Result<PruneOutcome> {
    if !(0.0..1.0).contains(&p) {
        return param_err(format!("prune fraction must lie in [0, 1), got {p}"));
    }
    let fixer = setup.fixer();
    let mut work = net.clone();
    let mut state = FixingState::new(&work, &fixer);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pruned = Vec::new();
    for layer in net.layer_info() {
        let mut ids: Vec<usize> = layer
            .ids()
            .filter(|&i| state.eligible[i] && state.assignments[i].is_none())
            .collect();
        let k = (p * ids.len() as f64).round() as usize;
        let (chosen, _) = ids.partial_shuffle(&mut rng, k);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        pruned.extend(chosen);
    }
    state.prune(&mut work, &pruned)?;
    let schedule = setup.schedule.with_floor(p)?;
    let proposals = proposals_for(net, schedule.base_delta(), fixer.delta0)?;
    let run = run_wfn_from(
        work,
        state,
        setup.train,
        setup.eval,
        &proposals,
        &schedule,
        &fixer,
        setup.train_cfg,
        &mut |_| {},
    )?;
    let report = build_report(net, &run.network)?;
    let unique_nonzero = value_histogram(run.network.params())
        .iter()
        .filter(|(v, _)| *v != 0.0)
        .count();
    Ok(PruneOutcome {
        row: PruneRow {
            p,
            pruned: pruned.len(),
            baseline_accuracy: accuracy(net, setup.eval)?,
            final_accuracy: run.history.last().map_or(0.0, |h| h.accuracy_after_fixing),
            entropy_bits: report.entropy_bits,
            unique_nonzero,
        },
        pruned_ids: pruned,
        run,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub accuracy: f64,
    pub compression_ratio: f64,
    pub entropy_bits: f64,
    pub unique_count: usize,
}

/// One full run per δ (the schedule's own δ is replaced); rows sorted by δ.
pub fn delta_sweep(net: &Network, setup: &RunSetup, deltas: &[f64]) -> Result<Vec<SweepRow>> {
    if deltas.is_empty() {
        return param_err("delta sweep needs at least one delta");
    }
    let fixer = setup.fixer();
    let mut rows: Vec<SweepRow> = deltas
        .par_iter()
        .map(|&delta| {
            let schedule = Schedule::new(delta, setup.schedule.fractions().to_vec())?;
            let proposals = proposals_for(net, delta, fixer.delta0)?;
            let state = FixingState::new(net, &fixer);
            let run = run_wfn_from(
                net.clone(),
                state,
                setup.train,
                setup.eval,
                &proposals,
                &schedule,
                &fixer,
                setup.train_cfg,
                &mut |_| {},
            )?;
            let report = build_report(net, &run.network)?;
            Ok(SweepRow {
                delta,
                accuracy: accuracy(&run.network, setup.eval)?,
                compression_ratio: report.compression_ratio,
                entropy_bits: report.entropy_bits,
                unique_count: report.unique_counts["full"],
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.delta.total_cmp(&b.delta));
    Ok(rows)
}

/// Writes rows as CSV with a header named after the row fields.
pub fn write_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_moons;
    use crate::model::{ActShape, Layer};

    fn cell(layer: usize, beta: f64, mode: NoiseMode) -> NoiseSpec {
        NoiseSpec {
            layer_index: layer,
            beta,
            mode,
            repeats: 1,
            seed: 11,
        }
    }

    #[test]
    fn zero_beta_changes_nothing() {
        let net = Network::mlp(&[2, 4, 2], 1).unwrap();
        let out = inject_noise(&net, &cell(0, 0.0, NoiseMode::Absolute), 0).unwrap();
        assert_eq!(out.params(), net.params());
    }

    #[test]
    fn only_the_chosen_layer_moves() {
        let net = Network::mlp(&[2, 4, 4, 2], 1).unwrap();
        let out = inject_noise(&net, &cell(1, 0.5, NoiseMode::Absolute), 3).unwrap();
        let l = &net.layer_info()[1];
        for i in 0..net.num_params() {
            let moved = out.params()[i] != net.params()[i];
            assert_eq!(moved, l.weight_ids().contains(&i), "id {i}");
        }
        assert_eq!(
            out,
            inject_noise(&net, &cell(1, 0.5, NoiseMode::Absolute), 3).unwrap()
        );
        assert_ne!(
            out,
            inject_noise(&net, &cell(1, 0.5, NoiseMode::Absolute), 4).unwrap()
        );
        assert!(inject_noise(&net, &cell(7, 0.5, NoiseMode::Absolute), 0).is_err());
    }

    #[test]
    fn relative_noise_spares_zero_weights() {
        let net = Network::new(
            ActShape::flat(3),
            vec![Layer::dense(1, 3, vec![0.0, 0.5, -0.25], None)],
        )
        .unwrap();
        let out = inject_noise(&net, &cell(0, 1.0, NoiseMode::Relative), 0).unwrap();
        assert_eq!(out.params()[0], 0.0);
        assert_ne!(out.params()[1], 0.5);
    }

    #[test]
    fn perturbation_scale_matches_mode() {
        // E|β·s·ε| = β·s·sqrt(2/π)
        let w: Vec<f64> = (0..4000)
            .map(|i| if i % 2 == 0 { 0.5 } else { 0.1 })
            .collect();
        let net = Network::new(
            ActShape::flat(4000),
            vec![Layer::dense(1, 4000, w.clone(), None)],
        )
        .unwrap();
        let k = (2.0 / std::f64::consts::PI).sqrt();
        let rel = inject_noise(&net, &cell(0, 0.2, NoiseMode::Relative), 0).unwrap();
        let mean_rel: f64 = rel
            .params()
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs() / b.abs())
            .sum::<f64>()
            / 4000.0;
        assert!((mean_rel - 0.2 * k).abs() < 0.01, "{mean_rel}");
        let abs = inject_noise(&net, &cell(0, 0.2, NoiseMode::Absolute), 0).unwrap();
        let mean_abs: f64 = abs
            .params()
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 4000.0;
        assert!((mean_abs - 0.2 * 0.3 * k).abs() < 0.003, "{mean_abs}");
    }

    #[test]
    fn zero_beta_rows_have_no_spread() {
        let net = Network::mlp(&[2, 4, 2], 1).unwrap();
        let data = two_moons(40, 0.1, 1).unwrap();
        let rows = noise_experiment(&net, &data, &[0, 1], &[0.0, 0.5], 3, 1).unwrap();
        assert_eq!(rows.len(), 8);
        let base = accuracy(&net, &data).unwrap();
        for r in rows.iter().filter(|r| r.beta == 0.0) {
            assert_eq!(r.mean_accuracy, base);
            assert_eq!(r.ci95, 0.0);
        }
        assert_eq!(rows[0].mode, NoiseMode::Relative);
        assert!(noise_experiment(&net, &data, &[0], &[0.1], 0, 1).is_err());
    }

    fn small_setup() -> (
        Network,
        Dataset,
        Dataset,
        Schedule,
        FixerConfig,
        TrainConfig,
    ) {
        let train = two_moons(120, 0.1, 1).unwrap();
        let eval = two_moons(60, 0.1, 2).unwrap();
        let mut net = Network::mlp(&[2, 6, 2], 4).unwrap();
        crate::trainer::train_baseline(
            &mut net,
            &train,
            &crate::trainer::BaselineConfig {
                epochs: 20,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs_per_iteration: 1,
            eta: 1e-3,
            ..TrainConfig::default()
        };
        (
            net,
            train,
            eval,
            Schedule::linear(0.01, 3).unwrap(),
            FixerConfig::default(),
            cfg,
        )
    }

    #[test]
    fn huge_noise_gives_chance_accuracy() {
        let (net, _, _, _, _, _) = small_setup();
        let data = two_moons(400, 0.1, 7).unwrap();
        let rows = noise_experiment(&net, &data, &[0, 1], &[100.0], 20, 3).unwrap();
        for r in rows {
            assert!((r.mean_accuracy - 0.5).abs() < 0.1, "{r:?}");
        }
    }

    #[test]
    fn zero_pruning_matches_plain_run() {
        let (net, train, eval, schedule, fixer, cfg) = small_setup();
        let setup = RunSetup {
            train: &train,
            eval: &eval,
            schedule: &schedule,
            fixer: &fixer,
            train_cfg: &cfg,
        };
        let pruned = prune_init_experiment(&net, &setup, 0.0, 1).unwrap();
        let proposals = proposals_for(&net, 0.01, fixer.delta0).unwrap();
        let plain = crate::trainer::run_wfn(
            net.clone(),
            &train,
            &eval,
            &proposals,
            &schedule,
            &fixer,
            &cfg,
        )
        .unwrap();
        assert!(pruned.pruned_ids.is_empty());
        assert_eq!(pruned.run.network.to_bytes(), plain.network.to_bytes());
    }

    #[test]
    fn pruned_weights_stay_zero() {
        let (net, train, eval, schedule, fixer, cfg) = small_setup();
        let setup = RunSetup {
            train: &train,
            eval: &eval,
            schedule: &schedule,
            fixer: &fixer,
            train_cfg: &cfg,
        };
        let out = prune_init_experiment(&net, &setup, 0.5, 2).unwrap();
        // round(0.5·12) + round(0.5·6) + round(0.5·12) + round(0.5·2)
        assert_eq!(out.pruned_ids.len(), 6 + 3 + 6 + 1);
        for &i in &out.pruned_ids {
            assert_eq!(out.run.network.params()[i].to_bits(), 0f64.to_bits());
            assert_eq!(out.run.state.assignments[i].as_ref().unwrap().iteration, 0);
        }
        assert!(out.run.state.all_fixed());
        assert_eq!(out.row.pruned, out.pruned_ids.len());
        assert!(prune_init_experiment(&net, &setup, 1.0, 2).is_err());
    }

    #[test]
    fn single_delta_sweep_is_one_run() {
        let (net, train, eval, schedule, fixer, cfg) = small_setup();
        let setup = RunSetup {
            train: &train,
            eval: &eval,
            schedule: &schedule,
            fixer: &fixer,
            train_cfg: &cfg,
        };
        let rows = delta_sweep(&net, &setup, &[0.02]).unwrap();
        let sched = Schedule::linear(0.02, 3).unwrap();
        let proposals = proposals_for(&net, 0.02, fixer.delta0).unwrap();
        let run =
            crate::trainer::run_wfn(net.clone(), &train, &eval, &proposals, &sched, &fixer, &cfg)
                .unwrap();
        let report = build_report(&net, &run.network).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].accuracy, accuracy(&run.network, &eval).unwrap());
        assert_eq!(rows[0].compression_ratio, report.compression_ratio);
        assert_eq!(rows[0].unique_count, report.unique_counts["full"]);
        assert!(rows[0].entropy_bits <= (rows[0].unique_count as f64).log2());
        assert!(delta_sweep(&net, &setup, &[]).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = vec![SweepRow {
            delta: 0.01,
            accuracy: 0.9,
            compression_ratio: 5.0,
            entropy_bits: 2.0,
            unique_count: 7,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "delta,accuracy,compression_ratio,entropy_bits,unique_count\n0.01,0.9,5.0,2.0,7\n"
        );
    }
}
