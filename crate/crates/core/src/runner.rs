//! Experiment units: bootstrap replicates of every selector on one dataset,
//! scored against exact returns, plus the candidate-subset and data-coverage
//! sweeps built on top of them.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{bootstrap_indices, mix_datasets, Dataset};
use crate::error::{Error, Result};
use crate::lstdq::{tournament_sigma_min, Variant};
use crate::mdp::{exact_return, occupancy_and_coverage, Policy, TabularMdp};
use crate::qcache::{QCache, RolloutSpec};
use crate::selectors::{Context, PrepareInput, Prepared, Selector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentUnit {
    pub unit_id: String,
    pub groundtruth_id: String,
    pub candidate_ids: Vec<String>,
    pub behavior_id: String,
    pub n: usize,
    pub target_policy_ids: Vec<String>,
    pub selectors: Vec<Selector>,
    pub rollout_spec: RolloutSpec,
    pub bootstrap_reps: usize,
    pub master_seed: u64,
}

impl ExperimentUnit {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_ids.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: no candidates", self.unit_id)));
        }
        if self.bootstrap_reps == 0 {
            return Err(Error::InvalidArgument(format!("{}: need at least one bootstrap replicate", self.unit_id)));
        }
        if self.target_policy_ids.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: no target policies", self.unit_id)));
        }
        if self.selectors.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: no selectors", self.unit_id)));
        }
        Ok(())
    }

    pub fn realizable(&self) -> bool {
        self.candidate_ids.contains(&self.groundtruth_id)
    }

    fn with_candidates(&self, suffix: String, candidate_ids: Vec<String>) -> ExperimentUnit {
        ExperimentUnit { unit_id: format!("{}_{suffix}", self.unit_id), candidate_ids, ..self.clone() }
    }
}

/// In-memory inputs a unit refers to by id.
#[derive(Clone, Copy)]
pub struct UnitInputs<'a> {
    /// Pool of models containing the groundtruth and every candidate.
    pub models: &'a [TabularMdp],
    /// Pool of target policies.
    pub targets: &'a [Policy],
    pub data: &'a Dataset,
    /// One cache per target policy, each covering every candidate.
    pub caches: &'a [QCache],
    /// Distribution over `(s, a)` the data was drawn from, for coverage diagnostics.
    pub data_dist: &'a [f64],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub unit_id: String,
    pub selector: String,
    pub variant: String,
    pub target: String,
    pub rep: usize,
    pub chosen: usize,
    pub predicted_return: f64,
    pub true_return: f64,
    pub ope_error: f64,
    pub sigma_min: f64,
    pub c_one: f64,
    pub c_inf: f64,
    pub realizable_flag: bool,
    #[serde(skip)]
    pub losses: Vec<f64>,
    #[serde(skip)]
    pub raw_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub unit_id: String,
    pub selector: String,
    pub mean_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: String,
    pub true_return: f64,
    /// Exact return of every candidate, in candidate order.
    pub candidate_returns: Vec<f64>,
    pub c_one: f64,
    pub c_inf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitReport {
    pub unit_id: String,
    pub candidate_ids: Vec<String>,
    pub realizable: bool,
    pub targets: Vec<TargetSummary>,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
}

impl UnitReport {
    /// Expected error of picking a uniformly random candidate, averaged over targets.
    pub fn random_choice_error(&self) -> f64 {
        let per_target = self.targets.iter().map(|t| {
            let m = t.candidate_returns.len() as f64;
            t.candidate_returns.iter().map(|j| (j - t.true_return).abs()).sum::<f64>() / m
        });
        per_target.sum::<f64>() / self.targets.len() as f64
    }

    /// Per target, the smallest error any candidate can achieve.
    pub fn error_lower_bounds(&self) -> Vec<f64> {
        self.targets
            .iter()
            .map(|t| t.candidate_returns.iter().map(|j| (j - t.true_return).abs()).fold(f64::INFINITY, f64::min))
            .collect()
    }

    pub fn aggregate(&self, selector_label: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.selector == selector_label)
    }

    pub fn rows_for<'a>(&'a self, selector_label: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| row_label(r) == selector_label)
    }
}

/// `selector` or `selector:variant`, matching [`Selector`]'s display form for tournaments.
pub fn row_label(row: &ReportRow) -> String {
    if row.variant.is_empty() {
        row.selector.clone()
    } else {
        format!("{}:{}", row.selector, row.variant)
    }
}

fn selector_label(sel: &Selector) -> String {
    match sel.variant() {
        Some(v) => format!("{}:{}", sel.id(), v.name()),
        None => sel.id().to_string(),
    }
}

fn find_model<'a>(models: &'a [TabularMdp], id: &str) -> Result<&'a TabularMdp> {
    models.iter().find(|m| m.id == id).ok_or_else(|| Error::InvalidArgument(format!("unknown model {id}")))
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean and 95% percentile-bootstrap interval of per-replicate mean errors;
/// the interval is widened to contain the mean if needed.
pub fn bootstrap_interval(replicate_means: &[f64]) -> (f64, f64, f64) {
    let mean = replicate_means.iter().sum::<f64>() / replicate_means.len() as f64;
    let mut sorted = replicate_means.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, 0.025).min(mean);
    let hi = percentile(&sorted, 0.975).max(mean);
    (mean, lo, hi)
}

pub fn run_unit(unit: &ExperimentUnit, inputs: &UnitInputs<'_>) -> Result<UnitReport> {
    unit.validate()?;
    if inputs.data.n() != unit.n {
        return Err(Error::InvalidArgument(format!(
            "{}: unit expects {} tuples, dataset has {}",
            unit.unit_id,
            unit.n,
            inputs.data.n()
        )));
    }
    let data_hash = inputs.data.hash();
    let groundtruth = find_model(inputs.models, &unit.groundtruth_id)?;
    let candidates: Vec<TabularMdp> =
        unit.candidate_ids.iter().map(|id| find_model(inputs.models, id).cloned()).collect::<Result<_>>()?;
    let v_max = candidates.iter().chain([groundtruth]).map(|m| m.v_max()).fold(0.0, f64::max);
    let star = unit.candidate_ids.iter().position(|id| *id == unit.groundtruth_id);
    let realizable = star.is_some();

    struct PerTarget {
        policy: Policy,
        cache: QCache,
        summary: TargetSummary,
        prepared: Vec<Prepared>,
    }
    let mut per_target = Vec::with_capacity(unit.target_policy_ids.len());
    for pid in &unit.target_policy_ids {
        let policy = inputs
            .targets
            .iter()
            .find(|p| p.id == *pid)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown target policy {pid}")))?;
        let full = inputs
            .caches
            .iter()
            .find(|c| c.manifest.policy_id == *pid)
            .ok_or_else(|| Error::InvalidArgument(format!("no cache for target policy {pid}")))?;
        if full.manifest.dataset_hash != data_hash {
            return Err(Error::HashMismatch { expected: data_hash.clone(), found: full.manifest.dataset_hash.clone() });
        }
        let order: Vec<usize> = unit
            .candidate_ids
            .iter()
            .map(|id| full.index_of(id).ok_or_else(|| Error::InvalidArgument(format!("cache for {pid} lacks {id}"))))
            .collect::<Result<_>>()?;
        let cache = full.subset(&order)?;
        let candidate_returns = candidates.iter().map(|m| exact_return(m, policy)).collect::<Result<Vec<_>>>()?;
        let cov = occupancy_and_coverage(groundtruth, policy, inputs.data_dist)?;
        let summary = TargetSummary {
            target: pid.clone(),
            true_return: exact_return(groundtruth, policy)?,
            candidate_returns,
            c_one: cov.c_one,
            c_inf: cov.c_inf,
        };
        let prep_input =
            PrepareInput { cache: &cache, data: inputs.data, v_max, models: Some(&candidates), seed: unit.master_seed };
        let prepared = unit.selectors.iter().map(|s| s.prepare(&prep_input)).collect::<Result<Vec<_>>>()?;
        per_target.push(PerTarget { policy: policy.clone(), cache, summary, prepared });
    }

    let replicates = bootstrap_indices(unit.n, unit.bootstrap_reps, unit.master_seed)?;
    let mut variants = vec![Variant::NormalizedDiff];
    for v in unit.selectors.iter().filter_map(|s| s.variant()) {
        if !variants.contains(&v) {
            variants.push(v);
        }
    }

    let cells: Vec<(usize, usize)> =
        (0..per_target.len()).flat_map(|p| (0..replicates.len()).map(move |r| (p, r))).collect();
    let blocks: Vec<Vec<ReportRow>> = cells
        .par_iter()
        .map(|&(p, rep)| -> Result<Vec<ReportRow>> {
            let target = &per_target[p];
            let weights = replicates[rep].weights();
            let sigma_for = |v: Variant| -> f64 {
                match (star, target.cache.halves.is_some(), target.cache.m() > 1) {
                    (Some(s), true, true) => {
                        tournament_sigma_min(&target.cache, inputs.data, v, &weights, s, v_max).unwrap_or(f64::NAN)
                    }
                    _ => f64::NAN,
                }
            };
            let sigmas: Vec<(Variant, f64)> = variants.iter().map(|&v| (v, sigma_for(v))).collect();
            let key = [p as u64, rep as u64];
            let ctx = Context {
                cache: &target.cache,
                data: inputs.data,
                weights: &weights,
                v_max,
                models: Some(&candidates),
                seed: unit.master_seed,
                stream_key: &key,
            };
            let s = &target.summary;
            unit.selectors
                .iter()
                .zip(&target.prepared)
                .map(|(sel, prep)| {
                    let res = sel.select(&ctx, prep, &s.candidate_returns, Some(s.true_return))?;
                    let v = sel.variant().unwrap_or(Variant::NormalizedDiff);
                    let sigma_min = sigmas.iter().find(|x| x.0 == v).map_or(f64::NAN, |x| x.1);
                    Ok(ReportRow {
                        unit_id: unit.unit_id.clone(),
                        selector: sel.id().to_string(),
                        variant: sel.variant().map(|v| v.name().to_string()).unwrap_or_default(),
                        target: target.policy.id.clone(),
                        rep,
                        chosen: res.chosen,
                        predicted_return: res.predicted_return,
                        true_return: s.true_return,
                        ope_error: (res.predicted_return - s.true_return).abs(),
                        sigma_min,
                        c_one: s.c_one,
                        c_inf: s.c_inf,
                        realizable_flag: realizable,
                        losses: res.losses,
                        raw_losses: res.raw_losses,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<ReportRow> = blocks.into_iter().flatten().collect();

    let b = unit.bootstrap_reps;
    let num_targets = per_target.len() as f64;
    let aggregates = unit
        .selectors
        .iter()
        .map(|sel| {
            let label = selector_label(sel);
            let mut rep_means = vec![0.0; b];
            for row in rows.iter().filter(|r| row_label(r) == label) {
                rep_means[row.rep] += row.ope_error / num_targets;
            }
            let (mean_error, ci_low, ci_high) = bootstrap_interval(&rep_means);
            Aggregate { unit_id: unit.unit_id.clone(), selector: label, mean_error, ci_low, ci_high }
        })
        .collect();

    Ok(UnitReport {
        unit_id: unit.unit_id.clone(),
        candidate_ids: unit.candidate_ids.clone(),
        realizable,
        targets: per_target.into_iter().map(|t| t.summary).collect(),
        rows,
        aggregates,
    })
}

/// Candidate triples `{c - r, c, c + r}` of the unit's candidate list.
pub fn gap_sweep(unit: &ExperimentUnit, inputs: &UnitInputs<'_>, center: usize, radii: &[usize]) -> Result<Vec<UnitReport>> {
    let grid = &unit.candidate_ids;
    radii
        .iter()
        .map(|&r| {
            if r == 0 || r > center || center + r >= grid.len() {
                return Err(Error::InvalidArgument(format!(
                    "radius {r} around {center} leaves the grid of {}",
                    grid.len()
                )));
            }
            let ids = vec![grid[center - r].clone(), grid[center].clone(), grid[center + r].clone()];
            run_unit(&unit.with_candidates(format!("gap{r}"), ids), inputs)
        })
        .collect()
}

/// Sliding windows `[o, o + window)` of the unit's candidate list.
pub fn misspec_sweep(
    unit: &ExperimentUnit,
    inputs: &UnitInputs<'_>,
    window: usize,
    offsets: &[usize],
) -> Result<Vec<UnitReport>> {
    let grid = &unit.candidate_ids;
    if window == 0 {
        return Err(Error::InvalidArgument("window must hold at least one candidate".into()));
    }
    offsets
        .iter()
        .map(|&o| {
            if o + window > grid.len() {
                return Err(Error::InvalidArgument(format!(
                    "window {o}..{} leaves the grid of {}",
                    o + window,
                    grid.len()
                )));
            }
            run_unit(&unit.with_candidates(format!("misspec{o}"), grid[o..o + window].to_vec()), inputs)
        })
        .collect()
}

/// One side of a coverage sweep: a dataset, its caches and its distribution.
#[derive(Clone, Copy)]
pub struct CoverageSource<'a> {
    pub data: &'a Dataset,
    pub caches: &'a [QCache],
    pub data_dist: &'a [f64],
}

/// Runs the unit on `round(λ n)` tuples from `on` mixed with the rest from
/// `off`, for each `λ`. Mixture caches are gathered from the source caches.
pub fn coverage_sweep(
    unit: &ExperimentUnit,
    models: &[TabularMdp],
    targets: &[Policy],
    on: CoverageSource<'_>,
    off: CoverageSource<'_>,
    lambdas: &[f64],
) -> Result<Vec<UnitReport>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let mix = mix_datasets(on.data, off.data, lambda, unit.n, unit.master_seed)?;
            let caches = unit
                .target_policy_ids
                .iter()
                .map(|pid| {
                    let find = |caches: &[QCache]| {
                        caches
                            .iter()
                            .find(|c| c.manifest.policy_id == *pid)
                            .cloned()
                            .ok_or_else(|| Error::InvalidArgument(format!("no cache for target policy {pid}")))
                    };
                    QCache::gather(&mix, &find(on.caches)?, &find(off.caches)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let dist = mix.distribution(on.data_dist, off.data_dist);
            let inputs = UnitInputs { models, targets, data: &mix.dataset, caches: &caches, data_dist: &dist };
            let sub = ExperimentUnit { unit_id: format!("{}_lambda{lambda}", unit.unit_id), ..unit.clone() };
            run_unit(&sub, &inputs)
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in records {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// `report.csv`: one row per (selector, target, replicate).
pub fn write_report_csv(path: &Path, reports: &[UnitReport]) -> Result<()> {
    write_csv(path, reports.iter().flat_map(|r| r.rows.iter()))
}

/// `aggregate.csv`: mean error and interval per (unit, selector).
pub fn write_aggregate_csv(path: &Path, reports: &[UnitReport]) -> Result<()> {
    write_csv(path, reports.iter().flat_map(|r| r.aggregates.iter()))
}

/// `losses.csv`: every candidate's loss in every report row.
pub fn write_losses_csv(path: &Path, reports: &[UnitReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "unit_id,selector,variant,target,rep,candidate,loss,raw_loss")?;
    for report in reports {
        for row in &report.rows {
            for (k, (l, raw)) in row.losses.iter().zip(&row.raw_losses).enumerate() {
                writeln!(
                    f,
                    "{},{},{},{},{},{},{l},{raw}",
                    row.unit_id, row.selector, row.variant, row.target, row.rep, report.candidate_ids[k]
                )?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// `targets.csv`: exact returns and coverage per (unit, target).
pub fn write_targets_csv(path: &Path, reports: &[UnitReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "unit_id,target,candidate,candidate_return,true_return,c_one,c_inf")?;
    for report in reports {
        for t in &report.targets {
            for (id, j) in report.candidate_ids.iter().zip(&t.candidate_returns) {
                writeln!(f, "{},{},{id},{j},{},{},{}", report.unit_id, t.target, t.true_return, t.c_one, t.c_inf)?;
            }
        }
    }
    f.flush()?;
    Ok(())
}
