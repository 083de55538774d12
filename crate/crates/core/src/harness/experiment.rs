//! Experiment orchestration: attack every window at every budget and collect
//! paired statistics against the random baseline.
//!
//! Attacked actions are always costed against the real window, never the
//! perturbed one.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{dominant_eigenpair, random_sphere_attack, AttackFlag};
use crate::data::{load_series_windows, normalize_windows, sample_random_arima, SeriesWindow};
use crate::error::{Error, Result};
use crate::grad::{iterated_attack, single_step_attack};
use crate::harness::config::{ActionBoxConfig, DatasetConfig, ExperimentConfig, Scenario};
use crate::harness::stats::{wilcoxon_signed_rank, Sidedness};
use crate::lqr::{rollout_cost, BatchForm, SystemSpec, Timeseries};
use crate::qp::{compile_constraints, solve_qp, BoxBounds, ConstraintSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Cost,
    Constraint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Cost,
    MaxAction,
    L1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Cost, Metric::MaxAction, Metric::L1];

    fn pair(self, r: &SeriesRecord) -> (f64, f64) {
        match self {
            Metric::Cost => (r.j_orig, r.j_adv),
            Metric::MaxAction => (r.max_u_orig, r.max_u_adv),
            Metric::L1 => (r.l1_orig, r.l1_adv),
        }
    }
}

/// One attacked window at one budget under one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRecord {
    pub series_id: String,
    pub delta: f64,
    pub scenario: Scenario,
    pub j_orig: f64,
    pub j_adv: f64,
    pub max_u_orig: f64,
    pub max_u_adv: f64,
    pub l1_orig: f64,
    pub l1_adv: f64,
    pub norm_used: f64,
    pub flags: String,
}

impl SeriesRecord {
    pub fn is_infeasible(&self) -> bool {
        self.flags.split('|').any(|f| f == AttackFlag::Infeasible.as_str())
    }
}

/// Original and attacked series with the controller's actions on each.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTrace {
    pub series_id: String,
    pub delta: f64,
    pub scenario: Scenario,
    pub original: Vec<f64>,
    pub attacked: Vec<f64>,
    pub u_orig: Vec<f64>,
    pub u_adv: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub scenario: Scenario,
    pub delta: f64,
    pub metric: Metric,
    /// Mean over windows of `100 · (adv - orig) / orig`.
    pub mean_pct_increase: Option<f64>,
    pub count: usize,
    /// Windows left out because `orig ≤ 0` or the attacked problem was infeasible.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PValue {
    pub scenario: Scenario,
    pub delta: f64,
    pub metric: Metric,
    pub p_value: Option<f64>,
    pub n: usize,
    pub exact: bool,
    pub degenerate: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioStats {
    pub kind: ExperimentKind,
    #[serde(skip)]
    pub records: Vec<SeriesRecord>,
    #[serde(skip)]
    pub traces: Vec<SeriesTrace>,
    pub aggregates: Vec<Aggregate>,
    pub p_values: Vec<PValue>,
    /// Infeasible attacked problems per scenario.
    pub infeasible: BTreeMap<String, usize>,
    /// Windows whose unattacked problem was already infeasible.
    pub skipped_windows: Vec<String>,
    /// Action bounds used by the constrained controller (stacked lower, upper).
    pub action_box: Option<(Vec<f64>, Vec<f64>)>,
}

impl ScenarioStats {
    pub fn empty(kind: ExperimentKind) -> Self {
        ScenarioStats {
            kind,
            records: Vec::new(),
            traces: Vec::new(),
            aggregates: Vec::new(),
            p_values: Vec::new(),
            infeasible: BTreeMap::new(),
            skipped_windows: Vec::new(),
            action_box: None,
        }
    }

    pub fn aggregate(&self, scenario: Scenario, delta: f64, metric: Metric) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.scenario == scenario && a.delta == delta && a.metric == metric)
    }

    pub fn p_value(&self, scenario: Scenario, delta: f64, metric: Metric) -> Option<&PValue> {
        self.p_values
            .iter()
            .find(|p| p.scenario == scenario && p.delta == delta && p.metric == metric)
    }

    /// Records for one scenario and budget, in window order.
    pub fn records_for(&self, scenario: Scenario, delta: f64) -> Vec<&SeriesRecord> {
        self.records
            .iter()
            .filter(|r| r.scenario == scenario && r.delta == delta)
            .collect()
    }
}

/// Mixes the experiment seed with task coordinates (SplitMix64 finalizer).
pub fn derive_seed(base: u64, window: usize, delta_index: usize, scenario: Scenario) -> u64 {
    let mut z = base
        ^ (window as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (delta_index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (scenario as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loads and normalizes the configured dataset.
pub fn load_dataset(cfg: &ExperimentConfig, spec: &SystemSpec) -> Result<Vec<SeriesWindow>> {
    let len = spec.series_dim() * spec.horizon();
    let windows = match &cfg.dataset {
        DatasetConfig::Arima { count } => sample_random_arima(cfg.seed, len, *count)?,
        DatasetConfig::Csv {
            path,
            column,
            stride,
            max_windows,
        } => {
            let mut ws = load_series_windows(path, column, len, stride.unwrap_or(len))?;
            if let Some(max) = max_windows {
                ws.truncate(*max);
            }
            ws
        }
    };
    normalize_windows(&windows, cfg.normalization)
}

fn series_ids(windows: &[SeriesWindow]) -> Vec<String> {
    let mut ids: Vec<String> = windows.iter().map(|w| w.source_id.clone()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        ids = windows
            .iter()
            .map(|w| format!("{}@{}", w.source_id, w.start_index))
            .collect();
    }
    ids
}

fn action_summary(u: &DVector<f64>) -> (f64, f64) {
    (u.max(), u.lp_norm(1))
}

fn percent_increase(orig: f64, adv: f64) -> Option<f64> {
    (orig > 0.0 && adv.is_finite()).then(|| 100.0 * (adv - orig) / orig)
}

fn summarize(stats: &mut ScenarioStats, scenarios: &[Scenario], deltas: &[f64]) {
    let mut aggregates = Vec::new();
    let mut p_values = Vec::new();
    for &scenario in scenarios {
        for &delta in deltas {
            let recs = stats.records_for(scenario, delta);
            for metric in Metric::ALL {
                let pct: Vec<f64> = recs
                    .iter()
                    .filter_map(|r| {
                        let (o, a) = metric.pair(r);
                        percent_increase(o, a)
                    })
                    .collect();
                let mean = (!pct.is_empty()).then(|| pct.iter().sum::<f64>() / pct.len() as f64);
                aggregates.push(Aggregate {
                    scenario,
                    delta,
                    metric,
                    mean_pct_increase: mean,
                    count: pct.len(),
                    excluded: recs.len() - pct.len(),
                });
            }
        }
    }
    let baseline_present = scenarios.contains(&Scenario::Random);
    for &scenario in scenarios
        .iter()
        .filter(|s| baseline_present && **s != Scenario::Random)
    {
        for &delta in deltas {
            let adv = stats.records_for(scenario, delta);
            let random = stats.records_for(Scenario::Random, delta);
            for metric in Metric::ALL {
                let (a, b): (Vec<f64>, Vec<f64>) = adv
                    .iter()
                    .zip(&random)
                    .map(|(x, y)| (metric.pair(x).1, metric.pair(y).1))
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .unzip();
                let entry = match wilcoxon_signed_rank(&a, &b, Sidedness::TwoSided) {
                    Ok(w) => PValue {
                        scenario,
                        delta,
                        metric,
                        p_value: Some(w.p_value),
                        n: w.n,
                        exact: w.exact,
                        degenerate: w.degenerate,
                        note: None,
                    },
                    Err(e) => PValue {
                        scenario,
                        delta,
                        metric,
                        p_value: None,
                        n: a.len(),
                        exact: false,
                        degenerate: false,
                        note: Some(e.to_string()),
                    },
                };
                p_values.push(entry);
            }
        }
    }
    stats.aggregates = aggregates;
    stats.p_values = p_values;
}

fn record(
    id: &str,
    delta: f64,
    scenario: Scenario,
    spec: &SystemSpec,
    s: &Timeseries,
    u_orig: &DVector<f64>,
    outcome: (&Timeseries, Option<&DVector<f64>>, String),
) -> Result<(SeriesRecord, SeriesTrace)> {
    let (s_hat, u_adv, flags) = outcome;
    let j_orig = rollout_cost(spec, u_orig, s)?;
    let (max_u_orig, l1_orig) = action_summary(u_orig);
    let (j_adv, max_u_adv, l1_adv) = match u_adv {
        Some(u) => {
            let (mx, l1) = action_summary(u);
            (rollout_cost(spec, u, s)?, mx, l1)
        }
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    let rec = SeriesRecord {
        series_id: id.to_string(),
        delta,
        scenario,
        j_orig,
        j_adv,
        max_u_orig,
        max_u_adv,
        l1_orig,
        l1_adv,
        norm_used: s_hat.difference(s)?.norm(),
        flags,
    };
    let trace = SeriesTrace {
        series_id: id.to_string(),
        delta,
        scenario,
        original: s.as_slice().to_vec(),
        attacked: s_hat.as_slice().to_vec(),
        u_orig: u_orig.as_slice().to_vec(),
        u_adv: u_adv.map(|u| u.as_slice().to_vec()).unwrap_or_default(),
    };
    Ok((rec, trace))
}

fn collect(
    kind: ExperimentKind,
    per_window: Vec<Vec<(SeriesRecord, SeriesTrace)>>,
    scenarios: &[Scenario],
    deltas: &[f64],
) -> ScenarioStats {
    let mut stats = ScenarioStats::empty(kind);
    for (rec, trace) in per_window.into_iter().flatten() {
        if rec.is_infeasible() {
            *stats.infeasible.entry(rec.scenario.name().to_string()).or_default() += 1;
        }
        stats.records.push(rec);
        stats.traces.push(trace);
    }
    summarize(&mut stats, scenarios, deltas);
    stats
}

/// Cost experiment against the unconstrained controller: closed-form
/// worst-case attack and/or random baseline on every window and budget.
pub fn run_cost_experiment(cfg: &ExperimentConfig) -> Result<ScenarioStats> {
    cfg.validate()?;
    let spec = cfg.system_spec()?;
    let windows = load_dataset(cfg, &spec)?;
    run_cost_experiment_on(cfg, &spec, &windows)
}

pub fn run_cost_experiment_on(
    cfg: &ExperimentConfig,
    spec: &SystemSpec,
    windows: &[SeriesWindow],
) -> Result<ScenarioStats> {
    let scenarios: Vec<Scenario> = cfg
        .scenarios
        .iter()
        .copied()
        .filter(|s| matches!(s, Scenario::CostAdv | Scenario::Random))
        .collect();
    if scenarios.is_empty() {
        return Err(Error::Config(
            "cost experiment needs the cost-adv and/or random scenario".into(),
        ));
    }
    let batch = BatchForm::new(spec)?;
    let eigen = dominant_eigenpair(batch.psi())?;
    let ids = series_ids(windows);

    let per_window = windows
        .par_iter()
        .enumerate()
        .map(|(w, window)| -> Result<Vec<(SeriesRecord, SeriesTrace)>> {
            let s = &window.values;
            let u_orig = batch.solve_unconstrained(s)?;
            let mut out = Vec::new();
            for (d, &delta) in cfg.deltas.iter().enumerate() {
                for &scenario in &scenarios {
                    let s_hat = match scenario {
                        Scenario::CostAdv => Timeseries::new(s.values() + &eigen.v1 * delta)?,
                        _ => random_sphere_attack(s, delta, derive_seed(cfg.seed, w, d, scenario))?
                            .s_hat,
                    };
                    let u_adv = batch.solve_unconstrained(&s_hat)?;
                    out.push(record(
                        &ids[w],
                        delta,
                        scenario,
                        spec,
                        s,
                        &u_orig,
                        (&s_hat, Some(&u_adv), String::new()),
                    )?);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect(ExperimentKind::Cost, per_window, &scenarios, &cfg.deltas))
}

/// Half-width of the automatic action box: `1.5 ×` the 95th percentile
/// (nearest rank) of `|u*|` over every unattacked window.
pub fn calibrate_action_bound(batch: &BatchForm, windows: &[SeriesWindow]) -> Result<f64> {
    let mut mags = Vec::new();
    for w in windows {
        mags.extend(batch.solve_unconstrained(&w.values)?.iter().map(|v| v.abs()));
    }
    if mags.is_empty() {
        return Err(Error::Data("cannot calibrate action bounds on an empty dataset".into()));
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((0.95 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    Ok(1.5 * mags[rank - 1])
}

/// Builds the constrained controller's constraints from the config.
pub fn build_constraints(
    cfg: &ExperimentConfig,
    spec: &SystemSpec,
    batch: &BatchForm,
    windows: &[SeriesWindow],
) -> Result<ConstraintSet> {
    let action = match &cfg.action_box {
        None => None,
        Some(ActionBoxConfig::Bounds(b)) => Some(b.to_bounds()),
        Some(ActionBoxConfig::Keyword(_)) => {
            let bound = calibrate_action_bound(batch, windows)?;
            Some(BoxBounds::uniform(spec.action_dim(), -bound, bound))
        }
    };
    let state = cfg.state_box.as_ref().map(|b| b.to_bounds());
    compile_constraints(spec, batch, action.as_ref(), state.as_ref())
}

fn stacked_action_box(cons: &ConstraintSet, mt: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    use crate::qp::RowKind;
    let mut lower = vec![f64::NEG_INFINITY; mt];
    let mut upper = vec![f64::INFINITY; mt];
    let mut any = false;
    for (row, kind) in cons.kinds().iter().enumerate() {
        match *kind {
            RowKind::ActionUpper { index } => {
                upper[index] = cons.h0()[row];
                any = true;
            }
            RowKind::ActionLower { index } => {
                lower[index] = -cons.h0()[row];
                any = true;
            }
            _ => {}
        }
    }
    any.then_some((lower, upper))
}

/// Constraint experiment against the QP controller: gradient attacks on the
/// configured targets, the random baseline and (when listed) the closed-form
/// cost direction.
pub fn run_constraint_experiment(cfg: &ExperimentConfig) -> Result<ScenarioStats> {
    cfg.validate()?;
    let spec = cfg.system_spec()?;
    let windows = load_dataset(cfg, &spec)?;
    run_constraint_experiment_on(cfg, &spec, &windows)
}

pub fn run_constraint_experiment_on(
    cfg: &ExperimentConfig,
    spec: &SystemSpec,
    windows: &[SeriesWindow],
) -> Result<ScenarioStats> {
    let batch = BatchForm::new(spec)?;
    let cons = build_constraints(cfg, spec, &batch, windows)?;
    let eigen = dominant_eigenpair(batch.psi())?;
    let ids = series_ids(windows);
    let scenarios = cfg.scenarios.clone();
    let iteration = cfg.iteration_settings();

    let per_window = windows
        .par_iter()
        .enumerate()
        .map(|(w, window)| -> Result<Option<Vec<(SeriesRecord, SeriesTrace)>>> {
            let s = &window.values;
            let original = solve_qp(&batch, &cons, s)?;
            if !original.is_optimal() {
                return Ok(None);
            }
            let mut out = Vec::new();
            for (d, &delta) in cfg.deltas.iter().enumerate() {
                for &scenario in &scenarios {
                    let (s_hat, mut flags) = match scenario.target() {
                        Some(target) => {
                            let res = match iteration {
                                Some(settings) => {
                                    iterated_attack(&batch, &cons, s, delta, target, settings)?
                                }
                                None => single_step_attack(&batch, &cons, s, delta, target)?,
                            };
                            let flags = res.flags_label();
                            (res.s_hat, flags)
                        }
                        None => {
                            let s_hat = match scenario {
                                Scenario::CostAdv => {
                                    Timeseries::new(s.values() + &eigen.v1 * delta)?
                                }
                                _ => {
                                    random_sphere_attack(
                                        s,
                                        delta,
                                        derive_seed(cfg.seed, w, d, scenario),
                                    )?
                                    .s_hat
                                }
                            };
                            (s_hat, String::new())
                        }
                    };
                    let attacked = solve_qp(&batch, &cons, &s_hat)?;
                    let u_adv = attacked.is_optimal().then_some(&attacked.u);
                    if u_adv.is_none() && !flags.contains(AttackFlag::Infeasible.as_str()) {
                        flags = if flags.is_empty() {
                            AttackFlag::Infeasible.as_str().to_string()
                        } else {
                            format!("{flags}|{}", AttackFlag::Infeasible.as_str())
                        };
                    }
                    out.push(record(
                        &ids[w],
                        delta,
                        scenario,
                        spec,
                        s,
                        &original.u,
                        (&s_hat, u_adv, flags),
                    )?);
                }
            }
            Ok(Some(out))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut skipped = Vec::new();
    let mut kept = Vec::new();
    for (w, item) in per_window.into_iter().enumerate() {
        match item {
            Some(v) => kept.push(v),
            None => skipped.push(ids[w].clone()),
        }
    }
    let mut stats = collect(ExperimentKind::Constraint, kept, &scenarios, &cfg.deltas);
    stats.skipped_windows = skipped;
    stats.action_box = stacked_action_box(&cons, batch.actions_len());
    Ok(stats)
}
