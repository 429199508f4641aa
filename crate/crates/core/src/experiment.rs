//! Parameter sweeps, flow-rate calibration and field-map export built on
//! top of [`run_ensemble`].

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};
use crate::ensemble::{run_ensemble, EnsembleError, EnsembleStats, RunOptions, SpeciesStats};
use crate::magnetics::{wire_force_polar, CellMagnetics, MagneticsError, WirePolar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Magnetics(#[from] MagneticsError),
    #[error("sweep needs at least one value")]
    EmptySweep,
    #[error("species {0:?} is not part of the scenario populations")]
    UnknownSpecies(String),
    #[error("invalid calibration input: {0}")]
    InvalidCalibration(String),
    #[error(
        "bracket does not straddle the target {target}: capture at low end {lo:.4} (CI high {lo_ci:.4}), at high end {hi:.4} (CI low {hi_ci:.4})"
    )]
    CalibrationInfeasible {
        target: f64,
        lo: f64,
        lo_ci: f64,
        hi: f64,
        hi_ci: f64,
    },
}

impl ExperimentError {
    /// Whether the failure comes from user input rather than the simulation.
    pub fn is_validation(&self) -> bool {
        !matches!(self, ExperimentError::Ensemble(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    /// Dotted path into the normalized scenario, e.g. `fluid.flow_rate`.
    pub parameter: String,
    /// Raw values; strings may carry units.
    pub values: Vec<Value>,
    /// Overrides every population count when set.
    pub per_point: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// The swept value after unit normalization.
    pub value: Value,
    pub stats: EnsembleStats,
}

/// Parse a sweep value token: JSON numbers stay numeric, anything else is
/// kept as a (unit-carrying) string.
pub fn parse_value_token(token: &str) -> Value {
    let token = token.trim();
    match serde_json::from_str::<Value>(token) {
        Ok(v @ (Value::Number(_) | Value::Bool(_))) => v,
        _ => Value::String(token.to_string()),
    }
}

fn with_population_size(config: &ScenarioConfig, n: usize) -> Result<ScenarioConfig, ConfigError> {
    (0..config.populations().len()).try_fold(config.clone(), |cfg, i| {
        cfg.with_parameter(&format!("populations.{i}.count"), Value::from(n))
    })
}

/// Resolve every sweep point to a config before running any of them, so
/// a bad value fails fast.
pub fn sweep_configs(
    config: &ScenarioConfig,
    spec: &SweepSpec,
) -> Result<Vec<(Value, ScenarioConfig)>, ExperimentError> {
    if spec.values.is_empty() {
        return Err(ExperimentError::EmptySweep);
    }
    let base = match spec.per_point {
        Some(n) => with_population_size(config, n)?,
        None => config.clone(),
    };
    base.parameter(&spec.parameter)?;
    spec.values
        .iter()
        .map(|v| {
            let cfg = base.with_parameter(&spec.parameter, v.clone())?;
            Ok((cfg.parameter(&spec.parameter)?, cfg))
        })
        .collect()
}

/// Run one ensemble per sweep value, in input order.
pub fn run_sweep(
    config: &ScenarioConfig,
    spec: &SweepSpec,
    parallelism: usize,
) -> Result<Vec<SweepPoint>, ExperimentError> {
    let configs = sweep_configs(config, spec)?;
    configs
        .into_iter()
        .map(|(value, cfg)| {
            let run = run_ensemble(
                cfg.populations(),
                cfg.scenario(),
                cfg.seed(),
                RunOptions {
                    parallelism,
                    keep_trajectories: 0,
                },
            )?;
            Ok(SweepPoint {
                value,
                stats: run.stats,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str =
    "parameter,value,species,n_total,n_captured,n_escaped,n_timeout,capture_fraction,ci_low,ci_high";

fn value_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Tidy CSV, one row per (value, species).
pub fn sweep_csv(parameter: &str, points: &[SweepPoint]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for p in points {
        for s in &p.stats.species {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                parameter,
                value_cell(&p.value),
                s.label,
                s.n_total,
                s.n_captured,
                s.n_escaped,
                s.n_timeout,
                s.capture_fraction,
                s.ci_low,
                s.ci_high
            ));
        }
    }
    out
}

pub const SPECIES_CSV_HEADER: &str =
    "species,n_total,n_captured,n_escaped,n_timeout,capture_fraction,ci_low,ci_high";

/// Capture fraction per species, for bar plots.
pub fn species_csv(stats: &EnsembleStats) -> String {
    let mut out = String::from(SPECIES_CSV_HEADER);
    out.push('\n');
    for s in &stats.species {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.label, s.n_total, s.n_captured, s.n_escaped, s.n_timeout, s.capture_fraction, s.ci_low, s.ci_high
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationStep {
    pub flow_rate: f64,
    pub capture_fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl CalibrationStep {
    fn new(flow_rate: f64, s: &SpeciesStats) -> Self {
        Self {
            flow_rate,
            capture_fraction: s.capture_fraction,
            ci_low: s.ci_low,
            ci_high: s.ci_high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    /// Calibrated flow rate, m³/s.
    pub flow_rate: f64,
    pub target: f64,
    pub estimate: CalibrationStep,
    /// Final bracket `[lo, hi]`, m³/s.
    pub bracket: [f64; 2],
    pub history: Vec<CalibrationStep>,
}

/// Bisection for the flow rate at which a monotone non-increasing capture
/// curve crosses `target`.
///
/// `capture` returns the estimated statistics at a flow rate. Stops when
/// the estimate is within `tolerance` of the target or the bracket is
/// narrower than 1 % of its initial lower end.
pub fn bisect_flow_rate<F>(
    mut capture: F,
    target: f64,
    tolerance: f64,
    bracket: [f64; 2],
) -> Result<Calibration, ExperimentError>
where
    F: FnMut(f64) -> Result<SpeciesStats, ExperimentError>,
{
    if !(target > 0.0 && target < 1.0) {
        return Err(ExperimentError::InvalidCalibration(format!(
            "target must lie in (0, 1), got {target}"
        )));
    }
    if !(tolerance >= 0.0) {
        return Err(ExperimentError::InvalidCalibration("tolerance must be >= 0".into()));
    }
    let [mut lo, mut hi] = bracket;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(ExperimentError::InvalidCalibration(format!(
            "bracket must satisfy 0 < lo < hi, got [{lo}, {hi}]"
        )));
    }
    let s_lo = capture(lo)?;
    let s_hi = capture(hi)?;
    if !(s_lo.ci_high >= target && target >= s_hi.ci_low) {
        return Err(ExperimentError::CalibrationInfeasible {
            target,
            lo: s_lo.capture_fraction,
            lo_ci: s_lo.ci_high,
            hi: s_hi.capture_fraction,
            hi_ci: s_hi.ci_low,
        });
    }
    let mut history = vec![CalibrationStep::new(lo, &s_lo), CalibrationStep::new(hi, &s_hi)];
    let min_width = 0.01 * lo;
    loop {
        let mid = 0.5 * (lo + hi);
        let s = capture(mid)?;
        let step = CalibrationStep::new(mid, &s);
        history.push(step.clone());
        if (s.capture_fraction - target).abs() <= tolerance || hi - lo < min_width {
            return Ok(Calibration {
                flow_rate: mid,
                target,
                estimate: step,
                bracket: [lo, hi],
                history,
            });
        }
        if s.capture_fraction > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Calibrate `fluid.flow_rate` so that `species` is captured at `target`.
pub fn calibrate_flow_rate(
    config: &ScenarioConfig,
    species: &str,
    target: f64,
    tolerance: f64,
    bracket: [f64; 2],
    parallelism: usize,
) -> Result<Calibration, ExperimentError> {
    let index = config
        .populations()
        .iter()
        .position(|p| p.species.label == species)
        .ok_or_else(|| ExperimentError::UnknownSpecies(species.to_string()))?;
    let population = config.populations()[index].clone();
    bisect_flow_rate(
        |q| {
            let cfg = config.with_parameter("fluid.flow_rate", Value::from(q))?;
            let run = run_ensemble(
                std::slice::from_ref(&population),
                cfg.scenario(),
                cfg.seed(),
                RunOptions {
                    parallelism,
                    keep_trajectories: 0,
                },
            )?;
            Ok(run.stats.species[0].clone())
        },
        target,
        tolerance,
        bracket,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldMapRow {
    pub r: f64,
    pub phi: f64,
    pub f_r: f64,
    pub f_phi: f64,
}

/// Single-wire force on a grid `r ∈ [r_min_factor·a, r_max_factor·a]` ×
/// `φ ∈ [0, 2π)` for the given cell.
pub fn field_map(
    config: &ScenarioConfig,
    cell: &CellMagnetics,
    n_r: usize,
    n_phi: usize,
    r_range: (f64, f64),
) -> Result<Vec<FieldMapRow>, ExperimentError> {
    let sc = config.scenario();
    let params = sc.wires.kernel_params(&sc.field);
    let a = params.half_width;
    let (r0, r1) = (r_range.0 * a, r_range.1 * a);
    let mut rows = Vec::with_capacity(n_r * n_phi);
    for i in 0..n_r {
        let r = if n_r == 1 { r0 } else { r0 + (r1 - r0) * i as f64 / (n_r - 1) as f64 };
        for j in 0..n_phi {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / n_phi as f64;
            let f = wire_force_polar(WirePolar { r, phi }, cell, &params)?;
            rows.push(FieldMapRow {
                r,
                phi,
                f_r: f.radial,
                f_phi: f.azimuthal,
            });
        }
    }
    Ok(rows)
}

pub fn field_map_csv(rows: &[FieldMapRow]) -> String {
    let mut out = String::from("r,phi,F_r,F_phi\n");
    for row in rows {
        out.push_str(&format!("{},{},{},{}\n", row.r, row.phi, row.f_r, row.f_phi));
    }
    out
}
