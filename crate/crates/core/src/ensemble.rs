//! Monte Carlo capture statistics over sampled cell populations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transport::{
    classify_trajectory, simulate_trajectory, CellSpecies, CellState, Outcome, Scenario,
    Trajectory,
};

/// Version of the stats document layout.
pub const STATS_SCHEMA_VERSION: u32 = 1;

/// Two-sided 95 % normal quantile.
const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("invalid population {label}: {reason}")]
    InvalidPopulation { label: String, reason: String },
    #[error("efficiency undefined: count before flowing is {0}")]
    UndefinedEfficiency(f64),
    #[error("inconsistent counts: after ({after}) exceeds before ({before})")]
    InconsistentCounts { before: f64, after: f64 },
    #[error("species not comparable: {0}")]
    NotComparable(String),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Population {
    pub species: CellSpecies,
    pub count: usize,
    /// Relative standard deviation of the Stokes radius; `0` disables spread.
    pub radius_spread: f64,
}

impl Population {
    pub fn new(species: CellSpecies, count: usize, radius_spread: f64) -> Result<Self, EnsembleError> {
        if !(radius_spread.is_finite() && radius_spread >= 0.0) {
            return Err(EnsembleError::InvalidPopulation {
                label: species.label,
                reason: format!("radius spread must be >= 0, got {radius_spread}"),
            });
        }
        Ok(Self {
            species,
            count,
            radius_spread,
        })
    }
}

/// Per-cell generator keyed by `(master_seed, label)` with the cell index
/// as the stream id.
pub fn cell_rng(master_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
    rng.set_stream(index);
    rng
}

/// Draw inlet states (at `x = 0`) and per-cell species realizations.
pub fn sample_population(
    pop: &Population,
    scenario: &Scenario,
    master_seed: u64,
) -> Vec<(CellState, CellSpecies)> {
    (0..pop.count)
        .map(|i| sample_cell(pop, scenario, master_seed, i as u64))
        .collect()
}

fn sample_cell(pop: &Population, scenario: &Scenario, seed: u64, index: u64) -> (CellState, CellSpecies) {
    let mut rng = cell_rng(seed, &pop.species.label, index);
    let mean = pop.species.hydrodynamic_radius;
    let species = if pop.radius_spread > 0.0 {
        let sigma = pop.radius_spread * mean;
        let lo = (mean - 3.0 * sigma).max(0.2 * mean);
        let hi = mean + 3.0 * sigma;
        let normal = Normal::new(mean, sigma).expect("finite positive sigma");
        let radius = loop {
            let r = normal.sample(&mut rng);
            if (lo..=hi).contains(&r) {
                break r;
            }
        };
        pop.species.with_radius(radius)
    } else {
        pop.species.clone()
    };
    let r = species.hydrodynamic_radius;
    let ch = &scenario.channel;
    // Cells enter above the wire layer.
    let wires = &scenario.wires;
    let layer_top = wires
        .centers()
        .iter()
        .map(|c| c.y + wires.half_width())
        .fold(0.0, f64::max);
    let y = uniform_in(&mut rng, r, ch.width() - r);
    let z = uniform_in(&mut rng, layer_top + r, ch.depth() - r);
    (CellState::new(0.0, y, z, 0.0), species)
}

fn uniform_in(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.5 * (lo + hi);
    }
    lo + (hi - lo) * rng.random::<f64>()
}

/// Wilson score interval for `k` successes out of `n` trials at 95 %.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = Z_95 * Z_95;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z_95 / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    (
        (center - half).clamp(0.0, 1.0).min(p),
        (center + half).clamp(0.0, 1.0).max(p),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesStats {
    pub label: String,
    pub n_total: usize,
    pub n_captured: usize,
    pub n_escaped: usize,
    pub n_timeout: usize,
    pub capture_fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl SpeciesStats {
    fn from_counts(label: String, n_captured: usize, n_escaped: usize, n_timeout: usize) -> Self {
        let n_total = n_captured + n_escaped + n_timeout;
        let (ci_low, ci_high) = wilson_interval(n_captured, n_total);
        Self {
            label,
            n_total,
            n_captured,
            n_escaped,
            n_timeout,
            capture_fraction: if n_total == 0 {
                0.0
            } else {
                n_captured as f64 / n_total as f64
            },
            ci_low,
            ci_high,
        }
    }
}

/// A cell whose integration failed; counted as a timeout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostic {
    pub species: String,
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub schema_version: u32,
    pub master_seed: u64,
    pub scenario_digest: String,
    pub species: Vec<SpeciesStats>,
    pub diagnostics: Vec<CellDiagnostic>,
}

impl EnsembleStats {
    pub fn species(&self, label: &str) -> Option<&SpeciesStats> {
        self.species.iter().find(|s| s.label == label)
    }

    /// Pretty JSON with lexicographically sorted keys.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("stats serialize");
        let mut s = serde_json::to_string_pretty(&value).expect("stats serialize");
        s.push('\n');
        s
    }
}

/// Hex SHA-256 of the canonical JSON of the scenario and populations.
pub fn scenario_digest(scenario: &Scenario, populations: &[Population]) -> String {
    let value = serde_json::json!({ "scenario": scenario, "populations": populations });
    let canonical = serde_json::to_string(&value).expect("scenario serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRun {
    pub stats: EnsembleStats,
    /// Sampled trajectories for the first cells of each species, in input order.
    pub trajectories: Vec<(String, Vec<Trajectory>)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; `0` lets the pool decide.
    pub parallelism: usize,
    /// How many trajectories per species to keep with full sampling.
    pub keep_trajectories: usize,
}


enum CellResult {
    Done(Trajectory),
    Failed(String),
}

/// Simulate every cell of every population independently.
///
/// The result depends only on `(populations, scenario, master_seed)`, never
/// on the number of workers.
pub fn run_ensemble(
    populations: &[Population],
    scenario: &Scenario,
    master_seed: u64,
    options: RunOptions,
) -> Result<EnsembleRun, EnsembleError> {
    let limits = scenario.resolved_limits();
    let work: Vec<(usize, usize)> = populations
        .iter()
        .enumerate()
        .flat_map(|(p, pop)| (0..pop.count).map(move |i| (p, i)))
        .collect();

    let simulate = |&(p, i): &(usize, usize)| {
        let pop = &populations[p];
        let (state, species) = sample_cell(pop, scenario, master_seed, i as u64);
        let result = if i < options.keep_trajectories {
            simulate_trajectory(state, &species, scenario, &limits)
        } else {
            classify_trajectory(state, &species, scenario, &limits)
        };
        match result {
            Ok(t) => CellResult::Done(t),
            Err(e) => CellResult::Failed(e.to_string()),
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism)
        .build()
        .map_err(|e| EnsembleError::Pool(e.to_string()))?;
    let results: Vec<CellResult> = pool.install(|| work.par_iter().map(simulate).collect());

    let mut species = Vec::with_capacity(populations.len());
    let mut trajectories = Vec::with_capacity(populations.len());
    let mut diagnostics = Vec::new();
    let mut cursor = results.into_iter();
    for pop in populations {
        let (mut captured, mut escaped, mut timeout) = (0, 0, 0);
        let mut kept = Vec::new();
        for index in 0..pop.count {
            match cursor.next().expect("one result per cell") {
                CellResult::Done(t) => {
                    match t.outcome {
                        Outcome::Captured { .. } => captured += 1,
                        Outcome::Escaped => escaped += 1,
                        Outcome::MaxTimeExceeded => timeout += 1,
                    }
                    if index < options.keep_trajectories {
                        kept.push(t);
                    }
                }
                CellResult::Failed(message) => {
                    timeout += 1;
                    diagnostics.push(CellDiagnostic {
                        species: pop.species.label.clone(),
                        index,
                        message,
                    });
                }
            }
        }
        let label = pop.species.label.clone();
        species.push(SpeciesStats::from_counts(label.clone(), captured, escaped, timeout));
        trajectories.push((label, kept));
    }

    Ok(EnsembleRun {
        stats: EnsembleStats {
            schema_version: STATS_SCHEMA_VERSION,
            master_seed,
            scenario_digest: scenario_digest(scenario, populations),
            species,
            diagnostics,
        },
        trajectories,
    })
}

/// Trapped fraction from before/after cell densities: `1 - after/before`.
pub fn efficiency_report(count_before: f64, count_after: f64) -> Result<f64, EnsembleError> {
    if !(count_before > 0.0) {
        return Err(EnsembleError::UndefinedEfficiency(count_before));
    }
    if count_after > count_before {
        return Err(EnsembleError::InconsistentCounts {
            before: count_before,
            after: count_after,
        });
    }
    if !(count_after >= 0.0) {
        return Err(EnsembleError::InconsistentCounts {
            before: count_before,
            after: count_after,
        });
    }
    Ok((count_before - count_after) / count_before)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationSummary {
    pub fractions: Vec<(String, f64)>,
    pub target: String,
    pub background: String,
    /// Target minus background capture fraction.
    pub capture_gap: f64,
    /// Background share of the cells leaving the outlet; `None` when nothing escaped.
    pub outlet_purity: Option<f64>,
}

/// Compare the species meant to be trapped (`target`) against the one
/// meant to pass (`background`).
pub fn compare_species(
    stats: &EnsembleStats,
    target: &str,
    background: &str,
) -> Result<SeparationSummary, EnsembleError> {
    if stats.species.len() < 2 {
        return Err(EnsembleError::NotComparable(format!(
            "need at least two species, got {}",
            stats.species.len()
        )));
    }
    if target == background {
        return Err(EnsembleError::NotComparable("target and background are the same species".into()));
    }
    let find = |label: &str| {
        stats
            .species(label)
            .ok_or_else(|| EnsembleError::NotComparable(format!("no species labelled {label:?}")))
    };
    let t = find(target)?;
    let b = find(background)?;
    let escaped = t.n_escaped + b.n_escaped;
    Ok(SeparationSummary {
        fractions: stats
            .species
            .iter()
            .map(|s| (s.label.clone(), s.capture_fraction))
            .collect(),
        target: target.to_string(),
        background: background.to_string(),
        capture_gap: t.capture_fraction - b.capture_fraction,
        outlet_purity: (escaped > 0).then(|| b.n_escaped as f64 / escaped as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_with(counts: &[(&str, usize, usize)]) -> EnsembleStats {
        EnsembleStats {
            schema_version: STATS_SCHEMA_VERSION,
            master_seed: 0,
            scenario_digest: String::new(),
            species: counts
                .iter()
                .map(|&(l, c, e)| SpeciesStats::from_counts(l.into(), c, e, 0))
                .collect(),
            diagnostics: Vec::new(),
        }
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(efficiency_report(100.0, 5.0).unwrap(), 0.95);
        assert_eq!(efficiency_report(100.0, 100.0).unwrap(), 0.0);
        assert_eq!(efficiency_report(100.0, 0.0).unwrap(), 1.0);
        assert!(matches!(
            efficiency_report(100.0, 101.0),
            Err(EnsembleError::InconsistentCounts { .. })
        ));
        assert!(matches!(
            efficiency_report(0.0, 0.0),
            Err(EnsembleError::UndefinedEfficiency(_))
        ));
    }

    #[test]
    fn wilson_known_values() {
        // 5/10: center 0.5, reference bounds from the closed form.
        let (lo, hi) = wilson_interval(5, 10);
        assert!((lo - 0.236_593).abs() < 1e-6, "{lo}");
        assert!((hi - 0.763_407).abs() < 1e-6, "{hi}");
        let (lo, hi) = wilson_interval(0, 20);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.2);
        let (lo, hi) = wilson_interval(20, 20);
        assert_eq!(hi, 1.0);
        assert!(lo > 0.8);
        assert_eq!(wilson_interval(0, 0), (0.0, 1.0));
    }

    #[test]
    fn purity_example() {
        let stats = stats_with(&[("RBC", 950, 50), ("WBC", 0, 1000)]);
        let s = compare_species(&stats, "RBC", "WBC").unwrap();
        assert!((s.capture_gap - 0.95).abs() < 1e-15);
        assert!((s.outlet_purity.unwrap() - 1000.0 / 1050.0).abs() < 1e-15);
    }

    #[test]
    fn single_species_not_comparable() {
        let stats = stats_with(&[("RBC", 1, 1)]);
        assert!(matches!(
            compare_species(&stats, "RBC", "WBC"),
            Err(EnsembleError::NotComparable(_))
        ));
        let stats = stats_with(&[("RBC", 1, 1), ("WBC", 1, 1)]);
        assert!(compare_species(&stats, "RBC", "PLT").is_err());
    }

    #[test]
    fn rng_streams_are_keyed() {
        let mut a = cell_rng(7, "RBC", 3);
        let mut b = cell_rng(7, "RBC", 3);
        let mut c = cell_rng(7, "RBC", 4);
        let mut d = cell_rng(7, "WBC", 3);
        let x: u64 = a.random();
        assert_eq!(x, b.random::<u64>());
        assert_ne!(x, c.random::<u64>());
        assert_ne!(x, d.random::<u64>());
    }

    #[test]
    fn negative_spread_rejected() {
        assert!(Population::new(CellSpecies::rbc_deoxy(), 1, -0.1).is_err());
    }
}
