//! `magsep` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use magsep::config::ScenarioConfig;
use magsep::ensemble::compare_species;
use magsep::experiment::{
    calibrate_flow_rate, field_map, field_map_csv, parse_value_token, run_sweep, species_csv,
    sweep_csv, ExperimentError, SweepSpec,
};
use magsep::units::{parse_quantity, Dimension};
use magsep::{load_str, run_ensemble, RunOptions};
use serde_json::json;

#[derive(Parser)]
#[command(name = "magsep", version, about = "Magnetophoretic cell capture simulator")]
struct Cli {
    /// Worker threads, 0 = one per core.
    #[arg(long, global = true, env = "MAGSEP_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario's populations and write statistics and trajectories.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one ensemble per value of a scenario parameter.
    Sweep {
        config: PathBuf,
        /// Dotted path, e.g. `fluid.flow_rate` or `field.flux_density`.
        #[arg(long)]
        param: String,
        /// Comma-separated values, units allowed: `0.1 ml/h,0.5 ml/h`.
        #[arg(long)]
        values: String,
        /// Cells per population at every point (default: as configured).
        #[arg(long)]
        per_point: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Find the flow rate at which a species is captured at a target fraction.
    Calibrate {
        config: PathBuf,
        #[arg(long)]
        target: f64,
        /// Flow-rate bracket `lo,hi`, units allowed (`0.1 ml/h,2 ml/h`).
        #[arg(long)]
        bracket: String,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
        /// Defaults to the first population.
        #[arg(long)]
        species: Option<String>,
        /// Also write the calibration record as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the single-wire force on a polar grid as CSV.
    Fieldmap {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first population.
        #[arg(long)]
        species: Option<String>,
        #[arg(long, default_value_t = 64)]
        n_r: usize,
        #[arg(long, default_value_t = 64)]
        n_phi: usize,
        /// Radial range in wire half-widths.
        #[arg(long, default_value_t = 1.1)]
        r_min: f64,
        #[arg(long, default_value_t = 10.0)]
        r_max: f64,
    },
}

/// Failure class, mapped to the exit status.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn experiment(e: ExperimentError) -> Failure {
    if e.is_validation() {
        invalid(e)
    } else {
        runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Validation(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let threads = cli.threads;
    match cli.command {
        Command::Run { config, out } => cmd_run(&config, &out, threads),
        Command::Sweep {
            config,
            param,
            values,
            per_point,
            out,
        } => cmd_sweep(&config, param, &values, per_point, &out, threads),
        Command::Calibrate {
            config,
            target,
            bracket,
            tolerance,
            species,
            out,
        } => cmd_calibrate(&config, target, &bracket, tolerance, species, out.as_deref(), threads),
        Command::Fieldmap {
            config,
            out,
            species,
            n_r,
            n_phi,
            r_min,
            r_max,
        } => cmd_fieldmap(&config, &out, species, n_r, n_phi, (r_min, r_max)),
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(invalid)?;
    load_str(&text)
        .with_context(|| format!("in {}", path.display()))
        .map_err(invalid)
}

/// Write to a sibling temporary file, then rename over `path`.
fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| anyhow!("{} is not a file path", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn cmd_run(config: &Path, out: &Path, threads: usize) -> Result<(), Failure> {
    let cfg = load(config)?;
    let run = run_ensemble(
        cfg.populations(),
        cfg.scenario(),
        cfg.seed(),
        RunOptions {
            parallelism: threads,
            keep_trajectories: cfg.trajectory_cap(),
        },
    )
    .map_err(runtime)?;

    write_atomic(&out.join("stats.json"), &run.stats.to_json()).map_err(runtime)?;
    write_atomic(&out.join("capture_by_species.csv"), &species_csv(&run.stats)).map_err(runtime)?;
    for (label, trajectories) in &run.trajectories {
        let dir = out.join("trajectories").join(label);
        for (i, t) in trajectories.iter().enumerate() {
            write_atomic(&dir.join(format!("cell_{i:04}.csv")), &t.to_csv()).map_err(runtime)?;
        }
    }

    for s in &run.stats.species {
        println!(
            "{:<12} captured {:>6}/{:<6} fraction {:.4} [{:.4}, {:.4}]  escaped {}  timeout {}",
            s.label, s.n_captured, s.n_total, s.capture_fraction, s.ci_low, s.ci_high, s.n_escaped, s.n_timeout
        );
    }
    if run.stats.species.len() >= 2 {
        let (t, b) = (&run.stats.species[0].label, &run.stats.species[1].label);
        if let Ok(summary) = compare_species(&run.stats, t, b) {
            let purity = summary
                .outlet_purity
                .map_or("n/a".to_string(), |p| format!("{p:.4}"));
            println!("capture gap {t} - {b}: {:.4}, outlet purity: {purity}", summary.capture_gap);
        }
    }
    if !run.stats.diagnostics.is_empty() {
        eprintln!("{} cell(s) failed to integrate, see stats.json", run.stats.diagnostics.len());
    }
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    param: String,
    values: &str,
    per_point: Option<usize>,
    out: &Path,
    threads: usize,
) -> Result<(), Failure> {
    let cfg = load(config)?;
    let spec = SweepSpec {
        values: values
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(parse_value_token)
            .collect(),
        parameter: param,
        per_point,
    };
    let points = run_sweep(&cfg, &spec, threads).map_err(experiment)?;
    let csv = sweep_csv(&spec.parameter, &points);
    write_atomic(&out.join("sweep.csv"), &csv).map_err(runtime)?;
    print!("{csv}");
    Ok(())
}

fn parse_bracket(text: &str) -> anyhow::Result<[f64; 2]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        bail!("bracket must be `lo,hi`, got {text:?}");
    }
    let q = |s: &str| parse_quantity(s, Dimension::FlowRate).map_err(|e| anyhow!("bracket: {e}"));
    Ok([q(parts[0])?, q(parts[1])?])
}

fn species_label(cfg: &ScenarioConfig, species: Option<String>) -> Result<String, Failure> {
    match species {
        Some(s) => Ok(s),
        None => cfg
            .populations()
            .first()
            .map(|p| p.species.label.clone())
            .ok_or_else(|| invalid(anyhow!("scenario has no populations"))),
    }
}

fn cmd_calibrate(
    config: &Path,
    target: f64,
    bracket: &str,
    tolerance: f64,
    species: Option<String>,
    out: Option<&Path>,
    threads: usize,
) -> Result<(), Failure> {
    let cfg = load(config)?;
    let bracket = parse_bracket(bracket).map_err(invalid)?;
    let label = species_label(&cfg, species)?;
    let cal = calibrate_flow_rate(&cfg, &label, target, tolerance, bracket, threads).map_err(experiment)?;
    let record = json!({ "species": label, "calibration": cal });
    let mut text = serde_json::to_string_pretty(&record).map_err(runtime)?;
    text.push('\n');
    if let Some(path) = out {
        write_atomic(path, &text).map_err(runtime)?;
    }
    print!("{text}");
    eprintln!(
        "{label}: capture {:.4} [{:.4}, {:.4}] at {:.6e} m^3/s ({:.4} ml/h)",
        cal.estimate.capture_fraction,
        cal.estimate.ci_low,
        cal.estimate.ci_high,
        cal.flow_rate,
        cal.flow_rate * 3.6e9
    );
    Ok(())
}

fn cmd_fieldmap(
    config: &Path,
    out: &Path,
    species: Option<String>,
    n_r: usize,
    n_phi: usize,
    r_range: (f64, f64),
) -> Result<(), Failure> {
    let cfg = load(config)?;
    let label = species_label(&cfg, species)?;
    let pop = cfg
        .populations()
        .iter()
        .find(|p| p.species.label == label)
        .ok_or_else(|| invalid(ExperimentError::UnknownSpecies(label.clone())))?;
    if n_r == 0 || n_phi == 0 || !(r_range.0 > 1.0 && r_range.1 >= r_range.0) {
        return Err(invalid(anyhow!(
            "grid needs n_r, n_phi >= 1 and 1 < r_min <= r_max (in half-widths)"
        )));
    }
    let rows = field_map(&cfg, &pop.species.magnetics, n_r, n_phi, r_range).map_err(experiment)?;
    write_atomic(out, &field_map_csv(&rows)).map_err(runtime)?;
    Ok(())
}
