//! Runs the bundled scenario at a few flow rates and prints capture fractions.
//!
//! `cargo run --release --example capture_probe -p magsep-core -- [cells] [flow ml/h ...]`

use std::time::Instant;

use magsep::config::default_config;
use magsep::{run_ensemble, RunOptions};
use serde_json::json;

fn main() {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse().expect("cell count")).unwrap_or(200);
    let mut flows: Vec<String> = args.collect();
    if flows.is_empty() {
        flows.push("0.5".into());
    }
    let base = default_config();
    for q in flows {
        let mut cfg = base.with_parameter("fluid.flow_rate", json!(format!("{q} ml/h"))).unwrap();
        for i in 0..cfg.populations().len() {
            cfg = cfg.with_parameter(&format!("populations.{i}.count"), json!(n)).unwrap();
        }
        let start = Instant::now();
        let run = run_ensemble(cfg.populations(), cfg.scenario(), cfg.seed(), RunOptions::default()).unwrap();
        let elapsed = start.elapsed();
        for s in &run.stats.species {
            println!(
                "Q = {q} ml/h  {:<10} capture {:.3} [{:.3}, {:.3}]  escaped {} timeout {}",
                s.label, s.capture_fraction, s.ci_low, s.ci_high, s.n_escaped, s.n_timeout
            );
        }
        println!("  {} cells in {:.2?}", 2 * n, elapsed);
    }
}
