use magsep::config::{default_config, load_value, ScenarioConfig};
use magsep::transport::{
    classify_trajectory, simulate_trajectory, trial_step, CellDynamics, CellSpecies, CellState,
    Outcome,
};
use proptest::prelude::*;
use serde_json::{json, Value};

fn edit(config: &ScenarioConfig, f: impl FnOnce(&mut Value)) -> ScenarioConfig {
    let mut doc = config.to_value();
    f(&mut doc);
    load_value(doc).unwrap()
}

fn set(doc: &mut Value, pointer: &str, value: Value) {
    *doc.pointer_mut(pointer).unwrap_or_else(|| panic!("{pointer}")) = value;
}

fn rbc(config: &ScenarioConfig) -> CellSpecies {
    config.populations()[0].species.clone()
}

/// No field, neutrally buoyant cells: pure advection.
fn quiet() -> ScenarioConfig {
    edit(&default_config(), |d| {
        set(d, "/field/flux_density", json!(0.0));
        set(d, "/species/0/density", json!(1000.0));
        set(d, "/species/1/density", json!(1000.0));
    })
}

/// Constant force only: no field, sedimenting cells.
fn settling() -> ScenarioConfig {
    edit(&default_config(), |d| set(d, "/field/flux_density", json!(0.0)))
}

/// One wire at the floor below a cell on the wire's symmetry axis, field
/// vertical, neutral buoyancy: a purely radial attraction.
fn radial() -> ScenarioConfig {
    edit(&default_config(), |d| {
        set(d, "/channel/depth", json!(200e-6));
        let wires = d["wires"].as_object_mut().unwrap();
        wires.remove("lattice");
        wires.insert("centers".into(), json!([[500e-6, 0.0]]));
        set(d, "/species/0/density", json!(1000.0));
        set(d, "/species/0/delta_chi", json!(3.3e-4));
        set(d, "/populations/0/radius_spread", json!(0.0));
    })
}

fn fixed_steps(dynamics: &CellDynamics<'_>, start: CellState, dt: f64, n: usize) -> CellState {
    let mut s = start;
    for _ in 0..n {
        let k1 = dynamics.velocity(&s.position).unwrap();
        let trial = trial_step(dynamics, &s.position, &k1, dt).unwrap();
        s = CellState {
            position: trial.position,
            t: s.t + dt,
        };
    }
    s
}

#[test]
fn constant_force_is_integrated_exactly() {
    let cfg = settling();
    let sc = cfg.scenario();
    let sp = rbc(&cfg);
    let dynamics = CellDynamics::new(&sp, sc);
    let h = sc.channel.depth();
    let z0 = 0.8 * h;
    let start = CellState::new(0.0, 500e-6, z0, 0.0);
    let vs = -dynamics.velocity(&start.position).unwrap().z;
    assert!(vs > 0.0);
    let t_end = 0.5 * (z0 - 2.0 * sp.hydrodynamic_radius) / vs;
    let (u0, c, vbar) = (z0 / h, vs / h, sc.mean_velocity());
    let x_exact = 6.0 * vbar * (u0 * t_end - c * t_end * t_end / 2.0 - (u0.powi(3) - (u0 - c * t_end).powi(3)) / (3.0 * c));
    let z_exact = z0 - vs * t_end;
    for n in [2, 8, 32, 128] {
        let end = fixed_steps(&dynamics, start, t_end / n as f64, n);
        assert!((end.position.x - x_exact).abs() <= 1e-12 * x_exact, "n = {n}");
        assert!((end.position.z - z_exact).abs() <= 1e-12 * z_exact, "n = {n}");
    }
}

#[test]
fn observed_order_on_radial_attraction() {
    let cfg = radial();
    let sc = cfg.scenario();
    let sp = rbc(&cfg);
    let dynamics = CellDynamics::new(&sp, sc);
    let p = sc.wires.kernel_params(&sc.field);
    let a = p.half_width;
    let base = 2.0 * p.contrast * p.mu_0 * sp.magnetics.delta_chi * sp.magnetics.volume * a * a
        * p.aspect_ratio * p.h0 * p.h0;
    let big_a = dynamics.mobility() * base;
    let big_b = big_a * p.contrast * p.aspect_ratio * a * a;
    // dr/dt = -A/r³ - B/r⁵  =>  t(r) = (G(r0²) - G(r²))/2.
    let g = |u: f64| u * u / (2.0 * big_a) - big_b * u / (big_a * big_a)
        + big_b * big_b / big_a.powi(3) * (big_a * u + big_b).ln();
    let r0 = 12.0 * a;
    let r_end = 6.0 * a;
    let t_end = 0.5 * (g(r0 * r0) - g(r_end * r_end));
    let start = CellState::new(0.0, 500e-6, r0, 0.0);
    let mut errors = Vec::new();
    let ns = [8usize, 16, 32, 64, 128];
    for n in ns {
        let end = fixed_steps(&dynamics, start, t_end / n as f64, n);
        assert_eq!(end.position.y, 500e-6);
        errors.push((end.position.z - r_end).abs());
    }
    let slope = (errors[0] / errors[ns.len() - 1]).ln() / ((ns[ns.len() - 1] / ns[0]) as f64).ln();
    assert!(slope >= 2.0, "observed order {slope}, errors {errors:?}");
}

#[test]
fn midplane_transit_time() {
    let cfg = quiet();
    let sc = cfg.scenario();
    let start = CellState::new(0.0, 0.5e-3, 0.5 * sc.channel.depth(), 0.0);
    let t = simulate_trajectory(start, &rbc(&cfg), sc, &sc.resolved_limits()).unwrap();
    assert_eq!(t.outcome, Outcome::Escaped);
    let expected = sc.channel.length() / (1.5 * sc.mean_velocity());
    assert!((t.terminal.t - expected).abs() <= 1e-6 * expected);
}

#[test]
fn streamlines_do_not_drift() {
    let cfg = quiet();
    let sc = cfg.scenario();
    let (y0, z0) = (0.3e-3, 17e-6);
    let t = simulate_trajectory(CellState::new(0.0, y0, z0, 0.0), &rbc(&cfg), sc, &sc.resolved_limits()).unwrap();
    assert_eq!(t.outcome, Outcome::Escaped);
    for s in t.samples.iter().chain(std::iter::once(&t.terminal)) {
        assert!((s.position.y - y0).abs() <= 1e-12 * y0);
        assert!((s.position.z - z0).abs() <= 1e-12 * z0);
    }
}

#[test]
fn strongly_paramagnetic_cell_is_captured() {
    let cfg = edit(&default_config(), |d| {
        set(d, "/species/0/delta_chi", json!(3.3e-4));
        set(d, "/fluid/flow_rate", json!("0.05 ml/h"));
    });
    let sc = cfg.scenario();
    let start = CellState::new(0.0, 0.4e-3, 40e-6, 0.0);
    let t = classify_trajectory(start, &rbc(&cfg), sc, &sc.resolved_limits()).unwrap();
    assert!(matches!(t.outcome, Outcome::Captured { .. }), "{:?}", t.outcome);
}

#[test]
fn classify_agrees_with_full_simulation() {
    let cfg = default_config();
    let sc = cfg.scenario();
    let limits = sc.resolved_limits();
    for (i, z) in [10e-6, 25e-6, 50e-6].into_iter().enumerate() {
        let start = CellState::new(0.0, 0.2e-3 + 3e-6 * i as f64, z, 0.0);
        let full = simulate_trajectory(start, &rbc(&cfg), sc, &limits).unwrap();
        let bare = classify_trajectory(start, &rbc(&cfg), sc, &limits).unwrap();
        assert_eq!(full.outcome, bare.outcome);
        assert_eq!(full.terminal, bare.terminal);
        assert!(bare.samples.is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_stay_in_box_and_repeat_exactly(
        y in 0.0f64..1.0,
        z in 0.0f64..1.0,
        wbc in proptest::bool::ANY,
    ) {
        let cfg = default_config();
        let sc = cfg.scenario();
        let species = cfg.populations()[usize::from(wbc)].species.clone();
        let r = species.hydrodynamic_radius;
        let (w, h) = (sc.channel.width(), sc.channel.depth());
        let start = CellState::new(0.0, r + y * (w - 2.0 * r), r + z * (h - 2.0 * r), 0.0);
        let limits = sc.resolved_limits();
        let first = simulate_trajectory(start, &species, sc, &limits).unwrap();
        let second = simulate_trajectory(start, &species, sc, &limits).unwrap();
        prop_assert_eq!(&first, &second);
        for s in first.samples.iter().chain(std::iter::once(&first.terminal)) {
            prop_assert!(s.position.y >= r && s.position.y <= w - r);
            prop_assert!(s.position.z >= r && s.position.z <= h - r);
            prop_assert!(s.position.x <= sc.channel.length());
            prop_assert!(s.t <= limits.t_max);
        }
        for pair in first.samples.windows(2) {
            prop_assert!(pair[1].t > pair[0].t);
        }
    }
}
