//! Overdamped cell transport through the channel.
//!
//! Cells move with the local plane-Poiseuille velocity plus the Stokes
//! drift of the magnetic and buoyant-gravity forces. Coordinates: `x` along
//! the flow, `y` across the width, `z` up from the floor.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::magnetics::{
    CellMagnetics, FieldConfig, KernelParams, MagneticsError, WireArray,
};

/// Standard gravity, m/s².
pub const STANDARD_GRAVITY: f64 = 9.80665;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("invalid {name}: {value} ({reason})")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("z = {z:e} m outside the channel [0, {depth:e}] m")]
    OutOfChannel { z: f64, depth: f64 },
    #[error(transparent)]
    Magnetics(#[from] MagneticsError),
    #[error("step size underflow (dt = {dt:e} s) at t = {t:e} s, position ({x:e}, {y:e}, {z:e}) m")]
    Stiffness {
        dt: f64,
        t: f64,
        x: f64,
        y: f64,
        z: f64,
    },
}

fn check_positive(name: &'static str, value: f64) -> Result<(), TransportError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(TransportError::InvalidParameter {
            name,
            value,
            reason: "must be positive and finite",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelGeometry {
    depth: f64,
    width: f64,
    length: f64,
}

impl ChannelGeometry {
    pub fn new(depth: f64, width: f64, length: f64) -> Result<Self, TransportError> {
        check_positive("channel.depth", depth)?;
        check_positive("channel.width", width)?;
        check_positive("channel.length", length)?;
        Ok(Self {
            depth,
            width,
            length,
        })
    }

    pub fn depth(&self) -> f64 {
        self.depth
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// The plane-flow profile assumes a wide, shallow channel.
    pub fn is_plane_flow(&self) -> bool {
        self.width >= 5.0 * self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluidConfig {
    viscosity: f64,
    density: f64,
    flow_rate: f64,
}

impl FluidConfig {
    pub fn new(viscosity: f64, density: f64, flow_rate: f64) -> Result<Self, TransportError> {
        check_positive("fluid.viscosity", viscosity)?;
        check_positive("fluid.density", density)?;
        check_positive("fluid.flow_rate", flow_rate)?;
        Ok(Self {
            viscosity,
            density,
            flow_rate,
        })
    }

    pub fn viscosity(&self) -> f64 {
        self.viscosity
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn flow_rate(&self) -> f64 {
        self.flow_rate
    }

    pub fn with_flow_rate(self, flow_rate: f64) -> Result<Self, TransportError> {
        Self::new(self.viscosity, self.density, flow_rate)
    }
}

/// A cell class: magnetic response, Stokes radius and density.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSpecies {
    pub label: String,
    pub magnetics: CellMagnetics,
    pub hydrodynamic_radius: f64,
    pub density: f64,
}

impl CellSpecies {
    pub fn new(
        label: impl Into<String>,
        magnetics: CellMagnetics,
        hydrodynamic_radius: f64,
        density: f64,
    ) -> Result<Self, TransportError> {
        let magnetics = CellMagnetics::new(magnetics.delta_chi, magnetics.volume)?;
        check_positive("hydrodynamic_radius", hydrodynamic_radius)?;
        check_positive("density", density)?;
        Ok(Self {
            label: label.into(),
            magnetics,
            hydrodynamic_radius,
            density,
        })
    }

    /// Deoxygenated red cell: Δχ = +3.3e-6 vs water, 3.5 µm Stokes radius,
    /// equivalent-sphere volume, 1100 kg/m³.
    pub fn rbc_deoxy() -> Self {
        let r = 3.5e-6;
        Self {
            label: "RBC-deoxy".into(),
            magnetics: CellMagnetics {
                delta_chi: 3.3e-6,
                volume: sphere_volume(r),
            },
            hydrodynamic_radius: r,
            density: 1100.0,
        }
    }

    /// Lymphocyte-like white cell: Δχ = -0.2e-6 vs water, 4 µm radius, 1070 kg/m³.
    pub fn wbc() -> Self {
        let r = 4.0e-6;
        Self {
            label: "WBC".into(),
            magnetics: CellMagnetics {
                delta_chi: -0.2e-6,
                volume: sphere_volume(r),
            },
            hydrodynamic_radius: r,
            density: 1070.0,
        }
    }

    /// Same species with a different Stokes radius; the volume scales with
    /// the cube of the radius ratio.
    pub fn with_radius(&self, radius: f64) -> Self {
        let ratio = radius / self.hydrodynamic_radius;
        Self {
            label: self.label.clone(),
            magnetics: CellMagnetics {
                delta_chi: self.magnetics.delta_chi,
                volume: self.magnetics.volume * ratio * ratio * ratio,
            },
            hydrodynamic_radius: radius,
            density: self.density,
        }
    }
}

pub fn sphere_volume(radius: f64) -> f64 {
    4.0 / 3.0 * std::f64::consts::PI * radius.powi(3)
}

/// Adaptive integrator controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSettings {
    /// Relative tolerance on each position component.
    pub rtol: f64,
    /// Absolute tolerance, m.
    pub atol: f64,
    /// Smallest admissible step, s.
    pub min_step: f64,
    /// Transverse displacement cap near wires, in units of the wire half-width.
    pub near_wire_displacement: f64,
    /// Distance from a capture surface, in half-widths, inside which the cap applies.
    pub near_wire_range: f64,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-10,
            min_step: 1e-12,
            near_wire_displacement: 0.1,
            near_wire_range: 5.0,
        }
    }
}

impl IntegratorSettings {
    pub fn validate(&self) -> Result<(), TransportError> {
        check_positive("integrator.rtol", self.rtol)?;
        check_positive("integrator.atol", self.atol)?;
        check_positive("integrator.min_step", self.min_step)?;
        check_positive("integrator.near_wire_displacement", self.near_wire_displacement)?;
        check_positive("integrator.near_wire_range", self.near_wire_range)
    }
}

/// Optional overrides for the run limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    /// Default: ten mean transit times.
    pub t_max: Option<f64>,
    /// Default: `t_max / 2000`.
    pub sample_interval: Option<f64>,
    /// Capture radius is `multiplier * (a + R_h)`.
    pub capture_radius_multiplier: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            t_max: None,
            sample_interval: None,
            capture_radius_multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedLimits {
    pub t_max: f64,
    pub sample_interval: f64,
}

/// The complete physical operating point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub channel: ChannelGeometry,
    pub fluid: FluidConfig,
    pub field: FieldConfig,
    pub wires: WireArray,
    pub integrator: IntegratorSettings,
    pub limits: Limits,
}

impl Scenario {
    pub fn mean_velocity(&self) -> f64 {
        mean_velocity(self.fluid.flow_rate(), &self.channel)
    }

    pub fn resolved_limits(&self) -> ResolvedLimits {
        let t_max = self
            .limits
            .t_max
            .unwrap_or(10.0 * self.channel.length() / self.mean_velocity());
        ResolvedLimits {
            t_max,
            sample_interval: self.limits.sample_interval.unwrap_or(t_max / 2000.0),
        }
    }
}

/// `Q / (W H)`.
pub fn mean_velocity(flow_rate: f64, geom: &ChannelGeometry) -> f64 {
    flow_rate / (geom.width() * geom.depth())
}

/// Plane Poiseuille profile `6 v̄ (z/H)(1 - z/H)`.
pub fn poiseuille_velocity(z: f64, depth: f64, v_mean: f64) -> Result<f64, TransportError> {
    if !(0.0..=depth).contains(&z) {
        return Err(TransportError::OutOfChannel { z, depth });
    }
    let u = z / depth;
    Ok(6.0 * v_mean * u * (1.0 - u))
}

/// Stokes mobility `1/(6π η R_h)`, m/(N·s).
pub fn drag_mobility(species: &CellSpecies, fluid: &FluidConfig) -> f64 {
    1.0 / (6.0 * std::f64::consts::PI * fluid.viscosity() * species.hydrodynamic_radius)
}

/// Buoyant weight along `z`, N (negative for cells denser than the buffer).
pub fn gravity_force(species: &CellSpecies, fluid: &FluidConfig) -> f64 {
    -(species.density - fluid.density()) * species.magnetics.volume * STANDARD_GRAVITY
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellState {
    pub position: Vector3<f64>,
    pub t: f64,
}

impl CellState {
    pub fn new(x: f64, y: f64, z: f64, t: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Outcome {
    Captured { wire: usize },
    Escaped,
    MaxTimeExceeded,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Captured { wire } => write!(f, "captured:{wire}"),
            Outcome::Escaped => f.write_str("escaped"),
            Outcome::MaxTimeExceeded => f.write_str("max_time_exceeded"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<CellState>,
    pub outcome: Outcome,
    pub terminal: CellState,
    pub steps: usize,
}

impl Trajectory {
    /// CSV with header `t,x,y,z,outcome`; only the terminal row carries an outcome.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,z,outcome\n");
        let row = |s: &CellState, tag: &str| {
            format!(
                "{},{},{},{},{}\n",
                s.t, s.position.x, s.position.y, s.position.z, tag
            )
        };
        for s in &self.samples {
            out.push_str(&row(s, ""));
        }
        out.push_str(&row(&self.terminal, &self.outcome.to_string()));
        out
    }
}

/// A failed integration with whatever was computed before the failure.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct TrajectoryError {
    pub error: TransportError,
    pub partial: Trajectory,
}

/// Precomputed per-species view of a scenario, used for all velocity
/// evaluations of one cell.
#[derive(Debug, Clone)]
pub struct CellDynamics<'a> {
    scenario: &'a Scenario,
    cell: CellMagnetics,
    centers: &'a [Vector2<f64>],
    direction: Vector2<f64>,
    params: KernelParams,
    mobility: f64,
    settling: f64,
    v_mean: f64,
    capture_radius: f64,
    lo: Vector2<f64>,
    hi: Vector2<f64>,
}

impl<'a> CellDynamics<'a> {
    pub fn new(species: &CellSpecies, scenario: &'a Scenario) -> Self {
        let mobility = drag_mobility(species, &scenario.fluid);
        let radius = species.hydrodynamic_radius;
        let ch = &scenario.channel;
        Self {
            scenario,
            cell: species.magnetics,
            centers: scenario.wires.centers(),
            direction: scenario.field.direction(),
            params: scenario.wires.kernel_params(&scenario.field),
            mobility,
            settling: mobility * gravity_force(species, &scenario.fluid),
            v_mean: scenario.mean_velocity(),
            capture_radius: scenario.limits.capture_radius_multiplier
                * (scenario.wires.half_width() + radius),
            lo: Vector2::new(radius, radius),
            hi: Vector2::new(ch.width() - radius, ch.depth() - radius),
        }
    }

    pub fn scenario(&self) -> &Scenario {
        self.scenario
    }

    pub fn capture_radius(&self) -> f64 {
        self.capture_radius
    }

    pub fn mobility(&self) -> f64 {
        self.mobility
    }

    /// Clamp `(y, z)` into the wall contact box.
    pub fn clamp(&self, mut p: Vector3<f64>) -> Vector3<f64> {
        p.y = p.y.clamp(self.lo.x, self.hi.x.max(self.lo.x));
        p.z = p.z.clamp(self.lo.y, self.hi.y.max(self.lo.y));
        p
    }

    /// Magnetic force at a cross-flow point, fast Cartesian form.
    ///
    /// Uses `cos 2φ = (d∥² - d⊥²)/r²` and `sin 2φ = 2 d∥ d⊥ / r²` so no
    /// trigonometric calls are needed per wire.
    pub fn magnetic_force(&self, p: Vector2<f64>) -> Result<Vector2<f64>, MagneticsError> {
        let kp = &self.params;
        let a2 = kp.half_width * kp.half_width;
        let base = -2.0 * kp.contrast * kp.mu_0 * self.cell.delta_chi * self.cell.volume * a2
            * kp.aspect_ratio
            * kp.h0
            * kp.h0;
        if base == 0.0 {
            return Ok(Vector2::zeros());
        }
        let contrast_term = kp.contrast * kp.aspect_ratio * a2;
        let f = self.direction;
        let mut total = Vector2::zeros();
        for (i, c) in self.centers.iter().enumerate() {
            let d = p - c;
            let r2 = d.norm_squared();
            if r2 <= a2 {
                return Err(MagneticsError::ContactWithWire {
                    wire: i,
                    r: r2.sqrt(),
                    a: kp.half_width,
                });
            }
            let along = f.dot(&d);
            let across = f.x * d.y - f.y * d.x;
            let inv_r2 = 1.0 / r2;
            let cos2 = (along * along - across * across) * inv_r2;
            let sin2 = 2.0 * along * across * inv_r2;
            let inv_r = inv_r2.sqrt();
            let pre = base * inv_r2 * inv_r;
            let fr = pre * (contrast_term * inv_r2 + cos2);
            let fphi = pre * sin2;
            // e_r = d/r, e_phi = e_r rotated by +90°.
            total.x += (fr * d.x - fphi * d.y) * inv_r;
            total.y += (fr * d.y + fphi * d.x) * inv_r;
        }
        Ok(total)
    }

    /// Velocity at `position`: Poiseuille advection plus mobility times force.
    pub fn velocity(&self, position: &Vector3<f64>) -> Result<Vector3<f64>, TransportError> {
        let vx = poiseuille_velocity(position.z, self.scenario.channel.depth(), self.v_mean)?;
        let fm = self.magnetic_force(Vector2::new(position.y, position.z))?;
        Ok(Vector3::new(
            vx,
            self.mobility * fm.x,
            self.mobility * fm.y + self.settling,
        ))
    }

    /// Nearest wire and distance from its center.
    pub fn nearest_wire(&self, position: &Vector3<f64>) -> Option<(usize, f64)> {
        let p = Vector2::new(position.y, position.z);
        self.centers
            .iter()
            .enumerate()
            .map(|(i, c)| (i, (p - c).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, d2)| (i, d2.sqrt()))
    }

    fn captured_by(&self, position: &Vector3<f64>) -> Option<usize> {
        self.nearest_wire(position)
            .filter(|&(_, d)| d <= self.capture_radius)
            .map(|(i, _)| i)
    }

    /// Zero the wall-normal velocity components that push into a wall the
    /// cell already touches.
    fn wall_adjusted(&self, p: &Vector3<f64>, mut v: Vector3<f64>) -> Vector3<f64> {
        if (p.y <= self.lo.x && v.y < 0.0) || (p.y >= self.hi.x && v.y > 0.0) {
            v.y = 0.0;
        }
        if (p.z <= self.lo.y && v.z < 0.0) || (p.z >= self.hi.y && v.z > 0.0) {
            v.z = 0.0;
        }
        v
    }
}

/// Velocity of a free cell at `state`.
pub fn net_velocity(
    state: &CellState,
    species: &CellSpecies,
    scenario: &Scenario,
) -> Result<Vector3<f64>, TransportError> {
    CellDynamics::new(species, scenario).velocity(&state.position)
}

/// Result of a single attempted Bogacki–Shampine step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialStep {
    pub position: Vector3<f64>,
    /// Weighted RMS-free max-norm error, accept when `<= 1`.
    pub error_norm: f64,
}

/// One explicit Bogacki–Shampine 3(2) step of size `dt` with stage
/// positions projected into the wall box.
pub fn trial_step(
    dynamics: &CellDynamics<'_>,
    position: &Vector3<f64>,
    k1: &Vector3<f64>,
    dt: f64,
) -> Result<TrialStep, TransportError> {
    let f = |p: Vector3<f64>| dynamics.velocity(&dynamics.clamp(p));
    let k2 = f(position + k1 * (0.5 * dt))?;
    let k3 = f(position + k2 * (0.75 * dt))?;
    let next = position + (k1 * (2.0 / 9.0) + k2 * (1.0 / 3.0) + k3 * (4.0 / 9.0)) * dt;
    let k4 = f(next)?;
    let low = position
        + (k1 * (7.0 / 24.0) + k2 * (1.0 / 4.0) + k3 * (1.0 / 3.0) + k4 * (1.0 / 8.0)) * dt;
    let s = &dynamics.scenario.integrator;
    let mut err: f64 = 0.0;
    for i in 0..3 {
        let scale = s.atol + s.rtol * position[i].abs().max(next[i].abs());
        err = err.max((next[i] - low[i]).abs() / scale);
    }
    Ok(TrialStep {
        position: dynamics.clamp(next),
        error_norm: err,
    })
}

/// An accepted adaptive step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptedStep {
    pub state: CellState,
    pub dt: f64,
    pub dt_next: f64,
}

const SAFETY: f64 = 0.9;
const MAX_GROWTH: f64 = 5.0;
const MIN_SHRINK: f64 = 0.2;

/// Largest step allowed by the near-wire displacement cap, if active.
pub fn displacement_cap(dynamics: &CellDynamics<'_>, position: &Vector3<f64>, velocity: &Vector3<f64>) -> Option<f64> {
    let s = &dynamics.scenario.integrator;
    let a = dynamics.scenario.wires.half_width();
    let (_, d) = dynamics.nearest_wire(position)?;
    if d - dynamics.capture_radius > s.near_wire_range * a {
        return None;
    }
    let v = dynamics.wall_adjusted(position, *velocity);
    let transverse = v.y.hypot(v.z);
    (transverse > 0.0).then(|| s.near_wire_displacement * a / transverse)
}

/// Take one adaptive step starting with trial size `dt`, at most `dt_limit`.
///
/// Rejected trials shrink the step; a step below `min_step` is a stiffness
/// failure. Contact with a wire inside a stage also counts as a rejection.
pub fn step_adaptive(
    dynamics: &CellDynamics<'_>,
    state: &CellState,
    dt: f64,
    dt_limit: f64,
) -> Result<AcceptedStep, TransportError> {
    let s = &dynamics.scenario.integrator;
    let k1 = dynamics.velocity(&state.position)?;
    let mut dt = dt.min(dt_limit);
    if let Some(cap) = displacement_cap(dynamics, &state.position, &k1) {
        dt = dt.min(cap);
    }
    loop {
        if dt < s.min_step && dt < dt_limit {
            return Err(TransportError::Stiffness {
                dt,
                t: state.t,
                x: state.position.x,
                y: state.position.y,
                z: state.position.z,
            });
        }
        match trial_step(dynamics, &state.position, &k1, dt) {
            Ok(trial) if trial.error_norm <= 1.0 => {
                let growth = if trial.error_norm == 0.0 {
                    MAX_GROWTH
                } else {
                    (SAFETY * trial.error_norm.powf(-1.0 / 3.0)).clamp(MIN_SHRINK, MAX_GROWTH)
                };
                return Ok(AcceptedStep {
                    state: CellState {
                        position: trial.position,
                        t: state.t + dt,
                    },
                    dt,
                    dt_next: dt * growth,
                });
            }
            Ok(trial) => {
                dt *= (SAFETY * trial.error_norm.powf(-1.0 / 3.0)).clamp(MIN_SHRINK, 1.0);
            }
            Err(TransportError::Magnetics(MagneticsError::ContactWithWire { .. })) => {
                dt *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Follow one cell from `initial` until it is captured, leaves the channel
/// or runs out of time.
pub fn simulate_trajectory(
    initial: CellState,
    species: &CellSpecies,
    scenario: &Scenario,
    limits: &ResolvedLimits,
) -> Result<Trajectory, TrajectoryError> {
    let dynamics = CellDynamics::new(species, scenario);
    integrate(&dynamics, initial, limits, true)
}

/// Like [`simulate_trajectory`] but without keeping intermediate samples.
pub fn classify_trajectory(
    initial: CellState,
    species: &CellSpecies,
    scenario: &Scenario,
    limits: &ResolvedLimits,
) -> Result<Trajectory, TrajectoryError> {
    let dynamics = CellDynamics::new(species, scenario);
    integrate(&dynamics, initial, limits, false)
}

fn integrate(
    dynamics: &CellDynamics<'_>,
    initial: CellState,
    limits: &ResolvedLimits,
    keep_samples: bool,
) -> Result<Trajectory, TrajectoryError> {
    let length = dynamics.scenario.channel.length();
    let mut state = CellState {
        position: dynamics.clamp(initial.position),
        t: initial.t,
    };
    let mut samples = Vec::new();
    let mut next_sample = state.t;
    let record = |samples: &mut Vec<CellState>, from: &CellState, to: &CellState, next: &mut f64, inclusive: bool| {
        if !keep_samples {
            return;
        }
        while *next < to.t || (inclusive && *next <= to.t) {
            let w = if to.t > from.t { (*next - from.t) / (to.t - from.t) } else { 0.0 };
            samples.push(CellState {
                position: from.position + (to.position - from.position) * w,
                t: *next,
            });
            *next = samples.len() as f64 * limits.sample_interval + initial.t;
        }
    };
    let finish = |samples: Vec<CellState>, terminal: CellState, outcome: Outcome, steps: usize| {
        let mut samples = samples;
        while samples.last().is_some_and(|s| s.t >= terminal.t) {
            samples.pop();
        }
        Trajectory {
            samples,
            outcome,
            terminal,
            steps,
        }
    };

    if let Some(wire) = dynamics.captured_by(&state.position) {
        return Ok(finish(Vec::new(), state, Outcome::Captured { wire }, 0));
    }

    let t_end = initial.t + limits.t_max;
    let mut dt = initial_step(dynamics, &state, limits);
    let mut steps = 0;
    loop {
        if state.t >= t_end {
            return Ok(finish(samples, state, Outcome::MaxTimeExceeded, steps));
        }
        let step = match step_adaptive(dynamics, &state, dt, t_end - state.t) {
            Ok(s) => s,
            Err(error) => {
                return Err(TrajectoryError {
                    error,
                    partial: finish(samples, state, Outcome::MaxTimeExceeded, steps),
                })
            }
        };
        steps += 1;
        let mut next = step.state;
        // Snap to the end time when the step was limited by it.
        if t_end - next.t <= 1e-12 * t_end.abs().max(1.0) {
            next.t = t_end;
        }
        if next.position.x >= length {
            let w = (length - state.position.x) / (next.position.x - state.position.x);
            let terminal = CellState {
                position: state.position + (next.position - state.position) * w,
                t: state.t + (next.t - state.t) * w,
            };
            record(&mut samples, &state, &terminal, &mut next_sample, false);
            return Ok(finish(samples, terminal, Outcome::Escaped, steps));
        }
        record(&mut samples, &state, &next, &mut next_sample, false);
        if let Some(wire) = dynamics.captured_by(&next.position) {
            return Ok(finish(samples, next, Outcome::Captured { wire }, steps));
        }
        state = next;
        dt = step.dt_next;
    }
}

fn initial_step(dynamics: &CellDynamics<'_>, state: &CellState, limits: &ResolvedLimits) -> f64 {
    let a = dynamics.scenario.wires.half_width();
    match dynamics.velocity(&state.position) {
        Ok(v) if v.norm() > 0.0 => (a / v.norm()).min(limits.t_max),
        _ => limits.t_max * 1e-3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magnetics::{MagneticMaterial, WireLayout, MU_0};
    use approx::assert_relative_eq;

    pub(crate) fn quiet_scenario() -> Scenario {
        let material = MagneticMaterial::new(600.0 * MU_0, MU_0, None).unwrap();
        Scenario {
            channel: ChannelGeometry::new(60e-6, 1e-3, 5e-3).unwrap(),
            fluid: FluidConfig::new(1e-3, 1000.0, 0.5e-6 / 3600.0).unwrap(),
            field: FieldConfig::new(0.0, Vector2::new(1.0, 0.0)).unwrap(),
            wires: WireArray::new(
                1e-6,
                1.0,
                material,
                WireLayout::Lattice { pitch: 10e-6, count: 99, center_y: 0.5e-3, z: 1e-6 },
            )
            .unwrap(),
            integrator: IntegratorSettings::default(),
            limits: Limits::default(),
        }
    }

    fn neutral(species: &CellSpecies, fluid: &FluidConfig) -> CellSpecies {
        CellSpecies { density: fluid.density(), ..species.clone() }
    }

    #[test]
    fn mean_velocity_example() {
        let g = ChannelGeometry::new(60e-6, 1e-3, 1e-2).unwrap();
        let q = 0.5e-6 / 3600.0;
        assert_relative_eq!(q, 1.38889e-10, max_relative = 1e-5);
        assert_relative_eq!(mean_velocity(q, &g), 2.3148e-3, max_relative = 1e-4);
        assert_relative_eq!(mean_velocity(2.0 * q, &g), 2.0 * mean_velocity(q, &g));
        let wide = ChannelGeometry::new(60e-6, 2e-3, 1e-2).unwrap();
        assert_relative_eq!(mean_velocity(q, &wide), 0.5 * mean_velocity(q, &g));
    }

    #[test]
    fn poiseuille_profile() {
        assert_eq!(poiseuille_velocity(0.0, 60e-6, 1.0).unwrap(), 0.0);
        assert_eq!(poiseuille_velocity(60e-6, 60e-6, 1.0).unwrap(), 0.0);
        assert_relative_eq!(poiseuille_velocity(30e-6, 60e-6, 1.0).unwrap(), 1.5);
        assert!(poiseuille_velocity(-1e-9, 60e-6, 1.0).is_err());
        assert!(poiseuille_velocity(61e-6, 60e-6, 1.0).is_err());
    }

    #[test]
    fn mobility_example() {
        let fluid = FluidConfig::new(1e-3, 1000.0, 1e-10).unwrap();
        let rbc = CellSpecies::rbc_deoxy();
        let b = drag_mobility(&rbc, &fluid);
        assert_relative_eq!(1.0 / b, 6.597e-8, max_relative = 1e-3);
        assert_relative_eq!(b, 1.516e7, max_relative = 1e-3);
        let thick = FluidConfig::new(2e-3, 1000.0, 1e-10).unwrap();
        assert_relative_eq!(drag_mobility(&rbc, &thick), 0.5 * b);
        let big = rbc.with_radius(7e-6);
        assert_relative_eq!(drag_mobility(&big, &fluid), 0.5 * b);
    }

    #[test]
    fn gravity_example() {
        let fluid = FluidConfig::new(1e-3, 1000.0, 1e-10).unwrap();
        let mut rbc = CellSpecies::rbc_deoxy();
        assert_relative_eq!(rbc.magnetics.volume, 1.7959e-16, max_relative = 1e-4);
        assert_relative_eq!(gravity_force(&rbc, &fluid), -1.761e-13, max_relative = 1e-3);
        rbc.density = 1000.0;
        assert_eq!(gravity_force(&rbc, &fluid), 0.0);
        rbc.density = 900.0;
        assert!(gravity_force(&rbc, &fluid) > 0.0);
    }

    #[test]
    fn settling_velocity_without_field() {
        let sc = quiet_scenario();
        let rbc = CellSpecies::rbc_deoxy();
        let s = CellState::new(0.0, 0.5e-3, 30e-6, 0.0);
        let v = net_velocity(&s, &rbc, &sc).unwrap();
        let b = drag_mobility(&rbc, &sc.fluid);
        assert_relative_eq!(v.z, b * gravity_force(&rbc, &sc.fluid), max_relative = 1e-14);
        assert_eq!(v.y, 0.0);
        let neutral = neutral(&rbc, &sc.fluid);
        let v = net_velocity(&s, &neutral, &sc).unwrap();
        assert_eq!(v, Vector3::new(1.5 * sc.mean_velocity(), 0.0, 0.0));
    }

    #[test]
    fn fast_force_matches_polar_composition() {
        let mut sc = quiet_scenario();
        sc.field = FieldConfig::new(0.2, Vector2::new(0.6, 0.8)).unwrap();
        let rbc = CellSpecies::rbc_deoxy();
        let dynamics = CellDynamics::new(&rbc, &sc);
        for (y, z) in [(0.5e-3, 5e-6), (0.503e-3, 3.7e-6), (0.2e-3, 20e-6), (0.0102e-3, 4e-6)] {
            let p = Vector2::new(y, z);
            let fast = dynamics.magnetic_force(p).unwrap();
            let reference = crate::magnetics::superpose_forces(p, &rbc.magnetics, &sc.wires, &sc.field).unwrap();
            assert!((fast - reference).norm() <= 1e-12 * reference.norm(), "{fast} vs {reference}");
        }
    }

    #[test]
    fn capture_at_start_is_immediate() {
        let sc = quiet_scenario();
        let rbc = CellSpecies::rbc_deoxy();
        let center = sc.wires.centers()[10];
        let s = CellState::new(0.0, center.x + 1e-6, rbc.hydrodynamic_radius, 0.0);
        let t = simulate_trajectory(s, &rbc, &sc, &sc.resolved_limits()).unwrap();
        assert_eq!(t.outcome, Outcome::Captured { wire: 10 });
        assert!(t.samples.is_empty());
        assert_eq!(t.terminal.t, 0.0);
    }

    #[test]
    fn midplane_transit_time() {
        let sc = quiet_scenario();
        let rbc = neutral(&CellSpecies::rbc_deoxy(), &sc.fluid);
        let s = CellState::new(0.0, 0.5e-3, 30e-6, 0.0);
        let t = simulate_trajectory(s, &rbc, &sc, &sc.resolved_limits()).unwrap();
        assert_eq!(t.outcome, Outcome::Escaped);
        let expected = sc.channel.length() / (1.5 * sc.mean_velocity());
        assert_relative_eq!(t.terminal.t, expected, max_relative = 1e-9);
        assert_relative_eq!(t.terminal.position.x, sc.channel.length(), max_relative = 1e-12);
        assert_eq!(t.terminal.position.z, 30e-6);
        assert!(t.samples.windows(2).all(|w| w[0].t < w[1].t));
        assert!(t.samples.last().unwrap().t < t.terminal.t);
    }

    #[test]
    fn time_limit_yields_timeout() {
        let mut sc = quiet_scenario();
        sc.limits.t_max = Some(0.1);
        let rbc = neutral(&CellSpecies::rbc_deoxy(), &sc.fluid);
        let s = CellState::new(0.0, 0.5e-3, 30e-6, 0.0);
        let t = simulate_trajectory(s, &rbc, &sc, &sc.resolved_limits()).unwrap();
        assert_eq!(t.outcome, Outcome::MaxTimeExceeded);
        assert_relative_eq!(t.terminal.t, 0.1, max_relative = 1e-12);
    }

    #[test]
    fn csv_has_outcome_on_terminal_row_only() {
        let sc = quiet_scenario();
        let rbc = neutral(&CellSpecies::rbc_deoxy(), &sc.fluid);
        let t = simulate_trajectory(CellState::new(0.0, 0.5e-3, 30e-6, 0.0), &rbc, &sc, &sc.resolved_limits()).unwrap();
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,x,y,z,outcome"));
        let rows: Vec<_> = lines.collect();
        assert_eq!(rows.len(), t.samples.len() + 1);
        assert!(rows[..rows.len() - 1].iter().all(|r| r.ends_with(',')));
        assert!(rows.last().unwrap().ends_with(",escaped"));
    }

    #[test]
    fn stiffness_is_reported_with_partial_trajectory() {
        let mut sc = quiet_scenario();
        sc.integrator.min_step = 1e3;
        sc.limits.t_max = Some(1e6);
        let rbc = CellSpecies::rbc_deoxy();
        let err = simulate_trajectory(CellState::new(0.0, 0.5e-3, 20e-6, 0.0), &rbc, &sc, &sc.resolved_limits())
            .unwrap_err();
        assert!(matches!(err.error, TransportError::Stiffness { .. }));
        assert_eq!(err.partial.outcome, Outcome::MaxTimeExceeded);
    }
}
