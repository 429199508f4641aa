//! Magnetic force on a cell near magnetized ferromagnetic wires.
//!
//! A long wire of half-width `a` sitting in a uniform transverse field `H0`
//! distorts the field around it. A cell with susceptibility contrast `Δχ`
//! and volume `V` then feels
//!
//! ```text
//! F_r   = -2 k μ0 Δχ V (a²/r³) [k γ (a²/r²) + cos 2φ] γ H0²
//! F_phi = -2 k μ0 Δχ V (a²/r³) sin 2φ γ H0²
//! ```
//!
//! with `k = (μw - μb)/(μw + μb)` the wire/buffer contrast, `γ = w/h` the
//! aspect correction and `φ` measured from the external field direction.
//! Once the wire saturates the contrast is clamped to `Ms/(2 H0)`.
//!
//! Wires are modelled as infinitely long and parallel to the flow axis; the
//! cross-flow plane is `(y, z)`. Mutual magnetization between wires is
//! neglected, so array forces are plain superpositions.

use std::f64::consts::PI;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vacuum permeability, H/m.
pub const MU_0: f64 = 4.0e-7 * PI;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MagneticsError {
    #[error("invalid {name}: {value} ({reason})")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    /// The evaluation point lies on or inside the wire (`r <= a`).
    #[error("contact with wire {wire}: r = {r:e} m <= a = {a:e} m")]
    ContactWithWire { wire: usize, r: f64, a: f64 },
    #[error("oracle step too close to the wire surface: r = {r:e} m, need r > {min:e} m")]
    OracleDomain { r: f64, min: f64 },
    #[error("degenerate position at the wire axis (r = 0)")]
    DegeneratePosition,
}

fn positive(name: &'static str, value: f64) -> Result<f64, MagneticsError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(MagneticsError::InvalidParameter {
            name,
            value,
            reason: "must be positive and finite",
        })
    }
}

/// Wire and buffer permeabilities plus an optional saturation magnetization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MagneticMaterial {
    mu_wire: f64,
    mu_buffer: f64,
    saturation_magnetization: Option<f64>,
}

impl MagneticMaterial {
    pub fn new(
        mu_wire: f64,
        mu_buffer: f64,
        saturation_magnetization: Option<f64>,
    ) -> Result<Self, MagneticsError> {
        positive("mu_wire", mu_wire)?;
        positive("mu_buffer", mu_buffer)?;
        if let Some(ms) = saturation_magnetization {
            positive("saturation_magnetization", ms)?;
        }
        Ok(Self {
            mu_wire,
            mu_buffer,
            saturation_magnetization,
        })
    }

    /// Nickel (μr = 600, Ms = 4.8e5 A/m) in a water-like buffer.
    ///
    /// Literature-sourced defaults, not measured device values.
    pub fn nickel_in_water() -> Self {
        Self {
            mu_wire: 600.0 * MU_0,
            mu_buffer: MU_0,
            saturation_magnetization: Some(4.8e5),
        }
    }

    pub fn mu_wire(&self) -> f64 {
        self.mu_wire
    }

    pub fn mu_buffer(&self) -> f64 {
        self.mu_buffer
    }

    pub fn saturation_magnetization(&self) -> Option<f64> {
        self.saturation_magnetization
    }

    /// `k = (μw - μb)/(μw + μb)`, always in `(-1, 1)`.
    pub fn contrast_factor(&self) -> f64 {
        (self.mu_wire - self.mu_buffer) / (self.mu_wire + self.mu_buffer)
    }

    /// Contrast with the saturation clamp applied: `min(k, Ms/(2 H0))`.
    ///
    /// Without a saturation magnetization, or at `H0 = 0`, this is the
    /// linear contrast factor.
    pub fn effective_contrast(&self, h0: f64) -> f64 {
        let k = self.contrast_factor();
        match self.saturation_magnetization {
            Some(ms) if h0 > 0.0 => k.min(ms / (2.0 * h0)),
            _ => k,
        }
    }
}

/// Validating form of [`MagneticMaterial::contrast_factor`].
pub fn contrast_factor(mu_wire: f64, mu_buffer: f64) -> Result<f64, MagneticsError> {
    Ok(MagneticMaterial::new(mu_wire, mu_buffer, None)?.contrast_factor())
}

/// External field: flux density `B0` along a unit direction in the `(y, z)` plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldConfig {
    flux_density: f64,
    direction: Vector2<f64>,
}

impl FieldConfig {
    /// The direction is normalized; a zero vector is rejected.
    pub fn new(flux_density: f64, direction: Vector2<f64>) -> Result<Self, MagneticsError> {
        if !(flux_density.is_finite() && flux_density >= 0.0) {
            return Err(MagneticsError::InvalidParameter {
                name: "flux_density",
                value: flux_density,
                reason: "must be non-negative and finite",
            });
        }
        let norm = direction.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(MagneticsError::InvalidParameter {
                name: "field_direction",
                value: norm,
                reason: "must be a non-zero vector",
            });
        }
        Ok(Self {
            flux_density,
            direction: direction / norm,
        })
    }

    pub fn flux_density(&self) -> f64 {
        self.flux_density
    }

    pub fn direction(&self) -> Vector2<f64> {
        self.direction
    }

    /// `H0 = B0 / μ0`, A/m.
    pub fn h0(&self) -> f64 {
        self.flux_density / MU_0
    }
}

/// How wire centers are specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireLayout {
    /// Evenly spaced row, centered on `center_y`, at height `z`.
    Lattice {
        pitch: f64,
        count: usize,
        center_y: f64,
        z: f64,
    },
    Explicit(Vec<[f64; 2]>),
}

impl WireLayout {
    pub fn expand(&self) -> Vec<Vector2<f64>> {
        match self {
            WireLayout::Lattice {
                pitch,
                count,
                center_y,
                z,
            } => {
                let offset = (*count as f64 - 1.0) / 2.0;
                (0..*count)
                    .map(|i| Vector2::new(center_y + (i as f64 - offset) * pitch, *z))
                    .collect()
            }
            WireLayout::Explicit(c) => c.iter().map(|p| Vector2::new(p[0], p[1])).collect(),
        }
    }
}

/// Parallel ferromagnetic wires running along the flow axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WireArray {
    half_width: f64,
    aspect_ratio: f64,
    material: MagneticMaterial,
    layout: WireLayout,
    #[serde(skip)]
    centers: Vec<Vector2<f64>>,
}

impl WireArray {
    pub fn new(
        half_width: f64,
        aspect_ratio: f64,
        material: MagneticMaterial,
        layout: WireLayout,
    ) -> Result<Self, MagneticsError> {
        positive("half_width", half_width)?;
        positive("aspect_ratio", aspect_ratio)?;
        let centers = layout.expand();
        if centers.iter().any(|c| !(c.x.is_finite() && c.y.is_finite())) {
            return Err(MagneticsError::InvalidParameter {
                name: "wire_centers",
                value: f64::NAN,
                reason: "coordinates must be finite",
            });
        }
        // Pairwise separation > 2a. Sort by y so only neighbours in a
        // window need checking.
        let mut sorted = centers.clone();
        sorted.sort_by(|p, q| p.x.total_cmp(&q.x));
        for (i, p) in sorted.iter().enumerate() {
            for q in &sorted[i + 1..] {
                if q.x - p.x > 2.0 * half_width {
                    break;
                }
                let d = (q - p).norm();
                if d <= 2.0 * half_width {
                    return Err(MagneticsError::InvalidParameter {
                        name: "wire_centers",
                        value: d,
                        reason: "wires must be separated by more than 2a",
                    });
                }
            }
        }
        Ok(Self {
            half_width,
            aspect_ratio,
            material,
            layout,
            centers,
        })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.aspect_ratio
    }

    pub fn material(&self) -> &MagneticMaterial {
        &self.material
    }

    pub fn layout(&self) -> &WireLayout {
        &self.layout
    }

    pub fn centers(&self) -> &[Vector2<f64>] {
        &self.centers
    }

    pub fn kernel_params(&self, field: &FieldConfig) -> KernelParams {
        let h0 = field.h0();
        KernelParams {
            half_width: self.half_width,
            aspect_ratio: self.aspect_ratio,
            contrast: self.material.effective_contrast(h0),
            h0,
            mu_0: MU_0,
        }
    }
}

/// Polar position relative to one wire, `phi` measured from the field direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WirePolar {
    pub r: f64,
    pub phi: f64,
}

impl WirePolar {
    /// Normalizes `phi` into `(-π, π]`.
    pub fn new(r: f64, phi: f64) -> Self {
        let mut phi = phi.rem_euclid(2.0 * PI);
        if phi > PI {
            phi -= 2.0 * PI;
        }
        Self { r, phi }
    }

    /// Polar coordinates of `point` around `center` with the angle taken
    /// from `field_direction` (assumed unit) towards the `+90°` rotation of it.
    pub fn from_cartesian(
        point: Vector2<f64>,
        center: Vector2<f64>,
        field_direction: Vector2<f64>,
    ) -> Self {
        let d = point - center;
        let along = field_direction.dot(&d);
        let across = field_direction.x * d.y - field_direction.y * d.x;
        Self {
            r: d.norm(),
            phi: across.atan2(along),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarForce {
    /// Radial component, positive away from the wire.
    pub radial: f64,
    pub azimuthal: f64,
}

/// Magnetic description of a cell relative to the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMagnetics {
    pub delta_chi: f64,
    pub volume: f64,
}

impl CellMagnetics {
    pub fn new(delta_chi: f64, volume: f64) -> Result<Self, MagneticsError> {
        if !delta_chi.is_finite() {
            return Err(MagneticsError::InvalidParameter {
                name: "delta_chi",
                value: delta_chi,
                reason: "must be finite",
            });
        }
        positive("volume", volume)?;
        Ok(Self { delta_chi, volume })
    }
}

/// Everything the single-wire kernel needs besides the cell and position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub half_width: f64,
    pub aspect_ratio: f64,
    /// Effective (possibly saturated) contrast factor.
    pub contrast: f64,
    pub h0: f64,
    pub mu_0: f64,
}

/// The three additive pieces of the single-wire force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceTerms {
    /// Radial `k γ a²/r²` term, ∝ k² H0².
    pub radial_contrast: f64,
    /// Radial `cos 2φ` term, ∝ k H0².
    pub radial_cos: f64,
    /// Azimuthal `sin 2φ` term, ∝ k H0².
    pub azimuthal_sin: f64,
}

impl ForceTerms {
    pub fn total(&self) -> PolarForce {
        PolarForce {
            radial: self.radial_contrast + self.radial_cos,
            azimuthal: self.azimuthal_sin,
        }
    }
}

pub fn wire_force_terms(
    pos: WirePolar,
    cell: &CellMagnetics,
    p: &KernelParams,
) -> Result<ForceTerms, MagneticsError> {
    let a = p.half_width;
    if !(pos.r > a) {
        return Err(MagneticsError::ContactWithWire {
            wire: 0,
            r: pos.r,
            a,
        });
    }
    let a2 = a * a;
    let r2 = pos.r * pos.r;
    let prefactor = -2.0 * p.contrast * p.mu_0 * cell.delta_chi * cell.volume * a2
        / (r2 * pos.r)
        * p.aspect_ratio
        * p.h0
        * p.h0;
    let (sin2, cos2) = double_angle(pos.phi);
    Ok(ForceTerms {
        radial_contrast: prefactor * p.contrast * p.aspect_ratio * a2 / r2,
        radial_cos: prefactor * cos2,
        azimuthal_sin: prefactor * sin2,
    })
}

/// `(sin 2φ, cos 2φ)`, exact on the field axes and their normals.
fn double_angle(phi: f64) -> (f64, f64) {
    let quarter_turns = 2.0 * phi / PI;
    if quarter_turns == quarter_turns.round() {
        if quarter_turns.rem_euclid(2.0) == 0.0 {
            (0.0, 1.0)
        } else {
            (0.0, -1.0)
        }
    } else {
        (2.0 * phi).sin_cos()
    }
}

/// Single-wire force in polar components. Fails with
/// [`MagneticsError::ContactWithWire`] for `r <= a`.
pub fn wire_force_polar(
    pos: WirePolar,
    cell: &CellMagnetics,
    p: &KernelParams,
) -> Result<PolarForce, MagneticsError> {
    wire_force_terms(pos, cell, p).map(|t| t.total())
}

/// Reference force from `μ0 Δχ V ∇(|H|²/2)` using the closed-form field
/// outside a 2D wire, differentiated numerically.
///
/// Independent of [`wire_force_polar`]; agrees with it for `γ = 1`.
/// `fd_step` is the initial radial step; the angular step is `fd_step / r`.
/// Steps are halved with Richardson extrapolation until converged.
pub fn oracle_force_energy_gradient(
    pos: WirePolar,
    cell: &CellMagnetics,
    p: &KernelParams,
    fd_step: f64,
) -> Result<PolarForce, MagneticsError> {
    let min = p.half_width + 2.0 * fd_step;
    if !(pos.r > min) {
        return Err(MagneticsError::OracleDomain { r: pos.r, min });
    }
    let s_of = |r: f64| p.contrast * p.half_width * p.half_width / (r * r);
    let energy = |r: f64, phi: f64| {
        let s = s_of(r);
        let hr = p.h0 * (1.0 + s) * phi.cos();
        let hphi = -p.h0 * (1.0 - s) * phi.sin();
        0.5 * (hr * hr + hphi * hphi)
    };
    let d_dr = richardson(|h| (energy(pos.r + h, pos.phi) - energy(pos.r - h, pos.phi)) / (2.0 * h), fd_step);
    let dphi = fd_step / pos.r;
    let d_dphi = richardson(
        |h| (energy(pos.r, pos.phi + h) - energy(pos.r, pos.phi - h)) / (2.0 * h),
        dphi,
    );
    let scale = p.mu_0 * cell.delta_chi * cell.volume;
    Ok(PolarForce {
        radial: scale * d_dr,
        azimuthal: scale * d_dphi / pos.r,
    })
}

/// Neville-style Richardson tableau over step halvings for a central
/// difference (error series in h²).
fn richardson(f: impl Fn(f64) -> f64, h0: f64) -> f64 {
    const ROWS: usize = 10;
    let mut prev: Vec<f64> = Vec::with_capacity(ROWS);
    let mut best = f(h0);
    let mut best_err = f64::INFINITY;
    let mut h = h0;
    for i in 0..ROWS {
        let mut row = Vec::with_capacity(i + 1);
        row.push(f(h));
        let mut factor = 1.0;
        for j in 1..=i {
            factor *= 4.0;
            let v = row[j - 1] + (row[j - 1] - prev[j - 1]) / (factor - 1.0);
            row.push(v);
        }
        if i > 0 {
            let err = (row[i] - row[i - 1]).abs().max((row[i] - prev[i - 1]).abs());
            if err < best_err {
                best_err = err;
                best = row[i];
            }
            // Roundoff starts to dominate once the error grows again.
            if err > 2.0 * best_err {
                break;
            }
        }
        prev = row;
        h *= 0.5;
    }
    best
}

/// Rotate a polar force into the `(y, z)` frame.
pub fn polar_to_cartesian_force(
    f: PolarForce,
    pos: WirePolar,
    field_direction: Vector2<f64>,
) -> Result<Vector2<f64>, MagneticsError> {
    if pos.r == 0.0 {
        return Err(MagneticsError::DegeneratePosition);
    }
    let (s, c) = pos.phi.sin_cos();
    let d = field_direction;
    let e_r = Vector2::new(c * d.x - s * d.y, s * d.x + c * d.y);
    let e_phi = Vector2::new(-e_r.y, e_r.x);
    Ok(e_r * f.radial + e_phi * f.azimuthal)
}

/// Sum of single-wire forces over the whole array at `point`.
///
/// Contact with any wire is reported with that wire's index.
pub fn superpose_forces(
    point: Vector2<f64>,
    cell: &CellMagnetics,
    array: &WireArray,
    field: &FieldConfig,
) -> Result<Vector2<f64>, MagneticsError> {
    let params = array.kernel_params(field);
    superpose_with(point, cell, array.centers(), field.direction(), &params)
}

pub(crate) fn superpose_with(
    point: Vector2<f64>,
    cell: &CellMagnetics,
    centers: &[Vector2<f64>],
    direction: Vector2<f64>,
    params: &KernelParams,
) -> Result<Vector2<f64>, MagneticsError> {
    let mut total = Vector2::zeros();
    for (i, c) in centers.iter().enumerate() {
        let pos = WirePolar::from_cartesian(point, *c, direction);
        let f = wire_force_polar(pos, cell, params).map_err(|e| match e {
            MagneticsError::ContactWithWire { r, a, .. } => {
                MagneticsError::ContactWithWire { wire: i, r, a }
            }
            other => other,
        })?;
        total += polar_to_cartesian_force(f, pos, direction)?;
    }
    Ok(total)
}
