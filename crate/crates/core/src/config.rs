//! Scenario documents: JSON with unit-carrying strings, normalized to SI.
//!
//! String values carry units (`"60 um"`, `"0.5 ml/h"`, `"0.2 T"`); bare
//! numbers are SI. Unknown keys are rejected. [`ScenarioConfig::to_json`]
//! writes the normalized form, which loads back to an identical config.

use nalgebra::Vector2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ensemble::Population;
use crate::magnetics::{FieldConfig, MagneticMaterial, WireArray, WireLayout};
use crate::transport::{
    sphere_volume, CellSpecies, ChannelGeometry, FluidConfig, IntegratorSettings, Limits, Scenario,
};
use crate::units::{parse_quantity, Dimension};
use crate::magnetics::CellMagnetics;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// The bundled device-scale scenario.
pub const DEFAULT_SCENARIO: &str = include_str!("../scenarios/default.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("malformed JSON: {0}")]
    Syntax(String),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: {message}")]
    Units { path: String, message: String },
    #[error("parameter path {0:?} does not resolve in the scenario")]
    UnresolvedPath(String),
}

impl ConfigError {
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Schema { path, .. }
            | ConfigError::Invalid { path, .. }
            | ConfigError::Units { path, .. } => Some(path),
            _ => None,
        }
    }
}

/// A quantity as written in a document: bare SI number or unit string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Quantity {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "Q: Deserialize<'de>"))]
pub struct ChannelSection<Q> {
    pub depth: Q,
    pub width: Q,
    pub length: Q,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "Q: Deserialize<'de>"))]
pub struct FluidSection<Q> {
    pub viscosity: Q,
    pub density: Q,
    pub flow_rate: Q,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "Q: Deserialize<'de>"))]
pub struct FieldSection<Q> {
    pub flux_density: Q,
    /// `(y, z)` direction of the external field.
    pub direction: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "Q: Deserialize<'de>"))]
pub struct MaterialSection<Q> {
    pub mu_wire: Q,
    pub mu_buffer: Q,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saturation_magnetization: Option<Q>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "Q: Deserialize<'de>"))]
pub struct LatticeSection<Q> {
    pub pitch: Q,
    pub count: usize,
    /// Defaults to the channel mid-width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_y: Option<Q>,
    /// Defaults to the half-width (dots resting on the floor).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Q>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "Q: Deserialize<'de>"))]
pub struct WiresSection<Q> {
    pub half_width: Q,
    #[serde(default = "one")]
    pub aspect_ratio: f64,
    pub material: MaterialSection<Q>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<LatticeSection<Q>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<[Q; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "Q: Deserialize<'de>"))]
pub struct SpeciesSection<Q> {
    pub label: String,
    pub delta_chi: f64,
    pub radius: Q,
    /// Defaults to the volume of a sphere of `radius`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<Q>,
    pub density: Q,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSection {
    pub species: String,
    pub count: usize,
    #[serde(default)]
    pub radius_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "Q: Deserialize<'de>"))]
pub struct LimitsSection<Q> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<Q>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_interval: Option<Q>,
    #[serde(default = "one")]
    pub capture_radius_multiplier: f64,
    #[serde(default = "default_trajectory_cap")]
    pub max_trajectories_per_species: usize,
}

impl<Q> Default for LimitsSection<Q> {
    fn default() -> Self {
        Self {
            t_max: None,
            sample_interval: None,
            capture_radius_multiplier: 1.0,
            max_trajectories_per_species: default_trajectory_cap(),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_trajectory_cap() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "Q: Deserialize<'de>"))]
pub struct Document<Q> {
    pub schema_version: u32,
    pub seed: u64,
    pub channel: ChannelSection<Q>,
    pub fluid: FluidSection<Q>,
    pub field: FieldSection<Q>,
    pub wires: WiresSection<Q>,
    pub species: Vec<SpeciesSection<Q>>,
    pub populations: Vec<PopulationSection>,
    #[serde(default)]
    pub integrator: IntegratorSettings,
    #[serde(default)]
    pub limits: LimitsSection<Q>,
}

/// A validated, SI-normalized experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    document: Document<f64>,
    scenario: Scenario,
    populations: Vec<Population>,
}

impl ScenarioConfig {
    pub fn document(&self) -> &Document<f64> {
        &self.document
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn populations(&self) -> &[Population] {
        &self.populations
    }

    pub fn seed(&self) -> u64 {
        self.document.seed
    }

    pub fn trajectory_cap(&self) -> usize {
        self.document.limits.max_trajectories_per_species
    }

    /// The normalized document as a JSON value (keys sorted).
    pub fn to_value(&self) -> Value {
        serde_json::to_value(&self.document).expect("config serialize")
    }

    /// Pretty JSON with sorted keys.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_value()).expect("config serialize");
        s.push('\n');
        s
    }

    /// Replace the value at a dotted path (`fluid.flow_rate`, `species.0.delta_chi`)
    /// and reload. The path must exist in the normalized document.
    pub fn with_parameter(&self, path: &str, value: Value) -> Result<Self, ConfigError> {
        let mut doc = self.to_value();
        *lookup_mut(&mut doc, path).ok_or_else(|| ConfigError::UnresolvedPath(path.into()))? = value;
        load_value(doc)
    }

    /// Normalized value at a dotted path.
    pub fn parameter(&self, path: &str) -> Result<Value, ConfigError> {
        let mut doc = self.to_value();
        lookup_mut(&mut doc, path)
            .map(|v| v.take())
            .ok_or_else(|| ConfigError::UnresolvedPath(path.into()))
    }
}

fn lookup_mut<'a>(root: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    if path.is_empty() {
        return None;
    }
    path.split('.').try_fold(root, |node, key| match node {
        Value::Object(map) => map.get_mut(key),
        Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
        _ => None,
    })
}

pub fn load_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    load_value(value)
}

pub fn load_value(value: Value) -> Result<ScenarioConfig, ConfigError> {
    if !value.is_object() {
        return Err(ConfigError::Schema {
            path: "$".into(),
            message: "document must be a JSON object".into(),
        });
    }
    let raw: Document<Quantity> = deserialize_with_path(value)?;
    normalize(raw)
}

pub fn default_config() -> ScenarioConfig {
    load_str(DEFAULT_SCENARIO).expect("bundled scenario is valid")
}

fn deserialize_with_path<T: DeserializeOwned>(value: Value) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let mut path = e.path().to_string();
        let message = e.inner().to_string();
        // Name the missing key itself rather than its parent.
        if let Some(rest) = message.strip_prefix("missing field `") {
            if let Some(key) = rest.split('`').next() {
                path = if path == "." { key.to_string() } else { format!("{path}.{key}") };
            }
        }
        ConfigError::Schema { path, message }
    })
}

struct Normalizer;

impl Normalizer {
    fn quantity(&self, q: &Quantity, path: &str, dim: Dimension) -> Result<f64, ConfigError> {
        let v = match q {
            Quantity::Number(v) => *v,
            Quantity::Text(s) => parse_quantity(s, dim).map_err(|e| ConfigError::Units {
                path: path.into(),
                message: e.to_string(),
            })?,
        };
        if !v.is_finite() {
            return Err(invalid(path, "must be finite"));
        }
        Ok(v)
    }

    fn positive(&self, q: &Quantity, path: &str, dim: Dimension) -> Result<f64, ConfigError> {
        let v = self.quantity(q, path, dim)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(invalid(path, &format!("must be positive, got {v}")))
        }
    }
}

fn invalid(path: &str, message: &str) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

fn normalize(raw: Document<Quantity>) -> Result<ScenarioConfig, ConfigError> {
    use Dimension::*;
    let n = Normalizer;
    if raw.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            &format!("unsupported version {}, expected {CONFIG_SCHEMA_VERSION}", raw.schema_version),
        ));
    }

    let channel = ChannelSection {
        depth: n.positive(&raw.channel.depth, "channel.depth", Length)?,
        width: n.positive(&raw.channel.width, "channel.width", Length)?,
        length: n.positive(&raw.channel.length, "channel.length", Length)?,
    };
    let fluid = FluidSection {
        viscosity: n.positive(&raw.fluid.viscosity, "fluid.viscosity", Viscosity)?,
        density: n.positive(&raw.fluid.density, "fluid.density", Density)?,
        flow_rate: n.positive(&raw.fluid.flow_rate, "fluid.flow_rate", FlowRate)?,
    };
    let field = FieldSection {
        flux_density: n.quantity(&raw.field.flux_density, "field.flux_density", FluxDensity)?,
        direction: raw.field.direction,
    };
    if field.flux_density < 0.0 {
        return Err(invalid("field.flux_density", "must be non-negative"));
    }
    let dir = Vector2::from(field.direction);
    if !(dir.norm() - 1.0).abs().le(&1e-9) {
        return Err(invalid("field.direction", &format!("must be a unit vector, |d| = {}", dir.norm())));
    }

    let w = &raw.wires;
    let half_width = n.positive(&w.half_width, "wires.half_width", Length)?;
    if !(w.aspect_ratio.is_finite() && w.aspect_ratio > 0.0) {
        return Err(invalid("wires.aspect_ratio", "must be positive"));
    }
    let material = MaterialSection {
        mu_wire: n.positive(&w.material.mu_wire, "wires.material.mu_wire", Permeability)?,
        mu_buffer: n.positive(&w.material.mu_buffer, "wires.material.mu_buffer", Permeability)?,
        saturation_magnetization: w
            .material
            .saturation_magnetization
            .as_ref()
            .map(|q| n.positive(q, "wires.material.saturation_magnetization", Magnetization))
            .transpose()?,
    };
    let (lattice, centers) = match (&w.lattice, &w.centers) {
        (Some(l), None) => {
            let lattice = LatticeSection {
                pitch: n.positive(&l.pitch, "wires.lattice.pitch", Length)?,
                count: l.count,
                center_y: Some(match &l.center_y {
                    Some(q) => n.quantity(q, "wires.lattice.center_y", Length)?,
                    None => 0.5 * channel.width,
                }),
                z: Some(match &l.z {
                    Some(q) => n.quantity(q, "wires.lattice.z", Length)?,
                    None => half_width,
                }),
            };
            (Some(lattice), None)
        }
        (None, Some(c)) => {
            let centers = c
                .iter()
                .enumerate()
                .map(|(i, [y, z])| {
                    Ok([
                        n.quantity(y, &format!("wires.centers.{i}.0"), Length)?,
                        n.quantity(z, &format!("wires.centers.{i}.1"), Length)?,
                    ])
                })
                .collect::<Result<Vec<_>, ConfigError>>()?;
            (None, Some(centers))
        }
        _ => {
            return Err(ConfigError::Schema {
                path: "wires".into(),
                message: "exactly one of `lattice` or `centers` is required".into(),
            })
        }
    };
    let wires = WiresSection {
        half_width,
        aspect_ratio: w.aspect_ratio,
        material,
        lattice,
        centers,
    };

    let mut species = Vec::with_capacity(raw.species.len());
    for (i, s) in raw.species.iter().enumerate() {
        let p = |k: &str| format!("species.{i}.{k}");
        if s.label.is_empty() {
            return Err(invalid(&p("label"), "must not be empty"));
        }
        if raw.species[..i].iter().any(|o| o.label == s.label) {
            return Err(invalid(&p("label"), &format!("duplicate label {:?}", s.label)));
        }
        if !s.delta_chi.is_finite() {
            return Err(invalid(&p("delta_chi"), "must be finite"));
        }
        let radius = n.positive(&s.radius, &p("radius"), Length)?;
        let volume = match &s.volume {
            Some(q) => n.positive(q, &p("volume"), Volume)?,
            None => sphere_volume(radius),
        };
        species.push(SpeciesSection {
            label: s.label.clone(),
            delta_chi: s.delta_chi,
            radius,
            volume: Some(volume),
            density: n.positive(&s.density, &p("density"), Density)?,
        });
    }
    if species.is_empty() {
        return Err(invalid("species", "at least one species is required"));
    }
    for (i, pop) in raw.populations.iter().enumerate() {
        if !species.iter().any(|s| s.label == pop.species) {
            return Err(invalid(
                &format!("populations.{i}.species"),
                &format!("unknown species {:?}", pop.species),
            ));
        }
        if !(pop.radius_spread.is_finite() && pop.radius_spread >= 0.0) {
            return Err(invalid(&format!("populations.{i}.radius_spread"), "must be >= 0"));
        }
    }

    let l = &raw.limits;
    let limits = LimitsSection {
        t_max: l
            .t_max
            .as_ref()
            .map(|q| n.positive(q, "limits.t_max", Time))
            .transpose()?,
        sample_interval: l
            .sample_interval
            .as_ref()
            .map(|q| n.positive(q, "limits.sample_interval", Time))
            .transpose()?,
        capture_radius_multiplier: l.capture_radius_multiplier,
        max_trajectories_per_species: l.max_trajectories_per_species,
    };
    if !(limits.capture_radius_multiplier.is_finite() && limits.capture_radius_multiplier > 0.0) {
        return Err(invalid("limits.capture_radius_multiplier", "must be positive"));
    }
    raw.integrator.validate().map_err(|e| invalid("integrator", &e.to_string()))?;

    let document = Document {
        schema_version: raw.schema_version,
        seed: raw.seed,
        channel,
        fluid,
        field,
        wires,
        species,
        populations: raw.populations,
        integrator: raw.integrator,
        limits,
    };
    build(document)
}

fn build(document: Document<f64>) -> Result<ScenarioConfig, ConfigError> {
    let d = &document;
    let channel = ChannelGeometry::new(d.channel.depth, d.channel.width, d.channel.length)
        .map_err(|e| invalid("channel", &e.to_string()))?;
    let fluid = FluidConfig::new(d.fluid.viscosity, d.fluid.density, d.fluid.flow_rate)
        .map_err(|e| invalid("fluid", &e.to_string()))?;
    let field = FieldConfig::new(d.field.flux_density, Vector2::from(d.field.direction))
        .map_err(|e| invalid("field", &e.to_string()))?;
    let m = &d.wires.material;
    let material = MagneticMaterial::new(m.mu_wire, m.mu_buffer, m.saturation_magnetization)
        .map_err(|e| invalid("wires.material", &e.to_string()))?;
    let layout = match (&d.wires.lattice, &d.wires.centers) {
        (Some(l), _) => WireLayout::Lattice {
            pitch: l.pitch,
            count: l.count,
            center_y: l.center_y.expect("normalized"),
            z: l.z.expect("normalized"),
        },
        (None, Some(c)) => WireLayout::Explicit(c.clone()),
        (None, None) => unreachable!("checked during normalization"),
    };
    let wires = WireArray::new(d.wires.half_width, d.wires.aspect_ratio, material, layout)
        .map_err(|e| invalid("wires", &e.to_string()))?;
    let a = wires.half_width();
    if let Some(c) = wires
        .centers()
        .iter()
        .find(|c| c.x < 0.0 || c.x > channel.width() || c.y < -a || c.y > a * (1.0 + 1e-9))
    {
        return Err(invalid(
            "wires",
            &format!("wire center ({:e}, {:e}) m is not on the channel floor", c.x, c.y),
        ));
    }

    let species: Vec<CellSpecies> = d
        .species
        .iter()
        .enumerate()
        .map(|(i, s)| {
            CellSpecies::new(
                s.label.clone(),
                CellMagnetics {
                    delta_chi: s.delta_chi,
                    volume: s.volume.expect("normalized"),
                },
                s.radius,
                s.density,
            )
            .map_err(|e| invalid(&format!("species.{i}"), &e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let populations = d
        .populations
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = species
                .iter()
                .find(|s| s.label == p.species)
                .expect("checked during normalization")
                .clone();
            Population::new(s, p.count, p.radius_spread)
                .map_err(|e| invalid(&format!("populations.{i}"), &e.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let scenario = Scenario {
        channel,
        fluid,
        field,
        wires,
        integrator: d.integrator,
        limits: Limits {
            t_max: d.limits.t_max,
            sample_interval: d.limits.sample_interval,
            capture_radius_multiplier: d.limits.capture_radius_multiplier,
        },
    };
    Ok(ScenarioConfig {
        document,
        scenario,
        populations,
    })
}
