//! Quantity strings such as `"0.5 ml/h"` or `"60 um"`, normalized to SI.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Length,
    Volume,
    Time,
    FlowRate,
    FluxDensity,
    Viscosity,
    Density,
    Magnetization,
    Permeability,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Dimension::Length => "length",
            Dimension::Volume => "volume",
            Dimension::Time => "time",
            Dimension::FlowRate => "flow rate",
            Dimension::FluxDensity => "magnetic flux density",
            Dimension::Viscosity => "dynamic viscosity",
            Dimension::Density => "mass density",
            Dimension::Magnetization => "magnetization",
            Dimension::Permeability => "permeability",
        };
        f.write_str(s)
    }
}

const MU_0: f64 = crate::magnetics::MU_0;

// (symbol, dimension, numerator, denominator): SI = value * num / den.
// Denominators are exact powers of ten so decimal inputs normalize cleanly.
const UNITS: &[(&str, Dimension, f64, f64)] = &[
    ("m", Dimension::Length, 1.0, 1.0),
    ("cm", Dimension::Length, 1.0, 1e2),
    ("mm", Dimension::Length, 1.0, 1e3),
    ("um", Dimension::Length, 1.0, 1e6),
    ("nm", Dimension::Length, 1.0, 1e9),
    ("m^3", Dimension::Volume, 1.0, 1.0),
    ("um^3", Dimension::Volume, 1.0, 1e18),
    ("fl", Dimension::Volume, 1.0, 1e18),
    ("pl", Dimension::Volume, 1.0, 1e15),
    ("s", Dimension::Time, 1.0, 1.0),
    ("ms", Dimension::Time, 1.0, 1e3),
    ("min", Dimension::Time, 60.0, 1.0),
    ("h", Dimension::Time, 3600.0, 1.0),
    ("m^3/s", Dimension::FlowRate, 1.0, 1.0),
    ("ml/h", Dimension::FlowRate, 1.0, 3.6e9),
    ("ml/min", Dimension::FlowRate, 1.0, 6e7),
    ("ul/h", Dimension::FlowRate, 1.0, 3.6e12),
    ("ul/min", Dimension::FlowRate, 1.0, 6e10),
    ("t", Dimension::FluxDensity, 1.0, 1.0),
    ("mt", Dimension::FluxDensity, 1.0, 1e3),
    ("pa*s", Dimension::Viscosity, 1.0, 1.0),
    ("pa s", Dimension::Viscosity, 1.0, 1.0),
    ("mpa*s", Dimension::Viscosity, 1.0, 1e3),
    ("mpa s", Dimension::Viscosity, 1.0, 1e3),
    ("cp", Dimension::Viscosity, 1.0, 1e3),
    ("kg/m^3", Dimension::Density, 1.0, 1.0),
    ("g/ml", Dimension::Density, 1e3, 1.0),
    ("g/cm^3", Dimension::Density, 1e3, 1.0),
    ("a/m", Dimension::Magnetization, 1.0, 1.0),
    ("ka/m", Dimension::Magnetization, 1e3, 1.0),
    ("h/m", Dimension::Permeability, 1.0, 1.0),
    ("mu0", Dimension::Permeability, MU_0, 1.0),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnitError {
    Malformed(String),
    UnknownUnit(String),
    Mismatch { unit: String, found: Dimension, expected: Dimension },
}

impl fmt::Display for UnitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitError::Malformed(s) => write!(f, "cannot parse quantity {s:?}"),
            UnitError::UnknownUnit(u) => write!(f, "unknown unit {u:?}"),
            UnitError::Mismatch { unit, found, expected } => {
                write!(f, "unit mismatch: {unit:?} is a {found}, expected a {expected}")
            }
        }
    }
}

fn canonical_unit(unit: &str) -> String {
    unit.trim()
        .replace(['µ', 'μ'], "u")
        .replace('³', "^3")
        .replace('·', "*")
        .to_ascii_lowercase()
}

/// Parse `"<number> <unit>"` as a quantity of dimension `expected`, in SI.
///
/// A string without a unit is taken to be SI already.
pub fn parse_quantity(text: &str, expected: Dimension) -> Result<f64, UnitError> {
    let text = text.trim();
    let split = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .rev()
        .find(|&i| i > 0 && text[..i].trim_end().parse::<f64>().is_ok())
        .ok_or_else(|| UnitError::Malformed(text.to_string()))?;
    let value: f64 = text[..split].trim_end().parse().expect("checked above");
    let unit = text[split..].trim();
    if unit.is_empty() {
        return Ok(value);
    }
    let key = canonical_unit(unit);
    let (_, dim, num, den) = UNITS
        .iter()
        .find(|(sym, _, _, _)| *sym == key)
        .ok_or_else(|| UnitError::UnknownUnit(unit.to_string()))?;
    if *dim != expected {
        return Err(UnitError::Mismatch {
            unit: unit.to_string(),
            found: *dim,
            expected,
        });
    }
    Ok(value * num / den)
}
