//! Unit-aware scalar parsing for configuration documents.
//!
//! Scalars may be given either as bare numbers in SI base units (meters,
//! seconds, hertz) or as strings carrying a unit suffix, e.g. `"12.5 ns"`,
//! `"61.44 MHz"`, `"2 km"`. A suffix of the wrong dimension is a unit error.

use serde::de::{self, Deserializer, Visitor};
use std::fmt;

/// Marker prefix used to recognise unit failures in deserializer messages.
pub(crate) const UNIT_ERROR_TAG: &str = "unit error:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Length,
    Time,
    Frequency,
}

impl Dimension {
    fn name(self) -> &'static str {
        match self {
            Dimension::Length => "length",
            Dimension::Time => "time",
            Dimension::Frequency => "frequency",
        }
    }

    /// Power of ten of the unit relative to the SI base unit.
    fn exponent(self, suffix: &str) -> Option<i32> {
        let s = match (self, suffix) {
            (Dimension::Length, "m") => 0,
            (Dimension::Length, "km") => 3,
            (Dimension::Length, "cm") => -2,
            (Dimension::Length, "mm") => -3,
            (Dimension::Length, "um" | "µm") => -6,
            (Dimension::Time, "s") => 0,
            (Dimension::Time, "ms") => -3,
            (Dimension::Time, "us" | "µs") => -6,
            (Dimension::Time, "ns") => -9,
            (Dimension::Time, "ps") => -12,
            (Dimension::Frequency, "Hz") => 0,
            (Dimension::Frequency, "kHz") => 3,
            (Dimension::Frequency, "MHz") => 6,
            (Dimension::Frequency, "GHz") => 9,
            _ => return None,
        };
        Some(s)
    }
}

/// Parses `"<number> <unit>"` (space optional) into SI base units.
pub fn parse_quantity(text: &str, dim: Dimension) -> Result<f64, String> {
    let text = text.trim();
    // the unit is the trailing alphabetic run, so "1e-9 ns" keeps its exponent
    let split = text
        .char_indices()
        .rev()
        .take_while(|&(_, c)| c.is_alphabetic())
        .last()
        .map(|(i, _)| i)
        .ok_or_else(|| format!("missing {} unit in \"{text}\"", dim.name()))?;
    let (num, suffix) = text.split_at(split);
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("bad number in \"{text}\""))?;
    let exp = dim
        .exponent(suffix.trim())
        .ok_or_else(|| format!("\"{}\" is not a {} unit", suffix.trim(), dim.name()))?;
    // dividing by an exact power of ten keeps "12.5 ns" == 12.5e-9
    let p = 10f64.powi(exp.abs());
    Ok(if exp < 0 { value / p } else { value * p })
}

struct QuantityVisitor(Dimension);

impl Visitor<'_> for QuantityVisitor {
    type Value = f64;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "a number or a string with a {} unit", self.0.name())
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
        parse_quantity(v, self.0).map_err(|m| E::custom(format!("{UNIT_ERROR_TAG} {m}")))
    }
}

pub(crate) fn length<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    d.deserialize_any(QuantityVisitor(Dimension::Length))
}

pub(crate) fn time<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    d.deserialize_any(QuantityVisitor(Dimension::Time))
}

pub(crate) fn frequency<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    d.deserialize_any(QuantityVisitor(Dimension::Frequency))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffixes() {
        assert_eq!(parse_quantity("12.5 ns", Dimension::Time).unwrap(), 12.5e-9);
        assert_eq!(parse_quantity("61.44MHz", Dimension::Frequency).unwrap(), 61.44e6);
        assert_eq!(parse_quantity("2 km", Dimension::Length).unwrap(), 2000.0);
        assert_eq!(parse_quantity("3µs", Dimension::Time).unwrap(), 3e-6);
        assert_eq!(parse_quantity("1.5e-3 ms", Dimension::Time).unwrap(), 1.5e-6);
        assert_eq!(parse_quantity("2E3m", Dimension::Length).unwrap(), 2000.0);
    }

    #[test]
    fn wrong_dimension_rejected() {
        assert!(parse_quantity("5 ns", Dimension::Length).is_err());
        assert!(parse_quantity("5", Dimension::Length).is_err());
        assert!(parse_quantity("x m", Dimension::Length).is_err());
    }
}
