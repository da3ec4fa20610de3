//! Property points given on the command line as JSON objects.

use serde_json::{Map, Value};

use metavox_core::diffusion::{ConditionVector, SENTINEL};
use metavox_core::metrics::{PropertyPoint, PropertyRanges, COMPONENT_NAMES};
use metavox_core::{CubicTensor, Error, Result};

fn object(text: &str) -> Result<Map<String, Value>> {
    match serde_json::from_str::<Value>(text)? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::InvalidArgument(format!("expected a JSON object, got {text}"))),
    }
}

/// Reads `{c11, c12, c44, vol}`; absent keys become the sentinel.
pub fn parse_point(text: &str) -> Result<PropertyPoint> {
    let map = object(text)?;
    if let Some(k) = map.keys().find(|k| !COMPONENT_NAMES.contains(&k.as_str())) {
        return Err(Error::InvalidArgument(format!("unknown condition key {k:?}")));
    }
    let mut p = [SENTINEL; 4];
    for (i, name) in COMPONENT_NAMES.iter().enumerate() {
        if let Some(v) = map.get(*name) {
            p[i] = v.as_f64().ok_or_else(|| Error::InvalidArgument(format!("{name} must be a number")))?;
        }
    }
    Ok(p)
}

/// A normalized condition, converting from physical units when asked.
pub fn parse_condition(text: &str, physical: bool, ranges: &PropertyRanges) -> Result<ConditionVector> {
    let p = parse_point(text)?;
    if physical {
        Ok(ConditionVector::clamped(ranges.normalize(p)))
    } else {
        ConditionVector::new(p)
    }
}

pub fn parse_tensor(text: &str) -> Result<CubicTensor> {
    let p = parse_point(text)?;
    if p[..3].contains(&SENTINEL) {
        return Err(Error::InvalidArgument("tensor needs c11, c12 and c44".into()));
    }
    Ok(CubicTensor::new(p[0], p[1], p[2]))
}
