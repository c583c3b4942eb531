//! Attribute values: null, finite numbers, or text.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single attribute value. Numbers are always finite and negative zero is
/// normalized away, so equality and hashing agree with numeric equality.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Number(f64),
    Text(String),
}

impl Value {
    /// Builds a numeric value, rejecting NaN and infinities.
    pub fn number(x: f64) -> Result<Value> {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("numeric value {x}")));
        }
        Ok(Value::Number(if x == 0.0 { 0.0 } else { x }))
    }

    pub fn text(s: impl Into<String>) -> Value {
        Value::Text(s.into())
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    /// Rank used by the canonical ordering: null < numbers < text.
    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Number(_) => 1,
            Value::Text(_) => 2,
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Null, Value::Null) => true,
            (Value::Number(a), Value::Number(b)) => a == b,
            (Value::Text(a), Value::Text(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u8(self.rank());
        match self {
            Value::Null => {}
            Value::Number(x) => state.write_u64(x.to_bits()),
            Value::Text(s) => s.hash(state),
        }
    }
}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Value) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Value) -> Ordering {
        match (self, other) {
            (Value::Number(a), Value::Number(b)) => {
                a.partial_cmp(b).expect("values are finite")
            }
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => write!(f, "null"),
            Value::Number(x) => write!(f, "{x}"),
            Value::Text(s) => write!(f, "{s}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::hash_map::DefaultHasher;

    fn hash_of(v: &Value) -> u64 {
        let mut h = DefaultHasher::new();
        v.hash(&mut h);
        h.finish()
    }

    #[test]
    fn negative_zero_is_plain_zero() {
        let a = Value::number(-0.0).unwrap();
        let b = Value::number(0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(hash_of(&a), hash_of(&b));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Value::number(f64::NAN).is_err());
        assert!(Value::number(f64::INFINITY).is_err());
    }

    #[test]
    fn ordering_is_null_number_text() {
        let mut vals = vec![
            Value::text("a"),
            Value::number(2.0).unwrap(),
            Value::Null,
            Value::number(-1.0).unwrap(),
        ];
        vals.sort();
        assert_eq!(
            vals,
            vec![
                Value::Null,
                Value::number(-1.0).unwrap(),
                Value::number(2.0).unwrap(),
                Value::text("a"),
            ]
        );
    }

    #[test]
    fn json_round_trip_preserves_bits() {
        let vals = vec![
            Value::Null,
            Value::number(0.1 + 0.2).unwrap(),
            Value::number(-1.5e-300).unwrap(),
            Value::text("150M"),
        ];
        let s = serde_json::to_string(&vals).unwrap();
        let back: Vec<Value> = serde_json::from_str(&s).unwrap();
        assert_eq!(vals, back);
    }
}
