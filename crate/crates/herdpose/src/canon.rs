//! Canonical JSON: floats rounded to 6 decimals and printed in shortest
//! round-trip form (integral values without a fraction), object keys sorted.

use serde::Serialize;
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};

pub fn round6(v: f64) -> f64 {
    if !v.is_finite() || v.abs() >= 1e15 {
        return v;
    }
    let r = (v * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Text form used in SVG and tables: rounded, shortest representation.
pub fn fmt_num(v: f64) -> String {
    format!("{}", round6(v))
}

pub fn canonicalize(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let f = round6(n.as_f64().unwrap_or(0.0));
            if f.fract() == 0.0 && f.abs() < 9.0e15 {
                Value::from(f as i64)
            } else {
                Number::from_f64(f).map_or(Value::Null, Value::Number)
            }
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        // serde_json's default map is ordered by key
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k, canonicalize(v))).collect::<Map<_, _>>()),
        other => other,
    }
}

pub fn to_value<T: Serialize + ?Sized>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map(canonicalize).map_err(|e| Error::Internal(format!("serialization failed: {e}")))
}

pub fn to_bytes<T: Serialize + ?Sized>(v: &T, pretty: bool) -> Result<Vec<u8>> {
    let value = to_value(v)?;
    let mut out = if pretty { serde_json::to_vec_pretty(&value) } else { serde_json::to_vec(&value) }
        .map_err(|e| Error::Internal(format!("serialization failed: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn rounds_and_sorts() {
        let v = json!({"b": 0.1234567, "a": [1.0000004, 2, -0.0000001]});
        let s = String::from_utf8(to_bytes(&v, false).unwrap()).unwrap();
        assert_eq!(s, "{\"a\":[1,2,0],\"b\":0.123457}\n");
    }

    #[test]
    fn rounding_is_idempotent() {
        for v in [0.1, 1.0 / 3.0, 1234.5678915, -7.0000005, 1e-7] {
            assert_eq!(round6(round6(v)), round6(v));
            let text = fmt_num(v);
            assert_eq!(text.parse::<f64>().unwrap(), round6(v));
        }
    }
}
