//! Diff-stable number formatting for CSV and JSON artifacts.

/// `x` rounded to 9 significant digits.
pub fn sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Text form of [`sig9`]: plain decimal for ordinary magnitudes, scientific otherwise.
pub fn fmt9(x: f64) -> String {
    let r = sig9(x);
    let a = r.abs();
    if r == 0.0 || (1e-6..1e15).contains(&a) || !r.is_finite() {
        format!("{r}")
    } else {
        format!("{r:.8e}")
    }
}

/// Rounds every float inside `v` with [`sig9`].
pub fn round_json(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|x| serde_json::Number::from_f64(sig9(x)))
            .map_or(Value::Null, Value::Number),
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

/// Pretty JSON with 9-significant-digit floats and a trailing newline.
pub fn stable_json<T: serde::Serialize + ?Sized>(value: &T) -> crate::Result<String> {
    let mut s = serde_json::to_string_pretty(&round_json(serde_json::to_value(value)?))?;
    s.push('\n');
    Ok(s)
}
