//! Parsing of function values given on the command line.

use std::fs;

use serde_json::Value;

use crate::Failure;

/// Reads `@path` as a file, anything else as inline text.
pub fn inline_or_file(arg: &str) -> Result<String, Failure> {
    match arg.strip_prefix('@') {
        Some(path) => {
            fs::read_to_string(path).map_err(|e| Failure::Io(format!("cannot read {path}: {e}")))
        }
        None => Ok(arg.to_string()),
    }
}

/// Values for the states named in `labels`, from a JSON number (applied to
/// every state), an array in label order, or an object keyed by label.
pub fn values_for(arg: &str, what: &str, labels: &[&str]) -> Result<Vec<f64>, Failure> {
    let text = inline_or_file(arg)?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Param(format!("{what}: not valid JSON: {e}")))?;
    let number = |v: &Value, at: &str| {
        v.as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Failure::Param(format!("{what}: value for {at} is not a finite number")))
    };
    match &value {
        Value::Number(_) => Ok(vec![number(&value, "all states")?; labels.len()]),
        Value::Array(items) => {
            if items.len() != labels.len() {
                return Err(Failure::Param(format!(
                    "{what}: {} values given for {} states ({})",
                    items.len(),
                    labels.len(),
                    labels.join(", ")
                )));
            }
            items
                .iter()
                .zip(labels)
                .map(|(v, l)| number(v, l))
                .collect()
        }
        Value::Object(map) => {
            if let Some(extra) = map.keys().find(|k| !labels.contains(&k.as_str())) {
                return Err(Failure::Param(format!(
                    "{what}: state {extra:?} is not one of {}",
                    labels.join(", ")
                )));
            }
            labels
                .iter()
                .map(|l| match map.get(*l) {
                    Some(v) => number(v, l),
                    None => Err(Failure::Param(format!(
                        "{what}: missing value for state {l:?}"
                    ))),
                })
                .collect()
        }
        _ => Err(Failure::Param(format!(
            "{what}: expected a number, an array or an object"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LABELS: [&str; 2] = ["u", "w"];

    #[test]
    fn accepts_three_shapes() {
        assert_eq!(values_for("2", "f", &LABELS).unwrap(), vec![2.0, 2.0]);
        assert_eq!(
            values_for("[1, 0.5]", "f", &LABELS).unwrap(),
            vec![1.0, 0.5]
        );
        assert_eq!(
            values_for(r#"{"w": 3, "u": 4}"#, "f", &LABELS).unwrap(),
            vec![4.0, 3.0]
        );
    }

    #[test]
    fn rejects_mismatches() {
        assert!(matches!(
            values_for("[1]", "f", &LABELS),
            Err(Failure::Param(_))
        ));
        assert!(matches!(
            values_for(r#"{"x": 1}"#, "f", &LABELS),
            Err(Failure::Param(_))
        ));
        assert!(matches!(
            values_for(r#"{"u": 1}"#, "f", &LABELS),
            Err(Failure::Param(_))
        ));
        assert!(matches!(
            values_for("nope", "f", &LABELS),
            Err(Failure::Param(_))
        ));
        assert!(matches!(
            values_for("@/no/such/file", "f", &LABELS),
            Err(Failure::Io(_))
        ));
    }
}
