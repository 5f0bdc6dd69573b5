//! JSON run configurations with `--set key=value` overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Parses one `key.path=value` override. The value is read as JSON when
/// possible and as a plain string otherwise.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override `{spec}` is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::usage(format!(
            "override `{spec}` has an empty key segment"
        )));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((path, value))
}

/// Sets `value` at `path`, creating intermediate objects as needed.
pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::usage(format!(
                "override path `{}` crosses a non-object",
                path[..i].join(".")
            ))
        })?;
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

/// Reads a JSON config (or starts from `{}`), applies overrides, and
/// deserializes it strictly.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T, CliError> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("reading config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::usage(format!(
                    "config {} is not valid JSON (line {}, column {}): {e}",
                    p.display(),
                    e.line(),
                    e.column()
                ))
            })?
        }
        None => Value::Object(Default::default()),
    };
    for spec in overrides {
        let (key, v) = parse_override(spec)?;
        apply_override(&mut value, &key, v)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::usage(format!("invalid config: {e}")))
}

/// SHA-256 of the canonical JSON encoding of a config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Demo {
        a: u32,
        inner: Inner,
    }

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        name: String,
    }

    #[test]
    fn overrides_build_nested_values() {
        let cfg: Demo = load(None, &["a=3".into(), "inner.name=adam".into()]).unwrap();
        assert_eq!(
            cfg,
            Demo {
                a: 3,
                inner: Inner {
                    name: "adam".into()
                }
            }
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err =
            load::<Demo>(None, &["a=3".into(), "inner.name=x".into(), "b=1".into()]).unwrap_err();
        assert_eq!(err.code, crate::EXIT_USAGE);
        assert!(err.message.contains("unknown field"), "{}", err.message);
    }

    #[test]
    fn override_through_scalar_fails() {
        let mut v = json!({"a": 1});
        let (p, x) = parse_override("a.b=2").unwrap();
        assert!(apply_override(&mut v, &p, x).is_err());
        assert!(parse_override("novalue").is_err());
    }
}
