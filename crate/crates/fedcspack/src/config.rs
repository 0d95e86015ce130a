//! JSON run configs, `key=value` overrides and sweep grids.

use std::fs;
use std::path::{Path, PathBuf};

use fedcspack_core::sim::DatasetSource;
use fedcspack_core::{Dataset, RunConfig};
use serde_json::{Map, Value};

use crate::idx::{load_idx, IdxError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("override path `{0}` runs through a non-object value")]
    NotAnObject(String),
    #[error("bad grid `{0}`: expected key=v1,v2,...")]
    Grid(String),
    #[error("invalid config: {0}")]
    Invalid(#[from] fedcspack_core::Error),
    #[error(transparent)]
    Idx(#[from] IdxError),
}

/// A config file parsed to a JSON tree, before overrides are applied.
#[derive(Debug, Clone)]
pub struct ConfigDoc {
    pub value: Value,
    /// Directory that relative dataset paths are resolved against.
    pub base_dir: PathBuf,
    pub origin: PathBuf,
}

impl ConfigDoc {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(ConfigDoc {
            value,
            base_dir,
            origin: path.to_path_buf(),
        })
    }

    pub fn from_value(value: Value) -> Self {
        ConfigDoc {
            value,
            base_dir: PathBuf::new(),
            origin: PathBuf::from("<inline>"),
        }
    }

    /// Apply one `dotted.key=value` override.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        set_path(&mut self.value, key, parse_scalar(raw))?;
        // the client count lives in two places; keep them in step
        match key {
            "clients" => set_path(&mut self.value, "partition.num_clients", parse_scalar(raw))?,
            "partition.num_clients" => set_path(&mut self.value, "clients", parse_scalar(raw))?,
            _ => {}
        }
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let (k, v) = split_assignment(o.as_ref())
                .ok_or_else(|| ConfigError::Override(o.as_ref().into()))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Deserialize and validate. Unknown keys are rejected here.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_value(self.value.clone()).map_err(|source| ConfigError::Json {
                path: self.origin.clone(),
                source,
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Materialize the run's dataset: synthesized in memory or read from IDX files.
    pub fn dataset(&self, cfg: &RunConfig) -> Result<Dataset, ConfigError> {
        match &cfg.dataset {
            DatasetSource::Idx { images, labels } => {
                let mut data = load_idx(&self.base_dir.join(images), &self.base_dir.join(labels))?;
                // a file may lack the top classes; the model head decides the count
                if data.num_classes <= cfg.model.num_classes() {
                    data.num_classes = cfg.model.num_classes();
                }
                Ok(data)
            }
            src => Ok(src.synthesize()?),
        }
    }
}

fn split_assignment(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v.trim()))
}

/// JSON if it parses, otherwise a bare string (`method=fedavg`).
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        // a unit enum variant held as a string becomes an object when a field is set below it
        if !node.is_object() {
            if node.is_string() || node.is_null() {
                *node = Value::Object(Map::new());
            } else {
                return Err(ConfigError::NotAnObject(key.into()));
            }
        }
        let obj = node.as_object_mut().unwrap();
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        // selecting a different enum variant drops the old one
        if obj.len() == 1 && !obj.contains_key(part) && is_variant_name(part) {
            obj.clear();
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Err(ConfigError::Override(key.into()))
}

fn is_variant_name(s: &str) -> bool {
    matches!(
        s,
        "fedprox" | "magnitude_topk" | "dirichlet" | "pathological" | "synthetic" | "idx"
    )
}

/// `key=v1,v2,...`. Commas nested in brackets, braces or quotes do not split.
pub fn parse_grid(spec: &str) -> Result<(String, Vec<String>), ConfigError> {
    let (k, rest) = split_assignment(spec).ok_or_else(|| ConfigError::Grid(spec.into()))?;
    let mut values = Vec::new();
    let mut depth = 0i32;
    let mut quoted = false;
    let mut cur = String::new();
    for ch in rest.chars() {
        match ch {
            '"' => quoted = !quoted,
            '[' | '{' if !quoted => depth += 1,
            ']' | '}' if !quoted => depth -= 1,
            ',' if !quoted && depth == 0 => {
                values.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    values.push(cur.trim().to_string());
    if values.iter().any(String::is_empty) || depth != 0 || quoted {
        return Err(ConfigError::Grid(spec.into()));
    }
    Ok((k.to_string(), values))
}

/// Cartesian product of grid axes, first axis slowest.
pub fn cartesian(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for (key, values) in axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.push((key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn grid_splitting() {
        assert_eq!(
            parse_grid("cpr=0.3, 0.6,1.0").unwrap(),
            ("cpr".into(), vec!["0.3".into(), "0.6".into(), "1.0".into()])
        );
        let (_, v) = parse_grid(r#"method=fedavg,{"fedprox":{"mu":0.1}}"#).unwrap();
        assert_eq!(
            v,
            vec![
                "fedavg".to_string(),
                r#"{"fedprox":{"mu":0.1}}"#.to_string()
            ]
        );
        assert!(parse_grid("cpr=").is_err());
        assert!(parse_grid("cpr").is_err());
        assert!(parse_grid("x=1,,2").is_err());
    }

    #[test]
    fn product_order() {
        let cells = cartesian(&[
            ("a".into(), vec!["1".into(), "2".into()]),
            ("b".into(), vec!["x".into(), "y".into(), "z".into()]),
        ]);
        assert_eq!(cells.len(), 6);
        assert_eq!(
            cells[1],
            vec![("a".into(), "1".into()), ("b".into(), "y".into())]
        );
        assert_eq!(cartesian(&[]).len(), 1);
    }

    #[test]
    fn dotted_overrides() {
        let mut doc = ConfigDoc::from_value(json!({
            "method": "fedavg",
            "clients": 4,
            "partition": {"law": {"dirichlet": {"alpha": 0.5}}, "num_clients": 4}
        }));
        doc.set("partition.law.dirichlet.alpha", "100").unwrap();
        doc.set("method.fedprox.mu", "0.01").unwrap();
        doc.set("clients", "9").unwrap();
        assert_eq!(
            doc.value,
            json!({
                "method": {"fedprox": {"mu": 0.01}},
                "clients": 9,
                "partition": {"law": {"dirichlet": {"alpha": 100}}, "num_clients": 9}
            })
        );
        doc.set("partition.law.pathological.shards_per_client", "2")
            .unwrap();
        assert_eq!(
            doc.value["partition"]["law"],
            json!({"pathological": {"shards_per_client": 2}})
        );
        doc.set("method", "fedcspack").unwrap();
        assert_eq!(doc.value["method"], json!("fedcspack"));
        assert!(doc.apply_overrides(&["noequals"]).is_err());
        assert!(doc.set("clients.x", "1").is_err());
    }
}
