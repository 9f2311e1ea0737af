//! Run configuration: file loading, flag overrides and path resolution.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fit_core::backbone::{Backbone, BackboneKind, BackboneSpec};
use fit_core::data::SynthSpec;
use fit_core::episodic::TrainConfig;
use fit_core::fed::FedConfig;
use fit_core::head::HeadVariant;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub widths: Vec<usize>,
    /// Defaults to the input dimension.
    pub d_b: Option<usize>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::IdentityWithFilm,
            widths: Vec::new(),
            d_b: None,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn build(&self, input_dim: usize) -> Result<Backbone> {
        let d_b = self.d_b.unwrap_or(input_dim);
        let spec = match self.kind {
            BackboneKind::IdentityWithFilm => {
                if d_b != input_dim || !self.widths.is_empty() {
                    bail!("identity-with-film backbone needs d_b == input dimension ({input_dim}) and no widths");
                }
                BackboneSpec::identity(d_b)
            }
            BackboneKind::MlpWithFilm => {
                BackboneSpec::mlp(input_dim, self.widths.clone(), d_b, self.seed)
            }
        };
        Ok(Backbone::new(spec)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    pub variant: HeadVariant,
    /// Keeps the first `shots` examples of each class.
    #[serde(default)]
    pub shots: Option<usize>,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub training: TrainConfig,
    /// Also trains and reports the linear-head baseline.
    #[serde(default)]
    pub linear_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub support: PathBuf,
    pub test: PathBuf,
    pub variant: HeadVariant,
    #[serde(default)]
    pub shots: Option<usize>,
    /// FiLM blob; identity when absent.
    #[serde(default)]
    pub psi: Option<PathBuf>,
    /// Covariance weights JSON; initial weights when absent.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub protonets_prior: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedsimConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub fed: FedConfig,
    /// Also runs the upper and lower bound baselines.
    #[serde(default)]
    pub baselines: bool,
}

pub type SynthConfig = SynthSpec;

/// Reads a JSON or TOML config, or the `spec` of a run manifest.
pub fn read_config_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let value: Value = if is_toml {
        toml::from_str(&text).with_context(|| format!("parsing TOML {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing JSON {}", path.display()))?
    };
    if let Value::Object(m) = &value {
        if m.contains_key("config_hash") && m.contains_key("spec") {
            return Ok(m["spec"].clone());
        }
    }
    Ok(value)
}

/// Sets `value` at a dotted key path, creating objects along the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let mut parts = path.split('.').peekable();
    while let Some(key) = parts.next() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("object");
        if parts.peek().is_none() {
            obj.insert(key.to_string(), value);
            return;
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

/// Merges file values with flag overrides and deserializes strictly.
pub fn resolve<T: DeserializeOwned>(
    file: Option<&Path>,
    overrides: Vec<(&'static str, Value)>,
) -> Result<T> {
    let mut v = match file {
        Some(p) => read_config_value(p)?,
        None => Value::Object(Map::new()),
    };
    for (path, val) in overrides {
        set_path(&mut v, path, val);
    }
    serde_json::from_value(v).context("invalid configuration")
}

/// Relative paths are taken relative to the output directory.
pub fn under(out_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

/// Collects `(key, value)` pairs for the flags that were given.
#[derive(Default)]
pub struct Overrides(pub Vec<(&'static str, Value)>);

impl Overrides {
    pub fn opt<T: Serialize>(&mut self, key: &'static str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, serde_json::to_value(v).expect("serializable flag")));
        }
        self
    }

    pub fn into_vec(self) -> Vec<(&'static str, Value)> {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_path_nests() {
        let mut v = serde_json::json!({"a": {"b": 1}});
        set_path(&mut v, "a.c", Value::from(2));
        set_path(&mut v, "x.y.z", Value::from(true));
        assert_eq!(v, serde_json::json!({"a": {"b": 1, "c": 2}, "x": {"y": {"z": true}}}));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: Result<FedsimConfig> = resolve(
            None,
            vec![
                ("train", Value::from("a.csv")),
                ("test", Value::from("b.csv")),
                ("fed.rounds", Value::from(3)),
                ("fed.bogus", Value::from(1)),
            ],
        );
        assert!(r.is_err());
        let ok: FedsimConfig = resolve(
            None,
            vec![
                ("train", Value::from("a.csv")),
                ("test", Value::from("b.csv")),
                ("fed.rounds", Value::from(3)),
            ],
        )
        .unwrap();
        assert_eq!(ok.fed.rounds, 3);
        assert_eq!(ok.fed.clients_per_round, 5);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "train = \"t.csv\"\nvariant = \"qda\"\n[training]\niterations = 7\nseed = 2\n",
        )
        .unwrap();
        let c: FinetuneConfig = resolve(Some(&p), vec![("training.iterations", Value::from(9))]).unwrap();
        assert_eq!(c.training.iterations, 9);
        assert_eq!(c.training.seed, 2);
        assert_eq!(c.variant, HeadVariant::Qda);
    }
}
