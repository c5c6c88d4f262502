use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use rose_core::io::{Manifest, RunRecord};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// JSON object read from `--config`, edited by flag overrides and finally
/// deserialised into a typed configuration.
pub struct Layered {
    root: Map<String, Value>,
}

fn merge(base: &mut Map<String, Value>, over: Map<String, Value>) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Object(b)), Value::Object(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl Layered {
    /// `defaults`, overlaid by the config file when given.
    pub fn load<D: Serialize>(defaults: &D, path: Option<&Path>) -> Result<Self, CliError> {
        let Value::Object(mut root) = serde_json::to_value(defaults).expect("defaults serialise") else {
            unreachable!("configurations are JSON objects")
        };
        let Some(path) = path else {
            return Ok(Self { root });
        };
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(over)) => {
                merge(&mut root, over);
                Ok(Self { root })
            }
            Ok(_) => Err(usage(format!("config {} must be a JSON object", path.display()))),
            Err(e) => Err(usage(format!("config {}: {e}", path.display()))),
        }
    }

    /// Sets a dotted key when `value` is present.
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) {
        let Some(value) = value else { return };
        let value = serde_json::to_value(value).expect("plain values serialise");
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut node = &mut self.root;
        for p in parts {
            let entry = node.entry(p).or_insert_with(|| Value::Object(Map::new()));
            if !entry.is_object() {
                *entry = Value::Object(Map::new());
            }
            node = entry.as_object_mut().expect("object");
        }
        node.insert(last.to_string(), value);
    }

    pub fn build<T: DeserializeOwned>(self) -> Result<T, CliError> {
        serde_json::from_value(Value::Object(self.root)).map_err(|e| usage(format!("config: {e}")))
    }
}

/// SHA-256 of the canonical JSON of the effective configuration.
pub fn config_hash<T: Serialize>(command: &str, cfg: &T) -> String {
    let json = serde_json::to_vec(&(command, cfg)).expect("config serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Appends a reproducibility record to `out/manifest.json`, creating it if
/// needed.
pub fn record_run<T: Serialize>(
    out: &Path,
    mut manifest: Option<Manifest>,
    command: &str,
    cfg: &T,
    seed: u64,
) -> anyhow::Result<()> {
    let path = out.join("manifest.json");
    let mut m = match manifest.take() {
        Some(m) => m,
        None if path.exists() => Manifest::load(&path)?,
        None => Manifest::default(),
    };
    m.runs.push(RunRecord {
        command: command.to_string(),
        config_sha256: config_hash(command, cfg),
        seed,
    });
    m.save(&path)?;
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| anyhow::anyhow!("cannot create {}: {e}", dir.display()))?;
    Ok(dir.to_path_buf())
}
