//! Checkpoint directories: `config.txt`, `manifest.txt`, and one tensor file
//! per parameter. Parameters are stored as f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::io;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";

fn format_shape(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

/// Writes `params` under `dir`, creating it if needed. `extra_config` lines
/// are appended to `config.txt` after the model keys.
pub fn save(dir: impl AsRef<Path>, params: &ModelParams, extra_config: &[(String, String)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    let mut manifest = String::new();
    for (name, t) in params.iter() {
        let rel = format!("params/{name}.tnsr");
        io::write(dir.join(&rel), t)?;
        manifest.push_str(&format!("{name}\t{rel}\t{}\n", format_shape(t.shape())));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    let mut config = params.config().to_kv();
    for (k, v) in extra_config {
        config.push_str(&format!("{k}={v}\n"));
    }
    fs::write(dir.join(CONFIG), config)?;
    Ok(())
}

pub fn load(dir: impl AsRef<Path>) -> Result<ModelParams> {
    let dir = dir.as_ref();
    let config = ModelConfig::from_kv(&fs::read_to_string(dir.join(CONFIG))?)?;
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)?;
    let mut tensors = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: manifest_path.display().to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err("expected name, path and shape"));
        }
        let shape = parse_shape(fields[2]).ok_or_else(|| parse_err("bad shape"))?;
        let t = io::read(dir.join(fields[1]))?;
        if t.shape() != shape.as_slice() {
            return Err(parse_err("stored tensor does not match manifest shape"));
        }
        tensors.insert(fields[0].to_string(), t);
    }
    ModelParams::from_tensors(config, tensors)
}
