//! Model files: a JSON document with `format_version`, `config` and
//! `params`, each param stored as `(name, shape, data)`.
//!
//! Numbers are written with shortest round-trip formatting and parsed with
//! exact rounding, so save → load → save is byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, ModelParams};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    config: FusionConfig,
    params: Vec<ParamEntry>,
}

pub fn to_string(p: &ModelParams) -> Result<String> {
    p.check()?;
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        config: p.config.clone(),
        params: p
            .named_tensors()
            .into_iter()
            .map(|(name, t)| ParamEntry {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string(&file).map_err(|e| Error::format("<document>", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_str(s: &str) -> Result<ModelParams> {
    let file: ModelFile =
        serde_json::from_str(s).map_err(|e| Error::format("<document>", e.to_string()))?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "format_version",
            format!("expected {FORMAT_VERSION}, found {}", file.format_version),
        ));
    }
    file.config
        .validate()
        .map_err(|e| Error::format("config", e.to_string()))?;
    let mut model = ModelParams::zeros(file.config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if file.params.len() != expected.len() {
        return Err(Error::format(
            "params",
            format!("expected {} tensors, found {}", expected.len(), file.params.len()),
        ));
    }
    for (slot, (entry, (name, shape))) in model
        .tensors_mut()
        .into_iter()
        .zip(file.params.into_iter().zip(expected))
    {
        if entry.name != name {
            return Err(Error::format(
                format!("params.{name}"),
                format!("found tensor named `{}`", entry.name),
            ));
        }
        if entry.shape != shape {
            return Err(Error::format(
                format!("params.{name}.shape"),
                format!("expected {shape:?}, found {:?}", entry.shape),
            ));
        }
        *slot = Tensor::new(entry.shape, entry.data)
            .map_err(|e| Error::format(format!("params.{name}.data"), e.to_string()))?;
    }
    model.check()?;
    Ok(model)
}

pub fn save(p: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_string(p)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    from_str(&std::fs::read_to_string(path)?)
}
