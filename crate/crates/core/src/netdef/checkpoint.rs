//! Model checkpoints: a directory holding `model.cfg`, `manifest.txt` and one
//! DFLT file per parameter tensor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dflt;
use crate::error::{Error, Result};
use crate::netdef::model::Model;
use crate::netdef::spec::ModelSpec;
use crate::tensor::Element;

pub const MANIFEST: &str = "manifest.txt";
pub const MODEL_CONFIG: &str = "model.cfg";

/// Writes the model; manifest lines are `name dims file` with dims joined
/// by `x`.
pub fn save<T: Element>(model: &Model<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = dir.join(MODEL_CONFIG);
    fs::write(&cfg, model.spec.to_config()).map_err(|e| Error::io(&cfg, e))?;
    let mut manifest = String::new();
    for (name, tensor) in model.param_names().iter().zip(model.params()) {
        let file = format!("{name}.dflt");
        dflt::save(dir.join(&file), tensor)?;
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "{name} {} {file}", dims.join("x"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load<T: Element>(dir: impl AsRef<Path>) -> Result<Model<T>> {
    let dir = dir.as_ref();
    let cfg_path = dir.join(MODEL_CONFIG);
    let cfg = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let spec = ModelSpec::from_config(&cfg)?;
    let mut model = crate::netdef::model::build_model::<T>(&spec, &[], 0)?;

    let manifest_path = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let entries: Vec<(&str, &str, &str)> = manifest
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(n), Some(d), Some(f)) => Ok((n, d, f)),
                _ => Err(Error::format("manifest", format!("bad line `{l}`"))),
            }
        })
        .collect::<Result<_>>()?;
    let names = model.param_names();
    if entries.len() != names.len() {
        return Err(Error::format(
            "manifest",
            format!("{} entries for {} parameters", entries.len(), names.len()),
        ));
    }
    for ((name, slot), (entry_name, dims, file)) in names.iter().zip(model.params_mut()).zip(entries) {
        if name != entry_name {
            return Err(Error::format("manifest", format!("expected `{name}`, found `{entry_name}`")));
        }
        let tensor = dflt::load::<T>(dir.join(file))?;
        let expect: Vec<String> = slot.shape().iter().map(|d| d.to_string()).collect();
        if tensor.shape() != slot.shape() || dims != expect.join("x") {
            return Err(Error::shape(
                "checkpoint",
                format!("`{name}` stored as {:?} ({dims}), model needs {:?}", tensor.shape(), slot.shape()),
            ));
        }
        *slot = tensor;
    }
    Ok(model)
}
