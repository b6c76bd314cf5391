//! Safetensors weight files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::param::Module;
use crate::NnError;

fn bad(e: impl std::fmt::Display) -> NnError {
    NnError::Checkpoint(e.to_string())
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn to_f32(view: &TensorView<'_>) -> Result<Vec<f32>, NnError> {
    let data = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()),
        Dtype::F64 => Ok(data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32).collect()),
        other => Err(NnError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

/// Writes every parameter, buffers included, under its traversal name.
pub fn save_weights(module: &dyn Module, path: &Path) -> Result<(), NnError> {
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    module.visit("", &mut |name, p| {
        tensors.insert(name.to_string(), (p.shape.clone(), to_bytes(&p.value)));
    });
    let views = tensors
        .iter()
        .map(|(name, (shape, bytes))| TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (name.clone(), v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(bad)?;
    let meta = HashMap::from([("format".to_string(), "vmmc".to_string())]);
    safetensors::serialize_to_file(views, Some(meta), path).map_err(bad)
}

/// Loads the parameters accepted by `filter`; every accepted parameter
/// must be present with a matching shape. Returns how many were loaded.
pub fn load_weights_where(module: &mut dyn Module, path: &Path, filter: impl Fn(&str) -> bool) -> Result<usize, NnError> {
    let buffer = std::fs::read(path)?;
    let file = SafeTensors::deserialize(&buffer).map_err(bad)?;
    let mut loaded = 0;
    let mut failure = None;
    module.visit_mut("", &mut |name, p| {
        if failure.is_some() || !filter(name) {
            return;
        }
        let result = file.tensor(name).map_err(bad).and_then(|view| {
            if view.shape() != p.shape.as_slice() {
                return Err(NnError::Checkpoint(format!("{name}: shape {:?} in file, {:?} in model", view.shape(), p.shape)));
            }
            to_f32(&view)
        });
        match result {
            Ok(values) => {
                p.value = values;
                loaded += 1;
            }
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(loaded),
    }
}

/// Loads every parameter; the file must not hold extra tensors.
pub fn load_weights(module: &mut dyn Module, path: &Path) -> Result<(), NnError> {
    let buffer = std::fs::read(path)?;
    let stored = SafeTensors::deserialize(&buffer).map_err(bad)?.len();
    let loaded = load_weights_where(module, path, |_| true)?;
    if loaded != stored {
        return Err(NnError::Checkpoint(format!("file holds {stored} tensors, model has {loaded}")));
    }
    Ok(())
}

/// Rewrites a foreign safetensors file into this crate's naming. `rename`
/// maps source names to target names; unmapped tensors are dropped.
/// Floating point tensors are stored as `f32`. Returns the number written.
pub fn import_weights(src: &Path, dst: &Path, rename: &BTreeMap<String, String>) -> Result<usize, NnError> {
    let buffer = std::fs::read(src)?;
    let file = SafeTensors::deserialize(&buffer).map_err(bad)?;
    let mut out: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    for (from, to) in rename {
        let view = file.tensor(from).map_err(|e| NnError::Checkpoint(format!("{from}: {e}")))?;
        out.insert(to.clone(), (view.shape().to_vec(), to_bytes(&to_f32(&view)?)));
    }
    let views = out
        .iter()
        .map(|(name, (shape, bytes))| TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (name.clone(), v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(bad)?;
    let meta = HashMap::from([("format".to_string(), "vmmc".to_string()), ("imported_from".to_string(), src.display().to_string())]);
    safetensors::serialize_to_file(views, Some(meta), dst).map_err(bad)?;
    Ok(out.len())
}
