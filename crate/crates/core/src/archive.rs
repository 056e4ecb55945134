//! Named `f64` array archives (safetensors layout) with string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::diffusion::{LatentState, NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Array;

pub fn save(path: &Path, arrays: &[(&str, &Array)], metadata: BTreeMap<String, String>) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>)> = arrays
        .iter()
        .map(|(name, a)| {
            let mut b = Vec::with_capacity(a.len() * 8);
            for x in a.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
            ((*name).to_owned(), b)
        })
        .collect();
    let views = arrays
        .iter()
        .zip(&bytes)
        .map(|((_, a), (name, b))| {
            TensorView::new(Dtype::F64, a.shape().to_vec(), b)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Archive(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = metadata.into_iter().collect();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    safetensors::serialize_to_file(views, &Some(meta), path).map_err(|e| Error::Archive(e.to_string()))
}

pub type Loaded = (BTreeMap<String, Array>, BTreeMap<String, String>);

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Archive(e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let mut arrays = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Archive(format!("{name}: expected f64, found {:?}", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
            .collect();
        arrays.insert(name, Array::new(view.shape(), data)?);
    }
    Ok((arrays, meta))
}

/// Writes `z_{step}` for every state plus any extra named arrays, with the
/// schedule and per-state timesteps in the metadata.
pub fn save_trajectory(path: &Path, traj: &Trajectory, schedule: &NoiseSchedule, extra: &[(String, Array)]) -> Result<()> {
    let names: Vec<String> = traj.states.iter().map(|s| format!("z_{}", s.t_index)).collect();
    let mut entries: Vec<(&str, &Array)> = names.iter().map(String::as_str).zip(traj.states.iter().map(|s| &s.z)).collect();
    for (name, a) in extra {
        if names.contains(name) {
            return Err(Error::Archive(format!("duplicate entry {name}")));
        }
        entries.push((name, a));
    }
    let mut meta = BTreeMap::new();
    meta.insert("schedule".to_owned(), serde_json::to_string(schedule)?);
    let steps: Vec<(usize, usize)> = traj.states.iter().map(|s| (s.t_index, s.t)).collect();
    meta.insert("states".to_owned(), serde_json::to_string(&steps)?);
    save(path, &entries, meta)
}

pub fn load_trajectory(path: &Path) -> Result<(Trajectory, NoiseSchedule, BTreeMap<String, Array>)> {
    let (mut arrays, meta) = load(path)?;
    let field = |k: &str| meta.get(k).ok_or_else(|| Error::Archive(format!("missing `{k}` metadata")));
    let schedule: NoiseSchedule = serde_json::from_str(field("schedule")?)?;
    let steps: Vec<(usize, usize)> = serde_json::from_str(field("states")?)?;
    let states = steps
        .into_iter()
        .map(|(t_index, t)| {
            let z = arrays
                .remove(&format!("z_{t_index}"))
                .ok_or_else(|| Error::Archive(format!("missing z_{t_index}")))?;
            Ok(LatentState { z, t_index, t })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Trajectory { states }, schedule, arrays))
}
