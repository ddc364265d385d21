use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PspError, Result};
use crate::rng::RngState;
use crate::skeleton::PyramidSpec;
use crate::tensor::serialize;
use crate::train::{EpochMetrics, TrainConfig, TrainState};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "psp-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub pyramid: PyramidSpec,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub rng_algorithm: String,
    /// Parameter name → tensor file, relative to the checkpoint directory.
    pub params: BTreeMap<String, String>,
    pub velocities: BTreeMap<String, String>,
    pub metrics: Vec<EpochMetrics>,
}

/// Directory holding the manifest. Accepts the directory or the manifest path.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

fn file_name(name: &str, suffix: &str) -> String {
    format!("{name}{suffix}.psptens")
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PspError::io(dir, e))?;
    let store = &state.model.store;
    let mut params = BTreeMap::new();
    let mut velocities = BTreeMap::new();
    for id in store.ids() {
        let e = store.entry(id);
        let f = file_name(&e.name, "");
        serialize::save(&e.tensor, &dir.join(&f))?;
        params.insert(e.name.clone(), f);
        if let Some(v) = state.optimizer.velocity(id) {
            let f = file_name(&e.name, ".velocity");
            let t = crate::tensor::Tensor::new(e.tensor.shape(), v.to_vec())?;
            serialize::save(&t, &dir.join(&f))?;
            velocities.insert(e.name.clone(), f);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: state.config.clone(),
        pyramid: state.model.spec.clone(),
        epoch: state.epoch,
        step: state.step,
        rng_algorithm: RngState::ALGORITHM.into(),
        params,
        velocities,
        metrics: state.history.clone(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| PspError::io(&path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let path = checkpoint_dir(path).join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| PspError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| PspError::json(&path, e))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(PspError::Invalid(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            m.format,
            m.version
        )));
    }
    if m.rng_algorithm != RngState::ALGORITHM {
        return Err(PspError::Invalid(format!(
            "{}: checkpoint uses rng {}, this build uses {}",
            path.display(),
            m.rng_algorithm,
            RngState::ALGORITHM
        )));
    }
    m.config.validate()?;
    m.pyramid.validate()?;
    Ok(m)
}

/// Rebuilds the full training state, ready to continue at the saved epoch.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let dir = checkpoint_dir(path);
    let m = load_manifest(&dir)?;
    let mut state = TrainState::new(&m.config, &m.pyramid)?;
    let names: Vec<String> = state.model.store.entries().iter().map(|e| e.name.clone()).collect();
    if names.len() != m.params.len() {
        return Err(PspError::Invalid(format!(
            "{}: checkpoint has {} tensors, model expects {}",
            dir.display(),
            m.params.len(),
            names.len()
        )));
    }
    for name in &names {
        let f = m
            .params
            .get(name)
            .ok_or_else(|| PspError::Invalid(format!("{}: missing parameter {name}", dir.display())))?;
        let t = serialize::load(&dir.join(f))?;
        state.model.store.set_value(name, t)?;
        if let Some(vf) = m.velocities.get(name) {
            let v = serialize::load(&dir.join(vf))?;
            let id = state.model.store.id(name).expect("listed");
            if v.shape() != state.model.store.get(id).shape() {
                return Err(PspError::shape("velocity", v.shape(), state.model.store.get(id).shape()));
            }
            state.optimizer.set_velocity(id, v.into_data());
        }
    }
    state.epoch = m.epoch;
    state.step = m.step;
    state.history = m.metrics;
    Ok(state)
}
