//! JSON checkpoints: configuration, named tensors, trainable mask and
//! optimizer state.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, TrackerModel};
use super::train::TrainState;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<TensorRecord>,
    #[serde(default)]
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_model(model: &TrackerModel, train_state: Option<&TrainState>) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| TensorRecord {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
                trainable: p.trainable,
                data: p.value.iter().copied().collect(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params,
            train_state: train_state.cloned(),
        }
    }

    /// Rebuilds the model; every registered tensor must be present with the
    /// registered shape.
    pub fn into_model(self) -> Result<(TrackerModel, Option<TrainState>)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut model = TrackerModel::new(self.config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for rec in self.params {
            let id = model
                .store
                .find(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", rec.name)))?;
            let expected = model.store.value(id).dim();
            if (rec.shape[0], rec.shape[1]) != expected || rec.data.len() != expected.0 * expected.1 {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    rec.name, rec.shape, expected
                )));
            }
            let p = model.store.get_mut(id);
            p.value = Array2::from_shape_vec(expected, rec.data).expect("length checked");
            p.trainable = rec.trainable;
        }
        Ok((model, self.train_state))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &TrackerModel, train_state: Option<&TrainState>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let json = serde_json::to_string(&Checkpoint::from_model(model, train_state))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrackerModel, Option<TrainState>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ckpt.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig {
            layers: 1,
            ..ModelConfig::default()
        };
        let mut model = TrackerModel::new(cfg, 5).unwrap();
        model.freeze_backbone();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let state = TrainState {
            epochs_completed: 3,
            ..Default::default()
        };
        save_checkpoint(&path, &model, Some(&state)).unwrap();
        let (back, st) = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(st.unwrap().epochs_completed, 3);
    }
}
