use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Params, PredictorConfig, PredictorModel};
use crate::report::{read_json, write_json};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Self-describing model file: config, training seed and every tensor by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: PredictorConfig,
    pub seed: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &PredictorModel, seed: u64) -> Self {
        let mut tensors = Vec::new();
        model.params.for_each(|_, name, m| {
            tensors.push(NamedTensor {
                name: name.to_string(),
                rows: m.rows,
                cols: m.cols,
                data: m.data.clone(),
            })
        });
        Checkpoint {
            config: model.config.clone(),
            seed,
            tensors,
        }
    }

    pub fn into_model(self) -> Result<PredictorModel> {
        let mut params = Params::init(&self.config, 0)?;
        let mut expected = 0;
        params.for_each(|_, _, _| expected += 1);
        if expected != self.tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} tensors, config implies {expected}",
                self.tensors.len()
            )));
        }
        let mut err = None;
        let mut it = self.tensors.into_iter();
        params.for_each_mut(|_, name, m| {
            let t = it.next().expect("count checked");
            if err.is_some() {
                return;
            }
            if t.name != name || t.rows != m.rows || t.cols != m.cols || t.data.len() != m.len() {
                err = Some(Error::Shape(format!(
                    "checkpoint tensor {} ({}x{}) does not match expected {name} ({}x{})",
                    t.name, t.rows, t.cols, m.rows, m.cols
                )));
                return;
            }
            m.data = t.data;
        });
        if let Some(e) = err {
            return Err(e);
        }
        params.check_shapes(&self.config)?;
        Ok(PredictorModel {
            config: self.config,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, model: &PredictorModel, seed: u64) -> Result<()> {
    write_json(path, &Checkpoint::from_model(model, seed))
}

/// Loads a checkpoint; returns the model and its training seed.
pub fn load_checkpoint(path: &Path) -> Result<(PredictorModel, u64)> {
    let ck: Checkpoint = read_json(path)?;
    let seed = ck.seed;
    Ok((ck.into_model()?, seed))
}
