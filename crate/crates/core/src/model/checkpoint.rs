//! JSON checkpoints: config, operator layout and every parameter with its shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Operators};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub operators: Operators,
    pub params: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            config: model.config().clone(),
            operators: model.operators().clone(),
            params: model
                .named_params()
                .into_iter()
                .map(|(name, t)| StoredTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; every stored tensor must match a parameter by name and shape.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.config, self.operators, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected = model.named_params().len();
        if self.params.len() != expected {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {expected}",
                self.params.len()
            )));
        }
        for stored in self.params {
            let target = model
                .param_mut(&stored.name)
                .ok_or_else(|| Error::Config(format!("unknown parameter '{}'", stored.name)))?;
            if target.shape() != stored.shape.as_slice() || stored.values.len() != target.len() {
                return Err(Error::shape("checkpoint tensor", target.shape(), &stored.shape));
            }
            target.values_mut().copy_from_slice(&stored.values);
            target.validate()?;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(Error::file(path))?);
    serde_json::to_writer(&mut w, &Checkpoint::from_model(model))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path).map_err(Error::file(path))?))?;
    ckpt.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;
    use crate::gnn::OpKind;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            ..ModelConfig::new(TaskKind::Regression, None, 1, 1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::new(cfg, Operators::Fixed(vec![OpKind::Gatv2, OpKind::GatedGcn]), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        for ((n1, a), (n2, b)) in model.named_params().into_iter().zip(back.named_params()) {
            assert_eq!(n1, n2);
            let bits = |t: &crate::autodiff::Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = ModelConfig {
            layers: 1,
            heads: 1,
            dim: 4,
            ..ModelConfig::new(TaskKind::Regression, None, 1, 1)
        };
        let model = Model::new(cfg, Operators::Fixed(vec![OpKind::Gine]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut ckpt = Checkpoint::from_model(&model);
        ckpt.params[0].shape = vec![2, 2];
        assert!(ckpt.into_model().is_err());
    }
}
