//! Human-readable checkpoints: named flat arrays plus the configuration.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::train::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "rha-checkpoint/1";

/// Widths the parameters were built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimsHeader {
    pub d_o: usize,
    pub d_l: usize,
    pub d_s: usize,
    pub d_q: usize,
    pub d_h: usize,
    pub d_hat: usize,
    pub heads: usize,
}

impl DimsHeader {
    pub fn of(cfg: &ModelConfig) -> Self {
        DimsHeader {
            d_o: cfg.dims.d_o,
            d_l: cfg.dims.d_l,
            d_s: cfg.dims.d_s,
            d_q: cfg.dims.d_q,
            d_h: cfg.d_h,
            d_hat: cfg.d_hat,
            heads: cfg.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub dims: DimsHeader,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub params: IndexMap<String, ParamRecord>,
}

impl Checkpoint {
    pub fn new(model: &ModelConfig, train: Option<&TrainConfig>, params: &ModelParams<f64>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            dims: DimsHeader::of(model),
            model: model.clone(),
            train: train.cloned(),
            params: params
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        ParamRecord {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Validated parameters.
    pub fn params(&self) -> Result<ModelParams<f64>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {:?}",
                self.format
            )));
        }
        self.model.validate()?;
        if self.dims != DimsHeader::of(&self.model) {
            return Err(Error::Config(
                "checkpoint dims header disagrees with its model config".into(),
            ));
        }
        let named = self
            .params
            .iter()
            .map(|(k, r)| Ok((k.clone(), Tensor::new(r.shape.clone(), r.data.clone())?)))
            .collect::<Result<IndexMap<_, _>>>()?;
        ModelParams::from_named(&self.model, named)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig::reduced();
        let params = ModelParams::<f64>::init_dense(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::new(&cfg, None, &params).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params().unwrap(), params);
        assert_eq!(back.model, cfg);
    }

    #[test]
    fn tampered_checkpoints_are_rejected() {
        let cfg = ModelConfig::reduced();
        let params = ModelParams::<f64>::init(&cfg, 4).unwrap();
        let mut c = Checkpoint::new(&cfg, None, &params);
        c.params.get_mut("fusion.W_F").unwrap().shape = vec![8, 16];
        assert!(c.params().is_err());
        let mut c = Checkpoint::new(&cfg, None, &params);
        c.params.shift_remove("predictor.end.b");
        assert!(c.params().is_err());
        let mut c = Checkpoint::new(&cfg, None, &params);
        c.dims.d_h = 32;
        assert!(c.params().is_err());
    }
}
