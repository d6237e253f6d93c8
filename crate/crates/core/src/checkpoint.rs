//! Versioned JSON checkpoints of [`ModelParams`].
//!
//! ```json
//! {
//!   "format": "metacal-checkpoint",
//!   "version": 1,
//!   "dims": [2, 64, 64],
//!   "num_classes": 4,
//!   "tensors": [{"name": "theta.0.weight", "shape": [2, 64], "data": [...]}, ...]
//! }
//! ```
//!
//! Tensors appear in storage order and `data` is row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::nn::{Architecture, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "metacal-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: Vec<usize>,
    pub num_classes: usize,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams) -> Self {
        let arch = params.arch();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: arch.dims.clone(),
            num_classes: arch.num_classes,
            tensors: arch
                .param_names()
                .into_iter()
                .zip(params.tensors())
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_params(self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let arch = Architecture::new(self.dims, self.num_classes).map_err(|e| Error::Format(e.to_string()))?;
        let names = arch.param_names();
        if names.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.tensors.len()
            )));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for (want, t) in names.iter().zip(self.tensors) {
            if *want != t.name {
                return Err(Error::Format(format!("expected tensor `{want}`, found `{}`", t.name)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("tensor `{}` has non-finite values", t.name)));
            }
            tensors.push(Tensor::new(t.shape, t.data).map_err(|e| Error::Format(format!("tensor `{}`: {e}", t.name)))?);
        }
        ModelParams::from_tensors(arch, tensors).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn parse(text: &str) -> Result<ModelParams> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.into_params()
    }
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, Checkpoint::from_params(params).to_json()?.as_bytes())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    Checkpoint::parse(&read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn params() -> ModelParams {
        init_params(5, Architecture::new(vec![3, 4, 2], 3).unwrap())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let text = Checkpoint::from_params(&p).to_json().unwrap();
        assert_eq!(Checkpoint::parse(&text).unwrap(), p);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_params(&p, &path).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
    }

    #[test]
    fn rejects_corrupted_checkpoints() {
        let good = Checkpoint::from_params(&params());
        let mut bad = good.clone();
        bad.version = 2;
        assert!(bad.into_params().is_err());
        let mut bad = good.clone();
        bad.tensors[1].name = "phi.bias".into();
        assert!(bad.into_params().is_err());
        let mut bad = good.clone();
        bad.tensors[0].data.pop();
        assert!(bad.into_params().is_err());
        let mut bad = good.clone();
        bad.tensors[2].shape = vec![2, 4];
        assert!(bad.into_params().is_err());
        let mut bad = good;
        bad.num_classes = 1;
        assert!(bad.into_params().is_err());
        assert!(Checkpoint::parse("{}").is_err());
    }
}
