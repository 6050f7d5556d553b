//! `.aovc` checkpoints: name-tagged tensors.
//!
//! ```text
//! "AOVC" | u32 version=1 | u32 config_len | config JSON (ExpertConfig)
//!        | u32 n_tensors | n × { u32 name_len | name | u8 dtype | u32 ndim
//!                              | u32 dims[ndim] | data (LE) }
//! ```
//!
//! Parameter names follow [`ExpertTensors`] (`adapter.{i}.weight`,
//! `mlp_plus.{i}.fc1.bias`, ..., levels numbered 1..4). The MLP input is the
//! concatenation `(embedding, fused)`. Optimizer state, when present, is
//! stored as `optim.step` plus `optim.m.<name>` / `optim.v.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{FormatError, Reader};
use crate::autodiff::{DType, Real, Tensor};
use crate::params::{ExpertConfig, ExpertParams, ExpertTensors};
use crate::training::AdamState;
use crate::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AOVC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub params: ExpertParams<F>,
    pub optimizer: Option<AdamState<F>>,
}

fn write_tensor<F: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<F>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(F::DTYPE.code());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        match F::DTYPE {
            DType::F32 => out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&x.as_f64().to_le_bytes()),
        }
    }
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.params.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        let mut entries: Vec<(String, &Tensor<F>)> = self.params.tensors.entries();
        let step;
        if let Some(opt) = &self.optimizer {
            step = Tensor::scalar(F::from_f64(opt.step as f64));
            entries.push(("optim.step".into(), &step));
            entries.extend(opt.m.entries().into_iter().map(|(n, t)| (format!("optim.m.{n}"), t)));
            entries.extend(opt.v.entries().into_iter().map(|(n, t)| (format!("optim.v.{n}"), t)));
        }
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            write_tensor(&mut out, &name, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut rd = Reader::new(bytes);
        if rd.take(4).map_err(|_| FormatError::BadMagic { expected: "AOVC" })? != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic { expected: "AOVC" });
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let cfg_len = rd.u32()? as usize;
        let config: ExpertConfig = serde_json::from_slice(rd.take(cfg_len)?)
            .map_err(|e| FormatError::InvalidField { field: "config", detail: e.to_string() })?;
        config
            .validate()
            .map_err(|e| FormatError::InvalidField { field: "config", detail: e.to_string() })?;

        let n = rd.u32()?;
        let mut raw: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        for _ in 0..n {
            let name_len = rd.u32()? as usize;
            let name = String::from_utf8(rd.take(name_len)?.to_vec())
                .map_err(|_| FormatError::InvalidField { field: "name", detail: "not UTF-8".into() })?;
            let dtype = DType::from_code(rd.u8()?)
                .ok_or_else(|| FormatError::InvalidField { field: "dtype", detail: name.clone() })?;
            let ndim = rd.u32()? as usize;
            if ndim > 8 {
                return Err(FormatError::DimensionOverflow);
            }
            let shape = (0..ndim).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|c| c.checked_mul(dtype.size()).map(|b| (c, b)))
                .ok_or(FormatError::DimensionOverflow)?;
            let data = rd.take(count.1)?;
            let values: Vec<F> = match dtype {
                DType::F32 => data.chunks_exact(4).map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
                DType::F64 => data.chunks_exact(8).map(|c| F::from_f64(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
            };
            let t = Tensor::new(shape, values).map_err(|_| FormatError::DimensionOverflow)?;
            if raw.insert(name.clone(), t).is_some() {
                return Err(FormatError::InvalidField { field: "name", detail: format!("duplicate tensor {name:?}") });
            }
        }
        if rd.remaining() > 0 {
            return Err(FormatError::TrailingBytes(rd.remaining() as u64));
        }

        let shapes = ExpertTensors::shapes(&config);
        let take = |raw: &mut BTreeMap<String, Tensor<F>>, name: String, shape: &[usize]| -> Result<Tensor<F>, FormatError> {
            let t = raw.remove(&name).ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
            if t.shape() != shape {
                return Err(FormatError::TensorShape { name, expected: shape.to_vec(), found: t.shape().to_vec() });
            }
            Ok(t)
        };
        let tensors = shapes.try_map(|name, shape| take(&mut raw, name.to_string(), shape))?;
        let optimizer = match raw.remove("optim.step") {
            Some(step) => {
                let m = shapes.try_map(|name, shape| take(&mut raw, format!("optim.m.{name}"), shape))?;
                let v = shapes.try_map(|name, shape| take(&mut raw, format!("optim.v.{name}"), shape))?;
                Some(AdamState { step: step.item().as_f64() as u64, m, v })
            }
            None => None,
        };
        if let Some(name) = raw.keys().next() {
            return Err(FormatError::UnknownTensor(name.clone()));
        }
        Ok(Checkpoint { params: ExpertParams { config, tensors }, optimizer })
    }
}

pub fn save_checkpoint<F: Real>(ckpt: &Checkpoint<F>, path: impl AsRef<Path>) -> Result<(), Error> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<F>, Error> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|source| Error::Format { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ExpertParams<f32> {
        let cfg = ExpertConfig { g: 4, d_enc: 8, d: 4, n_heads: 2, ..ExpertConfig::default() };
        ExpertParams::init(&cfg, 5).unwrap()
    }

    /// Rebuilds a checkpoint byte stream from `(name, tensor)` pairs.
    fn encode(cfg: &ExpertConfig, entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
        let mut out = b"AOVC".to_vec();
        out.extend_from_slice(&1u32.to_le_bytes());
        let c = serde_json::to_vec(cfg).unwrap();
        out.extend_from_slice(&(c.len() as u32).to_le_bytes());
        out.extend_from_slice(&c);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (n, t) in entries {
            write_tensor(&mut out, n, t);
        }
        out
    }

    fn named(p: &ExpertParams<f32>) -> Vec<(String, Tensor<f32>)> {
        p.tensors.entries().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    #[test]
    fn round_trip_bitwise() {
        let ckpt = Checkpoint { params: params(), optimizer: None };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let p = params().cast::<f64>();
        let m = p.tensors.map(|_, t| t.map(|x| x * 0.5));
        let v = p.tensors.map(|_, t| t.map(|x| x * x));
        let ckpt = Checkpoint { params: p, optimizer: Some(AdamState { step: 17, m, v }) };
        let back = Checkpoint::<f64>::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn missing_tensor_is_named() {
        let p = params();
        let entries: Vec<_> = named(&p).into_iter().filter(|(n, _)| n != "e_minus").collect();
        let err = Checkpoint::<f32>::from_bytes(&encode(&p.config, &entries)).unwrap_err();
        assert_eq!(err, FormatError::MissingTensor("e_minus".into()));
    }

    #[test]
    fn extra_tensor_is_unknown() {
        let p = params();
        let mut entries = named(&p);
        entries.push(("adapter.5.weight".into(), Tensor::zeros(&[2])));
        let err = Checkpoint::<f32>::from_bytes(&encode(&p.config, &entries)).unwrap_err();
        assert_eq!(err, FormatError::UnknownTensor("adapter.5.weight".into()));
    }

    #[test]
    fn required_names_follow_config() {
        let p = params();
        let names = p.names();
        assert!(names.contains(&"lookback.4.bias".to_string()));
        assert!(names.contains(&"qformer.wo".to_string()));
        let no_bias = ExpertParams::<f32>::init(&ExpertConfig { lookback_bias: false, ..p.config.clone() }, 5).unwrap();
        assert!(!no_bias.names().iter().any(|n| n.starts_with("lookback.") && n.ends_with(".bias")));
        // A no-bias checkpoint carrying a lookback bias has an unknown tensor.
        let mut entries = named(&no_bias);
        entries.push(("lookback.1.bias".into(), Tensor::zeros(&[4])));
        let err = Checkpoint::<f32>::from_bytes(&encode(&no_bias.config, &entries)).unwrap_err();
        assert_eq!(err, FormatError::UnknownTensor("lookback.1.bias".into()));
    }

    #[test]
    fn wrong_shape_and_magic() {
        let p = params();
        let mut entries = named(&p);
        entries[0].1 = Tensor::zeros(&[3, 3]);
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&encode(&p.config, &entries)),
            Err(FormatError::TensorShape { .. })
        ));
        let mut bytes = Checkpoint { params: p, optimizer: None }.to_bytes();
        bytes[3] = b'F';
        assert_eq!(Checkpoint::<f32>::from_bytes(&bytes), Err(FormatError::BadMagic { expected: "AOVC" }));
    }
}
