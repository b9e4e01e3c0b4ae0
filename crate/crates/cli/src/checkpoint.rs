//! Binary checkpoints: named tensors followed by a `key=value` config block.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RVLM" | u32 version | u32 tensor count
//! per tensor: u32 name length | name | u8 dtype | u8 rank | u64 dims… | payload
//! u32 config length | config text
//! ```

use std::path::Path;

use revlm::blocks::{Model, Params};
use revlm::engine::AdamW;
use revlm::{DType, Scalar, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"RVLM";
pub const VERSION: u32 = 1;

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian payload.
    pub payload: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size_bytes());
        for v in t.data() {
            match T::DTYPE {
                DType::F32 => payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => payload.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
        StoredTensor {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> std::result::Result<Tensor<T>, String> {
        if self.dtype != T::DTYPE {
            return Err(format!("{} is {}, expected {}", self.name, self.dtype, T::DTYPE));
        }
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => self
                .payload
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        Tensor::new(&self.shape, data).map_err(|e| format!("{}: {e}", self.name))
    }
}

/// Model weights, optional optimizer moments, the run config and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<StoredTensor>,
    pub config: RunConfig,
    /// Optimizer steps taken so far.
    pub step: usize,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> std::result::Result<String, String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, opt: Option<&AdamW<T>>, config: &RunConfig, step: usize) -> Self {
        let mut tensors: Vec<StoredTensor> = model
            .params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| StoredTensor::from_tensor(name, t))
            .collect();
        if let Some(opt) = opt {
            for (prefix, state) in [(ADAM_M, &opt.m), (ADAM_V, &opt.v)] {
                for (name, t) in state.named_tensors() {
                    tensors.push(StoredTensor::from_tensor(format!("{prefix}{name}"), t));
                }
            }
        }
        Checkpoint {
            tensors,
            config: config.clone(),
            step,
        }
    }

    fn params<T: Scalar>(&self, prefix: &str, template: &Params<T>) -> std::result::Result<Params<T>, String> {
        let mut params = template.clone();
        let names = params.names();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let full = format!("{prefix}{name}");
            let stored = self
                .tensors
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| format!("missing tensor {full}"))?;
            let t = stored.to_tensor::<T>()?;
            if t.shape() != slot.shape() {
                return Err(format!("{full} has shape {:?}, expected {:?}", t.shape(), slot.shape()));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        let cfg = self.config.model_config()?;
        let template = Params::<T>::zeros(&cfg);
        let params = self.params("", &template).map_err(|reason| CliError::Checkpoint {
            path: "<memory>".into(),
            reason,
        })?;
        Ok(Model::from_params(cfg, params)?)
    }

    /// Optimizer state, when the checkpoint carries one.
    pub fn optimizer<T: Scalar>(&self, model: &Model<T>) -> Option<AdamW<T>> {
        let m = self.params(ADAM_M, &model.params).ok()?;
        let v = self.params(ADAM_V, &model.params).ok()?;
        let mut opt = AdamW::new(self.config.optim_config(), &model.params);
        opt.m = m;
        opt.v = v;
        opt.step = self.step;
        Some(opt)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.payload);
        }
        let text = format!("step={}\n{}", self.step, self.config.to_text());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = r.string(len)?;
            let code = r.u8()?;
            let dtype = DType::from_code(code).ok_or_else(|| format!("{name}: unknown dtype code {code}"))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let bytes = numel
                .and_then(|n| n.checked_mul(dtype.size_bytes()))
                .ok_or_else(|| format!("{name}: shape overflows"))?;
            let payload = r.take(bytes)?.to_vec();
            tensors.push(StoredTensor {
                name,
                dtype,
                shape,
                payload,
            });
        }
        let len = r.u32()? as usize;
        let text = r.string(len)?;
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let (first, rest) = text.split_once('\n').ok_or("empty config block")?;
        let step = first
            .strip_prefix("step=")
            .and_then(|s| s.parse().ok())
            .ok_or("config block does not start with step=")?;
        let config = RunConfig::from_text(rest).map_err(|e| e.to_string())?;
        Ok(Checkpoint { tensors, config, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| CliError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use revlm::blocks::BlockKind;
    use revlm::engine::OptimConfig;

    fn small_config(block: BlockKind, dtype: DType) -> RunConfig {
        let mut cfg = RunConfig {
            block,
            dtype,
            context: 8,
            width: 8,
            heads: 2,
            layers: 3,
            ..RunConfig::default()
        };
        cfg.resolve("");
        cfg
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let cfg = small_config(BlockKind::MidpointA, DType::F32);
        let model: Model<f32> = Model::init(cfg.model_config().unwrap(), 4).unwrap();
        let mut opt = AdamW::new(OptimConfig::default(), &model.params);
        opt.m.embedding.head.fill(0.125);
        opt.step = 17;
        let ck = Checkpoint::from_model(&model, Some(&opt), &cfg, 17);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let m2: Model<f32> = back.model().unwrap();
        assert_eq!(m2, model);
        let o2 = back.optimizer(&m2).unwrap();
        assert_eq!((o2.m, o2.v, o2.step), (opt.m, opt.v, 17));
    }

    #[test]
    fn fp64_payloads_survive() {
        let cfg = small_config(BlockKind::Hamiltonian, DType::F64);
        let model: Model<f64> = Model::init(cfg.model_config().unwrap(), 5).unwrap();
        let ck = Checkpoint::from_model(&model, None, &cfg, 0);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.model::<f64>().unwrap(), model);
        assert!(back.optimizer(&model).is_none());
        assert!(back.model::<f32>().is_err());
    }

    #[test]
    fn header_layout() {
        let cfg = small_config(BlockKind::Baseline, DType::F32);
        let model: Model<f32> = Model::init(cfg.model_config().unwrap(), 6).unwrap();
        let bytes = Checkpoint::from_model(&model, None, &cfg, 0).to_bytes();
        assert_eq!(&bytes[..4], b"RVLM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, model.params.tensors().len());
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + name_len], b"embed.token");
        assert_eq!(bytes[16 + name_len], 0);
        assert_eq!(bytes[17 + name_len], 2);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let cfg = small_config(BlockKind::Baseline, DType::F32);
        let model: Model<f32> = Model::init(cfg.model_config().unwrap(), 7).unwrap();
        let bytes = Checkpoint::from_model(&model, None, &cfg, 0).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(Checkpoint::from_bytes(&bad_version).is_err());
    }
}
