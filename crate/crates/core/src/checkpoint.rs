//! Versioned binary container for model parameters, normalization buffers,
//! optimizer moments and the run configuration.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RFCK" | u32 version | u64 step | u64 epoch | u64 batch
//! u32 len | config JSON
//! u32 count | count x entry
//! entry: u16 len | name | u8 kind | u8 dtype | u8 rank | rank x u64 dim | payload
//! ```
//!
//! Entries are grouped by kind and sorted by name within a group, so the
//! encoding of a given state is unique.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, RefNet};
use crate::optim::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TensorKind {
    Param = 0,
    Buffer = 1,
    AdamM = 2,
    AdamV = 3,
}

impl TensorKind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Self::Param,
            1 => Self::Buffer,
            2 => Self::AdamM,
            3 => Self::AdamV,
            _ => return Err(Error::format(format!("unknown tensor kind {v}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len() * 4,
            TensorData::F64(v) => v.len() * 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    fn capture(name: &str, kind: TensorKind, t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => TensorData::F64(flat.to_vec1()?),
            _ => TensorData::F32(flat.to_dtype(DType::F32)?.to_vec1()?),
        };
        Ok(Self {
            name: name.to_string(),
            kind,
            dims: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(match &self.data {
            TensorData::F32(v) => Tensor::from_slice(v, self.dims.as_slice(), device)?,
            TensorData::F64(v) => Tensor::from_slice(v, self.dims.as_slice(), device)?,
        })
    }
}

/// Full training state at an optimizer step boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Epoch in progress.
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        model: &RefNet,
        optimizer: Option<&Adam>,
        epoch: u64,
        batch: u64,
    ) -> Result<Self> {
        let mut tensors = Vec::new();
        for (name, v) in model.store.params() {
            tensors.push(NamedTensor::capture(name, TensorKind::Param, v.as_tensor())?);
        }
        for (name, v) in model.store.buffers() {
            tensors.push(NamedTensor::capture(name, TensorKind::Buffer, v.as_tensor())?);
        }
        if let Some(opt) = optimizer {
            for (name, t) in &opt.m {
                tensors.push(NamedTensor::capture(name, TensorKind::AdamM, t)?);
            }
            for (name, t) in &opt.v {
                tensors.push(NamedTensor::capture(name, TensorKind::AdamV, t)?);
            }
        }
        Ok(Self {
            config: config.clone(),
            step: optimizer.map_or(0, |o| o.step),
            epoch,
            batch,
            tensors,
        })
    }

    /// Bytes of parameter data, excluding buffers, optimizer state and headers.
    pub fn param_payload_bytes(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind == TensorKind::Param)
            .map(|t| t.data.byte_len())
            .sum()
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.tensors.iter().any(|t| t.kind == TensorKind::AdamM)
    }

    /// Builds the model described by the stored config and loads its tensors.
    pub fn build_model(&self) -> Result<RefNet> {
        let dtype = self
            .tensors
            .iter()
            .find(|t| t.kind == TensorKind::Param)
            .map_or(DType::F32, |t| match t.data {
                TensorData::F32(_) => DType::F32,
                TensorData::F64(_) => DType::F64,
            });
        let model = RefNet::new(self.config.model_config(), dtype, self.config.seeds.model)?;
        self.restore_model(&model.store)?;
        Ok(model)
    }

    /// Overwrites every parameter and buffer of `store`; names must match exactly.
    pub fn restore_model(&self, store: &ParamStore) -> Result<()> {
        let mut seen = 0;
        for t in self
            .tensors
            .iter()
            .filter(|t| matches!(t.kind, TensorKind::Param | TensorKind::Buffer))
        {
            store.assign(&t.name, &t.to_tensor(store.device())?)?;
            seen += 1;
        }
        let expected = store.params().len() + store.buffers().len();
        if seen != expected {
            return Err(Error::format(format!(
                "checkpoint holds {seen} model tensors, model has {expected}"
            )));
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, opt: &mut Adam, device: &Device) -> Result<()> {
        for t in &self.tensors {
            let slot = match t.kind {
                TensorKind::AdamM => &mut opt.m,
                TensorKind::AdamV => &mut opt.v,
                _ => continue,
            };
            let current = slot
                .get_mut(&t.name)
                .ok_or_else(|| Error::format(format!("optimizer state for unknown tensor {}", t.name)))?;
            let value = t.to_tensor(device)?.to_dtype(current.dtype())?;
            if value.dims() != current.dims() {
                return Err(Error::shape(format!("optimizer state {} has wrong shape", t.name)));
            }
            *current = value;
        }
        opt.step = self.step;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.step, self.epoch, self.batch] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);

        let mut order: Vec<&NamedTensor> = self.tensors.iter().collect();
        order.sort_by(|a, b| (a.kind, &a.name).cmp(&(b.kind, &b.name)));
        out.extend_from_slice(&(order.len() as u32).to_le_bytes());
        for t in order {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::format("tensor name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.kind as u8);
            out.push(matches!(t.data, TensorData::F64(_)) as u8);
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let step = read_u64(&mut r)?;
        let epoch = read_u64(&mut r)?;
        let batch = read_u64(&mut r)?;
        let json_len = read_u32(&mut r)? as usize;
        let json = read_vec(&mut r, json_len)?;
        let config: RunConfig = serde_json::from_slice(&json)?;

        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len)?;
            let name = String::from_utf8(read_vec(&mut r, u16::from_le_bytes(len) as usize)?)
                .map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let mut tag = [0u8; 3];
            read_exact(&mut r, &mut tag)?;
            let kind = TensorKind::from_u8(tag[0])?;
            let dims = (0..tag[2])
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = match tag[1] {
                0 => TensorData::F32(
                    read_vec(&mut r, n * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::F64(
                    read_vec(&mut r, n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                d => return Err(Error::format(format!("unknown dtype tag {d}"))),
            };
            tensors.push(NamedTensor { name, kind, dims, data });
        }
        if r.position() as usize != bytes.len() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Self {
            config,
            step,
            epoch,
            batch,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::from_io(e, path))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::format("truncated checkpoint"))
}

fn read_vec(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(Error::format("truncated checkpoint"));
    }
    let mut v = vec![0u8; n];
    read_exact(r, &mut v)?;
    Ok(v)
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Geometry;

    fn tiny_config() -> RunConfig {
        RunConfig {
            geometry: Geometry::tiny(),
            width_mult: 0.05,
            ..RunConfig::default()
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let cfg = tiny_config();
        let model = RefNet::new(cfg.model_config(), DType::F32, 3).unwrap();
        let opt = Adam::new(&cfg.optimizer, &model.store).unwrap();
        let ck = Checkpoint::capture(&cfg, &model, Some(&opt), 2, 5).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!((back.epoch, back.batch), (2, 5));
        assert_eq!(back.param_payload_bytes(), model.param_count() * 4);

        let rebuilt = back.build_model().unwrap();
        for (name, v) in model.store.params() {
            let a: Vec<f32> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = rebuilt.store.get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let cfg = tiny_config();
        let model = RefNet::new(cfg.model_config(), DType::F32, 3).unwrap();
        let bytes = Checkpoint::capture(&cfg, &model, None, 0, 0).unwrap().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/x.ckpt")),
            Err(Error::NotFound(_))
        ));
    }
}
