//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TSFM" | u32 version | u8 dtype bytes | u32 epoch
//! rng:   [u8; 32] seed | u64 stream | u128 word position
//! meta:  u32 length | JSON
//! adam:  u64 step
//! u32 array count, then per array:
//!   u16 name length | name | u8 flags (1 = trainable, 2 = has moments)
//!   u8 rank | u64 × rank dims | values | [m values | v values]
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, ModelConfig, TsfModel};
use crate::nn::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::train::{AdamW, TrainConfig};

pub const MAGIC: &[u8; 4] = b"TSFM";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to rebuild the model and resume or reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: String,
    pub mode: FusionMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub epoch: u32,
    pub rng: RngState,
    pub params: ParamStore<T>,
    pub optimizer: AdamW<T>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn values<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let width = std::mem::size_of::<T>();
        let bytes = self.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        let data = bytes.chunks_exact(width).map(T::read_le).collect();
        Tensor::from_vec(shape, data)
    }
}

fn put_values<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(model: &TsfModel<T>, optimizer: &AdamW<T>, epoch: u32, rng: &ChaCha8Rng, meta: CheckpointMeta) -> Self {
        Self {
            meta,
            epoch,
            rng: RngState::capture(rng),
            params: model.store.clone(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let entries = self.params.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (i, e) in entries.iter().enumerate() {
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            let moments = match (&self.optimizer.m.get(i), &self.optimizer.v.get(i)) {
                (Some(Some(m)), Some(Some(v))) => Some((m, v)),
                _ => None,
            };
            out.push(u8::from(e.trainable) | if moments.is_some() { 2 } else { 0 });
            out.push(e.value.rank() as u8);
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut out, &e.value);
            if let Some((m, v)) = moments {
                put_values(&mut out, m);
                put_values(&mut out, v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let dtype = r.u8()?;
        if DType::from_code(dtype) != Some(T::DTYPE) {
            return Err(Error::Checkpoint(format!(
                "stored {dtype}-byte scalars, expected {}",
                T::DTYPE.code()
            )));
        }
        let epoch = r.u32()?;
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let flags = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if params.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array `{name}`")));
            }
            params.register(name, r.values(&shape)?, flags & 1 != 0);
            if flags & 2 != 0 {
                m.push(Some(r.values(&shape)?));
                v.push(Some(r.values(&shape)?));
            } else {
                m.push(None);
                v.push(None);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            meta,
            epoch,
            rng,
            params,
            optimizer: AdamW { step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Rebuilds the model described by the snapshot and loads the weights.
    pub fn model(&self) -> Result<TsfModel<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = TsfModel::new(self.meta.model.clone(), self.meta.mode, &mut rng)?;
        model.store.load_from(&self.params)?;
        Ok(model)
    }
}
