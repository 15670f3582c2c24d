//! Binary checkpoint container: magic, version, JSON header, then every
//! tensor as little-endian f64 in header order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"S2UTCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    /// Opaque generator state at the end of training.
    pub rng_state: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    rng_state: String,
    tensors: Vec<(String, usize, usize)>,
}

impl Checkpoint {
    pub fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
        let mut out = rng.get_seed().to_vec();
        out.extend_from_slice(&rng.get_stream().to_le_bytes());
        out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config().clone(),
            step: self.step,
            rng_state: hex::encode(&self.rng_state),
            tensors: self
                .model
                .named()
                .map(|(n, a)| (n.to_string(), a.nrows(), a.ncols()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + 8 * self.model.parameter_count() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            for x in p.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| fmt("truncated"))?;
        if &magic != MAGIC {
            return Err(fmt("bad magic"));
        }
        let mut word = [0u8; 4];
        bytes.read_exact(&mut word).map_err(|_| fmt("truncated"))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        bytes.read_exact(&mut len).map_err(|_| fmt("truncated"))?;
        let len = u64::from_le_bytes(len) as usize;
        if bytes.len() < len {
            return Err(fmt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[..len])?;
        bytes = &bytes[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, rows, cols) in header.tensors {
            let n = rows * cols;
            if bytes.len() < 8 * n {
                return Err(fmt("truncated tensor data"));
            }
            let data = bytes[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            bytes = &bytes[8 * n..];
            let arr = Array2::from_shape_vec((rows, cols), data).map_err(|e| fmt(&e.to_string()))?;
            tensors.push((name, arr));
        }
        if !bytes.is_empty() {
            return Err(fmt("trailing bytes"));
        }
        Ok(Self {
            model: Model::from_named(&header.config, tensors)?,
            step: header.step,
            rng_state: hex::decode(&header.rng_state).map_err(|e| fmt(&e.to_string()))?,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
