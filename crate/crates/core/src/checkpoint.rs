//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes   b"RVLNCKPT"
//! version u32       1
//! hlen    u64       length of the JSON header in bytes
//! header  hlen      {"config": ModelConfig, "tensors": [{"name", "shape"}...]}
//! data    ...       every tensor's f64 values, LE, in header order
//! ```
//!
//! Values are stored as raw IEEE-754 bits so a write/read round trip is
//! bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Weights};

pub const MAGIC: &[u8; 8] = b"RVLNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorHeader>,
}

pub fn encode(model: &Model) -> Vec<u8> {
    let tensors = model.weights.tensors();
    let header = Header {
        config: model.config.clone(),
        tensors: tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let n_values: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut out = Vec::with_capacity(20 + header.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &tensors {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> Result<Model> {
    let mut magic = [0u8; 8];
    read_exact(&mut bytes, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    read_exact(&mut bytes, &mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    read_exact(&mut bytes, &mut len)?;
    let hlen = u64::from_le_bytes(len) as usize;
    if hlen > bytes.len() {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let (hbytes, mut rest) = bytes.split_at(hlen);
    let header: Header = serde_json::from_slice(hbytes)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.config.validate()?;

    let mut weights = Weights::zeros(&header.config);
    {
        let expected = weights.tensors();
        if expected.len() != header.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for (e, h) in expected.iter().zip(&header.tensors) {
            if e.name != h.name || e.shape != h.shape {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    h.name, h.shape, e.name, e.shape
                )));
            }
        }
    }
    for slot in weights.tensors_mut() {
        for v in slot.iter_mut() {
            let mut b = [0u8; 8];
            read_exact(&mut rest, &mut b)?;
            *v = f64::from_le_bytes(b);
        }
    }
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", rest.len())));
    }
    Model::new(header.config, weights)
}

fn read_exact(src: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    src.read_exact(buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
