//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes   b"SLMCKPT1"
//! hdr_len   u64 LE    length of the JSON header in bytes
//! header    JSON      {"model": ModelConfig, "codec": CodecConfig,
//!                      "tensors": [{"name": .., "shape": [..]}, ..]}
//! data      f32 LE    every tensor, row-major, in header order
//! ```

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::tokens::FrameLayout;

const MAGIC: &[u8; 8] = b"SLMCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    codec: CodecConfig,
    tensors: Vec<TensorMeta>,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model<f32>, codec: &CodecConfig) -> Result<()> {
    let tensors = model.params.tensors();
    let header = Header {
        model: model.config.clone(),
        codec: codec.clone(),
        tensors: tensors.iter().map(|(n, t)| TensorMeta { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, t) in &tensors {
        buf.clear();
        buf.reserve(t.len() * 4);
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model<f32>, CodecConfig)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    header.codec.validate()?;
    let mut model = Model::<f32>::new(header.model, header.codec.vocabulary(), FrameLayout::default(), 0)?;
    {
        let targets = model.params.tensors_mut();
        if targets.len() != header.tensors.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} tensors, model expects {}",
                header.tensors.len(),
                targets.len()
            )));
        }
        for ((name, mut t), meta) in targets.into_iter().zip(&header.tensors) {
            if name != meta.name || t.shape() != meta.shape.as_slice() {
                return Err(Error::Parse(format!("tensor {} {:?} does not match {name} {:?}", meta.name, meta.shape, t.shape())));
            }
            let mut bytes = vec![0u8; t.len() * 4];
            r.read_exact(&mut bytes)?;
            for (v, b) in t.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
    }
    Ok((model, header.codec))
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, codec: &CodecConfig) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, model, codec)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CodecConfig)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(f)
}
