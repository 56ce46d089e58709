//! Binary checkpoint container: config, sharing flags, named tensors, and
//! init snapshots for frozen tensors. Floats are stored as raw little-endian
//! bits, so a save/load cycle is bitwise exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sharing::{DualEncoderModel, SharingSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DEC1";
const VERSION: u32 = 1;

/// Serializes a model to its canonical byte form.
pub fn to_bytes(model: &DualEncoderModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let c = &model.config;
    for dim in [
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ff,
        c.max_seq_len,
        c.d_embed,
    ] {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    let s = &model.sharing;
    for flag in [
        s.share_token_embedder,
        s.freeze_token_embedder,
        s.share_encoder_body,
        s.share_projection,
    ] {
        out.push(u8::from(flag));
    }

    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (name, param) in model.params.iter() {
        write_str(&mut out, name);
        out.push(u8::from(param.trainable));
        write_tensor(&mut out, &param.value);
    }
    out.extend_from_slice(&(model.frozen_init.len() as u64).to_le_bytes());
    for (name, tensor) in &model.frozen_init {
        write_str(&mut out, name);
        write_tensor(&mut out, tensor);
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<DualEncoderModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".to_string()));
    }
    let version = r.read_u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config = EncoderConfig {
        vocab_size: r.read_u64()? as usize,
        d_model: r.read_u64()? as usize,
        n_layers: r.read_u64()? as usize,
        n_heads: r.read_u64()? as usize,
        d_ff: r.read_u64()? as usize,
        max_seq_len: r.read_u64()? as usize,
        d_embed: r.read_u64()? as usize,
    };
    let sharing = SharingSpec {
        share_token_embedder: r.read_u8()? != 0,
        freeze_token_embedder: r.read_u8()? != 0,
        share_encoder_body: r.read_u8()? != 0,
        share_projection: r.read_u8()? != 0,
    };
    let n_params = r.read_u64()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = r.read_str()?;
        let trainable = r.read_u8()? != 0;
        let tensor = r.read_tensor()?;
        params.insert(name, tensor, trainable);
    }
    let n_frozen = r.read_u64()? as usize;
    let mut frozen_init = BTreeMap::new();
    for _ in 0..n_frozen {
        let name = r.read_str()?;
        let tensor = r.read_tensor()?;
        frozen_init.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "trailing bytes in checkpoint: {} unread",
            bytes.len() - r.pos
        )));
    }
    config.validate().map_err(|e| Error::Data(e.to_string()))?;
    sharing.validate().map_err(|e| Error::Data(e.to_string()))?;
    Ok(DualEncoderModel {
        config,
        sharing,
        params,
        frozen_init,
    })
}

pub fn save(model: &DualEncoderModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DualEncoderModel> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &dim in t.shape() {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("truncated checkpoint".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn read_str(&mut self) -> Result<String> {
        let len = self.read_u64()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Data("invalid utf8 in checkpoint".into()))
    }

    fn read_tensor(&mut self) -> Result<Tensor> {
        let rank = self.read_u64()? as usize;
        if rank > 8 {
            return Err(Error::Data(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.read_u64()? as usize);
        }
        let count: usize = shape.iter().product();
        if count.checked_mul(8).map_or(true, |bytes| self.pos + bytes > self.bytes.len()) {
            return Err(Error::Data("truncated tensor payload".to_string()));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let b = self.take(8)?;
            data.push(f64::from_bits(u64::from_le_bytes(
                b.try_into().expect("8 bytes"),
            )));
        }
        Tensor::new(shape, data).map_err(|e| Error::Data(e.to_string()))
    }
}
