//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "PBCK" version
//! layers hidden heads feed_forward vocab_size max_text_len patches patch_dim segments max_seq_len
//! block_count
//! repeated: name_len name_bytes rows cols f32[rows * cols]
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::ParamStore;

const MAGIC: &[u8; 4] = b"PBCK";
const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let c = &model.config;
    for v in [
        VERSION as usize,
        c.layers,
        c.hidden,
        c.heads,
        c.feed_forward,
        c.vocab_size,
        c.max_text_len,
        c.patches,
        c.patch_dim,
        c.segments,
        c.max_seq_len,
        model.params.len(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (name, value) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for &v in value.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            what: "checkpoint",
            detail: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("unsupported version {version}"),
        });
    }
    let config = ModelConfig {
        layers: r.u32()?,
        hidden: r.u32()?,
        heads: r.u32()?,
        feed_forward: r.u32()?,
        vocab_size: r.u32()?,
        max_text_len: r.u32()?,
        patches: r.u32()?,
        patch_dim: r.u32()?,
        segments: r.u32()?,
        max_seq_len: r.u32()?,
    };
    let blocks = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..blocks {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format {
                what: "checkpoint",
                detail: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let (rows, cols) = (r.u32()?, r.u32()?);
        let data = r
            .take(rows * cols * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(name, Array2::from_shape_vec((rows, cols), data).expect("sized above"))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Model::from_params(config, params)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Rounds every parameter to the nearest `f32`, i.e. the values a checkpoint
/// stores.
pub fn round_to_stored(model: &mut Model) {
    for v in model.params.values_mut() {
        v.mapv_inplace(|x| x as f32 as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            feed_forward: 16,
            ..ModelConfig::desk(30)
        };
        Model::new(config, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = to_bytes(&m);
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&loaded), bytes);
        let mut rounded = m.clone();
        round_to_stored(&mut rounded);
        assert_eq!(loaded, rounded);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = to_bytes(&model());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(from_bytes(&magic).is_err());
    }
}
