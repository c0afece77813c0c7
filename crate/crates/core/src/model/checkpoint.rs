//! Binary checkpoint format. All integers little-endian.
//!
//! ```text
//! magic          8 bytes   "DFTLABCK"
//! version        u32       1
//! config length  u64       n
//! config         n bytes   ModelConfig as UTF-8 JSON
//! param count    u32
//! per parameter, in canonical order:
//!   name length  u32, then the UTF-8 name
//!   rank         u32, then rank × u64 dimensions
//!   values       f64 × product(dimensions)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{LabError, Result};
use crate::tensor::Tensor;

use super::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DFTLABCK";
pub const VERSION: u32 = 1;

// Guards against absurd allocations from a corrupt header.
const MAX_HEADER_BYTES: u64 = 1 << 20;
const MAX_RANK: u32 = 8;

pub fn write_to<W: Write>(model: &Model, w: &mut W) -> Result<()> {
    let cfg = serde_json::to_vec(model.config())?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.parameters() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &dim in t.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> LabError {
    LabError::Checkpoint(msg.into())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => corrupt("truncated checkpoint"),
        _ => LabError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_from<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u64(r)?;
    if cfg_len > MAX_HEADER_BYTES {
        return Err(corrupt("config header too large"));
    }
    let mut cfg = vec![0u8; cfg_len as usize];
    read_exact(r, &mut cfg)?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg).map_err(|e| corrupt(format!("bad config: {e}")))?;
    config.validate()?;
    let expected = super::layout(&config);

    let count = read_u32(r)? as usize;
    if count != expected.len() {
        return Err(corrupt(format!(
            "expected {} parameters, found {count}",
            expected.len()
        )));
    }
    let mut named = Vec::with_capacity(count);
    for (_, eshape, _) in &expected {
        let name_len = read_u32(r)? as u64;
        if name_len > MAX_HEADER_BYTES {
            return Err(corrupt("parameter name too long"));
        }
        let mut name = vec![0u8; name_len as usize];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("parameter name is not UTF-8"))?;
        let rank = read_u32(r)?;
        if rank > MAX_RANK {
            return Err(corrupt(format!("parameter {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        // shapes are checked before the payload is allocated
        if &shape != eshape {
            return Err(corrupt(format!(
                "parameter {name} has shape {shape:?}, expected {eshape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        read_exact(r, &mut raw)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        named.push((name, Tensor::new(shape, values)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after checkpoint"));
    }
    Model::from_parameters(config, named)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::file(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_to(model, &mut w)?;
    w.flush().map_err(|e| LabError::file(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path).map_err(|e| LabError::file(path, e))?;
    read_from(&mut std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelConfig {
            vocab_size: 5,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            context_length: 6,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_to(&m, &mut buf).unwrap();
        let back = read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.flat_values(), m.flat_values());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn rejects_corruption() {
        let m = model();
        let mut buf = Vec::new();
        write_to(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_from(&mut bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(read_from(&mut &truncated[..]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_from(&mut extra.as_slice()).is_err());
    }
}
