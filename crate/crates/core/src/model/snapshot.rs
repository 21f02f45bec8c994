//! Weight snapshots: `CMC1`, the eight config fields as little-endian
//! 64-bit integers, then every weight tensor in declaration order as
//! little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CmcError, Result};
use crate::tensor::Tensor;

use super::{weight_shapes, ModelConfig, ModelWeights, ToyModel};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"CMC1";

pub fn write_snapshot<W: Write>(model: &ToyModel, mut w: W) -> Result<()> {
    let c = model.config();
    w.write_all(SNAPSHOT_MAGIC)?;
    for field in [
        c.n_layers as u64,
        c.n_heads as u64,
        c.d_model as u64,
        c.d_head as u64,
        c.d_mlp as u64,
        c.vocab_size as u64,
        c.max_seq as u64,
        c.seed,
    ] {
        w.write_all(&field.to_le_bytes())?;
    }
    for t in model.weights().tensors() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<ToyModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(CmcError::Format("bad snapshot magic".into()));
    }
    let mut fields = [0u64; 8];
    let mut buf = [0u8; 8];
    for f in fields.iter_mut() {
        r.read_exact(&mut buf)?;
        *f = u64::from_le_bytes(buf);
    }
    let config = ModelConfig {
        n_layers: fields[0] as usize,
        n_heads: fields[1] as usize,
        d_model: fields[2] as usize,
        d_head: fields[3] as usize,
        d_mlp: fields[4] as usize,
        vocab_size: fields[5] as usize,
        max_seq: fields[6] as usize,
        seed: fields[7],
    };
    config.validate()?;
    let mut tensors = Vec::new();
    for shape in weight_shapes(&config) {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CmcError::Format(format!("{} trailing bytes in snapshot", rest.len())));
    }
    ToyModel::new(config, ModelWeights::from_tensors(&config, tensors)?)
}

pub fn save_snapshot(model: &ToyModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_snapshot(model, &mut buf)?;
    crate::io::write_atomic(path, &buf)
}

pub fn load_snapshot(path: &Path) -> Result<ToyModel> {
    let bytes = std::fs::read(path)?;
    read_snapshot(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_head: 2,
            d_mlp: 3,
            vocab_size: 100,
            max_seq: 5,
            seed: 9,
        };
        let m = ToyModel::init_random(cfg).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CMC1");
        assert_eq!(u64::from_le_bytes(buf[4..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[60..68].try_into().unwrap()), 9);
        let first = f64::from_le_bytes(buf[68..76].try_into().unwrap());
        assert_eq!(first, m.weights().token_embed.data()[0]);
        let back = read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn truncated_and_bad_magic_fail() {
        let m = ToyModel::init_random(ModelConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&m, &mut buf).unwrap();
        assert!(read_snapshot(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(read_snapshot(buf.as_slice()).is_err());
    }
}
