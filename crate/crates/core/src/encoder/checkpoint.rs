//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "MOLTCKPT"
//! version      u32       1
//! config       7 × u32   image_side, patch_side, embed_dim, num_heads,
//!                        num_blocks, num_classes, mlp_hidden
//! count        u32       number of tensors that follow
//! tensor × count:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u32
//!   extents    rank × u64
//!   values     product(extents) × f64
//! ```
//!
//! Tensors appear in canonical parameter order; the reader rejects files
//! whose names or shapes disagree with the stored configuration.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOLTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(cfg: &EncoderConfig, params: &EncoderParams) -> Result<Vec<u8>> {
    params.check(cfg)?;
    let mut out = Vec::with_capacity(params.count() * 8 + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in config_fields(cfg) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let names = params.names();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    params.visit(|name, t| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(EncoderConfig, EncoderParams)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Decode("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Decode(format!("unsupported checkpoint version {version}")));
    }
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = read_u32(&mut r)? as usize;
    }
    let cfg = EncoderConfig {
        image_side: f[0],
        patch_side: f[1],
        embed_dim: f[2],
        num_heads: f[3],
        num_blocks: f[4],
        num_classes: f[5],
        mlp_hidden: f[6],
    };
    cfg.validate()
        .map_err(|e| Error::Decode(format!("checkpoint config invalid: {e}")))?;
    let template = EncoderParams::filled(&cfg, 0.0)?;
    let count = read_u32(&mut r)? as usize;
    let expected = template.names().len();
    if count != expected {
        return Err(Error::Decode(format!(
            "checkpoint holds {count} tensors, configuration needs {expected}"
        )));
    }
    let params = template.try_map(|name, t| -> Result<Tensor> {
        let len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        read_exact(&mut r, &mut buf)?;
        let stored = String::from_utf8(buf)
            .map_err(|_| Error::Decode("tensor name is not UTF-8".into()))?;
        if stored != name {
            return Err(Error::Decode(format!("expected tensor {name}, found {stored}")));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        if shape != t.shape() {
            return Err(Error::Decode(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.len());
        for _ in 0..t.len() {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        Tensor::new(shape, data)
    })?;
    if !r.is_empty() {
        return Err(Error::Decode(format!("{} trailing bytes after checkpoint", r.len())));
    }
    Ok((cfg, params))
}

pub fn write_checkpoint(path: &Path, cfg: &EncoderConfig, params: &EncoderParams) -> Result<()> {
    let bytes = encode_checkpoint(cfg, params)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(EncoderConfig, EncoderParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Decode(m) => Error::Decode(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn config_fields(cfg: &EncoderConfig) -> [usize; 7] {
    [
        cfg.image_side,
        cfg.patch_side,
        cfg.embed_dim,
        cfg.num_heads,
        cfg.num_blocks,
        cfg.num_classes,
        cfg.mlp_hidden,
    ]
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Decode("checkpoint truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            image_side: 8,
            patch_side: 4,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            num_classes: 3,
            mlp_hidden: 16,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = cfg();
        let params = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        let (cfg2, params2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);
        assert_eq!(encode_checkpoint(&cfg2, &params2).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let cfg = cfg();
        let params = EncoderParams::filled(&cfg, 0.5).unwrap();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        assert_eq!(&bytes[..8], b"MOLTCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[36..40].try_into().unwrap()), 16);
        // first tensor name
        let len = u32::from_le_bytes(bytes[44..48].try_into().unwrap()) as usize;
        assert_eq!(&bytes[48..48 + len], b"patch.weight");
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let cfg = cfg();
        let params = EncoderParams::filled(&cfg, 0.5).unwrap();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
