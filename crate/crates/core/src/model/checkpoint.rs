//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MSLM" | version: u32 | config_len: u64 | config (canonical JSON)
//! count: u32 | count × entry
//! entry = name_len: u32 | name (UTF-8) | dtype: u8 | ndim: u32 | dims: u64 × ndim | data
//! ```
//!
//! dtype `0` is f64 and `1` is u64. Model parameters are stored as
//! `param/<name>`, optimizer arrays as `opt/<name>`, and the step count as
//! the u64 scalar `step`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::NdArray;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MSLM";
const DTYPE_F64: u8 = 0;
const DTYPE_U64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Optimizer state, keyed by whatever names the optimizer chose.
    pub optimizer: ParamStore,
    pub step: u64,
}

/// Canonical JSON: object keys sorted, no insignificant whitespace.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Result<String> {
    // serde_json's map type is ordered by key unless `preserve_order` is enabled.
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let io = |e| Error::io(path, e);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        encode(&mut w, ck).map_err(io)?;
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

fn encode<W: Write>(w: &mut W, ck: &Checkpoint) -> std::io::Result<()> {
    let config = canonical_json(&ck.config).map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    let count = ck.params.len() + ck.optimizer.len() + 1;
    w.write_all(&(count as u32).to_le_bytes())?;
    let header = |w: &mut W, name: &str, dtype: u8, shape: &[usize]| -> std::io::Result<()> {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dtype])?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        Ok(())
    };
    for (prefix, store) in [("param/", &ck.params), ("opt/", &ck.optimizer)] {
        for (name, arr) in store.iter() {
            header(w, &format!("{prefix}{name}"), DTYPE_F64, arr.shape())?;
            for v in arr.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    header(w, "step", DTYPE_U64, &[])?;
    w.write_all(&ck.step.to_le_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    decode(&mut r).map_err(|e| match e {
        Decode::Io(e) => Error::io(path, e),
        Decode::Other(e) => e,
    })
}

enum Decode {
    Io(std::io::Error),
    Other(Error),
}

impl From<std::io::Error> for Decode {
    fn from(e: std::io::Error) -> Self {
        Decode::Io(e)
    }
}

impl From<Error> for Decode {
    fn from(e: Error) -> Self {
        Decode::Other(e)
    }
}

fn bad(msg: impl Into<String>) -> Decode {
    Decode::Other(Error::Checkpoint(msg.into()))
}

fn read_n<const N: usize, R: Read>(r: &mut R) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    Ok(u32::from_le_bytes(read_n::<4, _>(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    Ok(u64::from_le_bytes(read_n::<8, _>(r)?))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String, Decode> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| bad("string is not UTF-8"))
}

fn decode<R: Read>(r: &mut R) -> Result<Checkpoint, Decode> {
    if &read_n::<4, _>(r)? != MAGIC {
        return Err(bad("not an MSLM checkpoint"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let len = read_u64(r)? as usize;
    let config: ModelConfig = serde_json::from_str(&read_string(r, len)?).map_err(Error::from)?;
    let count = read_u32(r)?;
    let mut params = ParamStore::new();
    let mut optimizer = ParamStore::new();
    let mut step = None;
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = read_string(r, name_len)?;
        let dtype = read_n::<1, _>(r)?[0];
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        match dtype {
            DTYPE_F64 => {
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    data.push(f64::from_le_bytes(read_n::<8, _>(r)?));
                }
                let arr = NdArray::new(shape, data)?;
                if let Some(p) = name.strip_prefix("param/") {
                    params.insert(p, arr);
                } else if let Some(p) = name.strip_prefix("opt/") {
                    optimizer.insert(p, arr);
                } else {
                    return Err(bad(format!("unexpected entry {:?}", name)));
                }
            }
            DTYPE_U64 if name == "step" && n == 1 => step = Some(read_u64(r)?),
            _ => return Err(bad(format!("entry {:?} has unsupported dtype {}", name, dtype))),
        }
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        step: step.ok_or_else(|| bad("missing step"))?,
    })
}
