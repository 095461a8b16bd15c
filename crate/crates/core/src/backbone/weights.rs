//! Binary weight files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "LOGOW"  version:u16  count:u32
//! count × { name_len:u32 name:utf8 rank:u32 dims:rank×u32 trainable:u8 }
//! raw f64 values for every tensor, in manifest order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: &[u8; 5] = b"LOGOW";
pub const VERSION: u16 = 1;

pub fn write_params<W: Write>(mut w: W, params: &ParamSet) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, p) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        w.write_all(&[u8::from(p.trainable)])?;
    }
    for (_, p) in params.iter() {
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::WeightFile(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }
}

/// Parses a weight file without checking it against any configuration.
pub fn read_params<R: Read>(reader: R) -> Result<ParamSet> {
    let mut c = Cursor { inner: reader };
    if &c.bytes::<5>("magic")? != MAGIC {
        return Err(Error::WeightFile(
            "bad magic, not a LOGOW weight file".into(),
        ));
    }
    let version = u16::from_le_bytes(c.bytes::<2>("version")?);
    if version != VERSION {
        return Err(Error::WeightFile(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = c.u32("tensor count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = c.u32("name length")? as usize;
        if len > 4096 {
            return Err(Error::WeightFile(format!(
                "tensor {i}: implausible name length {len}"
            )));
        }
        let mut name = vec![0u8; len];
        c.inner
            .read_exact(&mut name)
            .map_err(|_| Error::WeightFile("truncated while reading name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::WeightFile(format!("tensor {i}: name is not UTF-8")))?;
        let rank = c.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::WeightFile(format!("`{name}`: invalid rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let flag = c.bytes::<1>("trainable flag")?[0];
        if flag > 1 {
            return Err(Error::WeightFile(format!(
                "`{name}`: invalid trainable flag {flag}"
            )));
        }
        manifest.push((name, dims, flag == 1));
    }
    let mut params = ParamSet::new();
    for (name, dims, trainable) in manifest {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(
                c.bytes::<8>(&format!("values of `{name}`"))?,
            ));
        }
        let t =
            Tensor::new(&dims, data).map_err(|e| Error::WeightFile(format!("`{name}`: {e}")))?;
        params
            .insert(name.clone(), t, trainable)
            .map_err(|_| Error::WeightFile(format!("duplicate tensor `{name}`")))?;
    }
    let mut trailing = [0u8; 1];
    if c.inner
        .read(&mut trailing)
        .map_err(|e| Error::WeightFile(e.to_string()))?
        != 0
    {
        return Err(Error::WeightFile("trailing bytes after tensor data".into()));
    }
    Ok(params)
}

pub fn save_weights(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_params(BufWriter::new(f), params).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(BufReader::new(f))
}

/// Loads a file and requires its names and shapes to equal `expected`.
/// The returned set follows the file's trainable flags.
pub fn load_weights_checked(path: impl AsRef<Path>, expected: &ParamSet) -> Result<ParamSet> {
    let loaded = load_weights(path)?;
    let unknown: Vec<&str> = loaded.names().filter(|n| !expected.contains(n)).collect();
    if !unknown.is_empty() {
        return Err(Error::WeightFile(format!(
            "unknown tensors: {}",
            unknown.join(", ")
        )));
    }
    let missing: Vec<&str> = expected.names().filter(|n| !loaded.contains(n)).collect();
    if !missing.is_empty() {
        return Err(Error::WeightFile(format!(
            "missing tensors: {}",
            missing.join(", ")
        )));
    }
    for (name, p) in expected.iter() {
        let got = loaded.get(name)?.shape();
        if got != p.tensor.shape() {
            return Err(Error::WeightFile(format!(
                "`{name}` has shape {got:?}, expected {:?}",
                p.tensor.shape()
            )));
        }
    }
    // Reorder to the expected manifest so downstream iteration is stable.
    let mut out = ParamSet::new();
    for name in expected.names() {
        let p = loaded.param(name).expect("checked above").clone();
        out.insert(name, p.tensor, p.trainable)?;
    }
    Ok(out)
}
