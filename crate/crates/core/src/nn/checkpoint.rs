//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `DSC1`, version `u32`, count `u32`, then per
//! entry: name length `u16`, UTF-8 name, rank `u8`, dims `u32[rank]`, values
//! `f32[product(dims)]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DSC1";
pub const VERSION: u32 = 1;

pub fn write_entries<W: Write>(mut w: W, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::invalid(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.shape().len() as u8])?;
        for d in t.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in t.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_entries<R: Read>(mut r: R, path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a DSC1 checkpoint"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let dims = (0..rank[0])
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor::new(dims, values)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_entries(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_entries(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_entries(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    read_entries(BufReader::new(File::open(path)?), path)
}

pub fn save_params(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    let entries: Vec<_> = params
        .iter()
        .map(|(_, p)| {
            let mut t = p.tensor.clone();
            t.grad = None;
            (p.name.clone(), t)
        })
        .collect();
    save_entries(path, &entries)
}

pub fn load_params(path: &Path, params: &mut ParamSet<f32>) -> Result<()> {
    params.load_values(load_entries(path)?)
}
