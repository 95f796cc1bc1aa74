//! Feature cache files.
//!
//! Layout (little-endian): magic `DSCF`, version `u32`, kind `u8`, frame
//! count `u32`, dimension `u32`, then `T × dim` `f32` values row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FrameMatrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DSCF";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Mel = 0,
    F0 = 1,
    Rmse = 2,
    Stft = 3,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [FeatureKind::Mel, FeatureKind::F0, FeatureKind::Rmse, FeatureKind::Stft];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Mel => "mel",
            FeatureKind::F0 => "f0",
            FeatureKind::Rmse => "rmse",
            FeatureKind::Stft => "stft",
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == b)
    }
}

pub fn write_features<W: Write>(mut w: W, kind: FeatureKind, m: &FrameMatrix) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind as u8])?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<R: Read>(mut r: R, path: &Path) -> Result<(FeatureKind, FrameMatrix)> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut head = [0u8; 17];
    r.read_exact(&mut head)?;
    if &head[0..4] != MAGIC {
        return Err(bad("not a DSCF feature file".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind = FeatureKind::from_byte(head[8]).ok_or_else(|| bad(format!("unknown feature kind {}", head[8])))?;
    let rows = u32::from_le_bytes(head[9..13].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(head[13..17].try_into().expect("4 bytes")) as usize;
    let mut raw = Vec::with_capacity(rows * cols * 4);
    r.read_to_end(&mut raw)?;
    if raw.len() != rows * cols * 4 {
        return Err(bad(format!(
            "expected {} value bytes, found {}",
            rows * cols * 4,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((kind, FrameMatrix::new(rows, cols, data)?))
}

pub fn save(path: &Path, kind: FeatureKind, m: &FrameMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, kind, m)?;
    w.flush()?;
    Ok(())
}

/// Load a cache file, checking it holds the expected kind.
pub fn load(path: &Path, expect: FeatureKind) -> Result<FrameMatrix> {
    let (kind, m) = read_features(BufReader::new(File::open(path)?), path)?;
    if kind != expect {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("holds {} features, expected {}", kind.name(), expect.name()),
        });
    }
    Ok(m)
}
