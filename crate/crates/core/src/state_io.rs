//! Binary block-state files: `QSEV1`, u64 LE `Ng`, u64 LE `N`, then `Ng*N`
//! little-endian doubles in column-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::blockvec::BlockState;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"QSEV1";

pub fn encode(u: &BlockState) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + 8 * u.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(u.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(u.cols() as u64).to_le_bytes());
    for v in u.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<BlockState> {
    if bytes.len() < 21 || &bytes[..5] != MAGIC {
        return Err(Error::StateFile("missing QSEV1 header".into()));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[k..k + 8].try_into().expect("8 bytes"));
    let (ng, n) = (word(5) as usize, word(13) as usize);
    let count = ng
        .checked_mul(n)
        .ok_or_else(|| Error::StateFile("dimensions overflow".into()))?;
    if bytes.len() != 21 + 8 * count {
        return Err(Error::StateFile(format!(
            "expected {} payload bytes for {ng} x {n}, found {}",
            8 * count,
            bytes.len() - 21
        )));
    }
    let values: Vec<f64> = bytes[21..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    BlockState::from_column_slice(ng, n, &values)
}

pub fn read_state(path: &Path) -> Result<BlockState> {
    decode(&fs::read(path)?)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_state(path: &Path, u: &BlockState) -> Result<()> {
    write_atomic(path, &encode(u))
}
