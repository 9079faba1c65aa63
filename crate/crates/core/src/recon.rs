//! Binary file of reconstructed sub-pixel grids.
//!
//! Layout (little-endian): `"CSRC"`, u32 version, u32 count, u16 N1, u16 N2,
//! then `count` grids of `N1*N2` f64 values row-major. Values are stored at
//! full precision so evaluating a file gives the same report as evaluating
//! the in-memory reconstructions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::HighResGrid;

pub const MAGIC: [u8; 4] = *b"CSRC";
pub const VERSION: u32 = 1;

pub fn write_recons(path: &Path, grids: &[HighResGrid]) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let (n1, n2) = grids.first().map(|g| g.dims()).unwrap_or((0, 0));
    if let Some(g) = grids.iter().find(|g| g.dims() != (n1, n2)) {
        return Err(Error::DimensionMismatch(format!(
            "reconstructions mix {n1}x{n2} and {:?} grids",
            g.dims()
        )));
    }
    if n1 > u16::MAX as usize || n2 > u16::MAX as usize {
        return Err(Error::DimensionMismatch(
            "grid too large for the file format".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut head = Vec::with_capacity(16);
    head.extend_from_slice(&MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(grids.len() as u32).to_le_bytes());
    head.extend_from_slice(&(n1 as u16).to_le_bytes());
    head.extend_from_slice(&(n2 as u16).to_le_bytes());
    w.write_all(&head).map_err(io_err)?;
    for g in grids {
        let bytes: Vec<u8> = g.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_recons(path: &Path) -> Result<Vec<HighResGrid>> {
    let io_err = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err)?;
    if bytes.len() < 4 {
        return Err(Error::TruncatedHeader { path: path.into() });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    if bytes.len() < 16 {
        return Err(Error::TruncatedHeader { path: path.into() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
            expected: VERSION,
        });
    }
    let count = u32_at(8) as usize;
    let n1 = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    let n2 = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
    let per = n1 * n2 * 8;
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let off = 16 + index * per;
        let Some(chunk) = bytes.get(off..off + per) else {
            return Err(Error::TruncatedRecord {
                path: path.into(),
                index,
            });
        };
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(HighResGrid::from_vec(n1, n2, data)?);
    }
    Ok(out)
}
