//! SSCV voxel-grid container.
//!
//! ```text
//! "SSCV"  u16 version  u32 H  u32 W  u32 Z        (little-endian)
//! H·W·Z × u16 labels, H outer, Z inner            (little-endian)
//! ceil(H·W·Z / 8) bytes of valid flags, MSB first, zero padding bits
//! ```

use std::path::Path;

use super::VoxelGrid;
use crate::error::{Error, Result};

pub const SSCV_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"SSCV";
const HEADER: usize = 4 + 2 + 12;

pub fn encode_sscv(grid: &VoxelGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER + grid.len() * 2 + grid.len().div_ceil(8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SSCV_VERSION.to_le_bytes());
    for &d in &grid.dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("grid extent {d} does not fit in 32 bits")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &l in &grid.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&pack_bits(&grid.valid));
    Ok(out)
}

pub fn decode_sscv(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"SSCV\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    if bytes.len() < HEADER {
        return Err(Error::Length { what: "SSCV header".into(), expected: HEADER, actual: bytes.len() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SSCV_VERSION {
        return Err(Error::Format(format!("unsupported SSCV version {version}")));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let o = 6 + 4 * a;
        *d = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("grid {dims:?} is too large")))?;
    let expected = n
        .checked_mul(2)
        .and_then(|b| b.checked_add(n.div_ceil(8)))
        .and_then(|b| b.checked_add(HEADER))
        .ok_or_else(|| Error::Format(format!("grid {dims:?} is too large")))?;
    if bytes.len() != expected {
        return Err(Error::Length { what: "SSCV payload".into(), expected, actual: bytes.len() });
    }
    let body = &bytes[HEADER..];
    let labels = body[..2 * n].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    let packed = &body[2 * n..];
    if n % 8 != 0 && packed[packed.len() - 1] & (0xFF >> (n % 8)) != 0 {
        return Err(Error::Format("nonzero padding bits after the valid mask".into()));
    }
    let valid = unpack_bits(packed, n);
    Ok(VoxelGrid { dims, labels, valid })
}

pub fn write_sscv(grid: &VoxelGrid, path: &Path) -> Result<()> {
    std::fs::write(path, encode_sscv(grid)?).map_err(|e| Error::io(path, e))
}

pub fn read_sscv(path: &Path) -> Result<VoxelGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sscv(&bytes)
}

/// Packs flags eight to a byte, first flag in the most significant bit.
pub(crate) fn pack_bits(flags: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; flags.len().div_ceil(8)];
    for (i, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        out[i / 8] |= 0x80 >> (i % 8);
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_byte_is_msb_first() {
        let g = VoxelGrid::new([2, 1, 1], vec![1, 2], vec![true, false]).unwrap();
        let b = encode_sscv(&g).unwrap();
        assert_eq!(b.len(), HEADER + 4 + 1);
        assert_eq!(*b.last().unwrap(), 0x80);
        assert_eq!(decode_sscv(&b).unwrap(), g);
    }

    #[test]
    fn rejects_bad_input() {
        let g = VoxelGrid::new([3, 2, 2], (0..12).collect(), vec![true; 12]).unwrap();
        let b = encode_sscv(&g).unwrap();
        let mut bad = b.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_sscv(&bad), Err(Error::Format(_))));
        match decode_sscv(&b[..b.len() - 3]) {
            Err(Error::Length { expected, actual, .. }) => assert_eq!((expected, actual), (b.len(), b.len() - 3)),
            other => panic!("{other:?}"),
        }
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(decode_sscv(&v2), Err(Error::Format(_))));
        let mut pad = b.clone();
        *pad.last_mut().unwrap() |= 0x01;
        assert!(matches!(decode_sscv(&pad), Err(Error::Format(_))));
        let mut huge = b[..HEADER].to_vec();
        huge[6..18].copy_from_slice(&[0xFF; 12]);
        assert!(decode_sscv(&huge).is_err());
        assert!(decode_sscv(b"SS").is_err());
        assert!(decode_sscv(&[]).is_err());
    }
}
