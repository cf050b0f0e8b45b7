//! CGFB: little-endian float matrix blocks.
//!
//! `"CGFB" | u32 version | u64 rows | u32 dim | rows*dim f32 | u32 crc32`,
//! where the checksum covers the float payload. A file may hold several
//! blocks back to back.

use std::io::{Read, Write};

use super::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CGFB";
pub const VERSION: u32 = 1;

pub fn write_block<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    let mut payload = Vec::with_capacity(m.data.len() * 4);
    for x in &m.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.cols as u32).to_le_bytes())?;
    w.write_all(&payload)?;
    w.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    Ok(())
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::Format(format!("truncated block at byte {}", *pos)))?;
    let s = &buf[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, pos, 4)?.try_into().unwrap()))
}

/// Decode one block starting at `pos`, advancing it past the block.
pub fn decode_block(buf: &[u8], pos: &mut usize) -> Result<Matrix> {
    if take(buf, pos, 4)? != MAGIC {
        return Err(Error::Format("bad magic, expected CGFB".into()));
    }
    let version = read_u32(buf, pos)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported CGFB version {version}")));
    }
    let rows = u64::from_le_bytes(take(buf, pos, 8)?.try_into().unwrap());
    let cols = read_u32(buf, pos)? as usize;
    let len = usize::try_from(rows)
        .ok()
        .and_then(|r| r.checked_mul(cols))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("block size {rows}x{cols} overflows")))?;
    let payload = take(buf, pos, len)?;
    let stored = read_u32(buf, pos)?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix {
        rows: rows as usize,
        cols,
        data,
    })
}

pub fn read_blocks<R: Read>(r: &mut R) -> Result<Vec<Matrix>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < buf.len() {
        out.push(decode_block(&buf, &mut pos)?);
    }
    Ok(out)
}

pub fn read_single<R: Read>(r: &mut R) -> Result<Matrix> {
    let mut blocks = read_blocks(r)?;
    match blocks.len() {
        1 => Ok(blocks.pop().unwrap()),
        n => Err(Error::Format(format!("expected one CGFB block, found {n}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Matrix {
        Matrix::new(2, 3, vec![1.0, -2.5, 0.0, f32::MIN_POSITIVE, 3.25, 1e-7]).unwrap()
    }

    fn bytes(m: &Matrix) -> Vec<u8> {
        let mut b = Vec::new();
        write_block(&mut b, m).unwrap();
        b
    }

    #[test]
    fn layout() {
        let b = bytes(&sample());
        assert_eq!(&b[..4], b"CGFB");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 3);
        assert_eq!(b.len(), 20 + 6 * 4 + 4);
    }

    #[test]
    fn bit_exact_round_trip() {
        let m = sample();
        let back = read_single(&mut bytes(&m).as_slice()).unwrap();
        assert_eq!(back.rows, 2);
        let bits = |m: &Matrix| m.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = bytes(&sample());
        b[24] ^= 0x40;
        assert!(matches!(read_single(&mut b.as_slice()), Err(Error::Checksum { .. })));
        let b = bytes(&sample());
        assert!(matches!(read_single(&mut &b[..b.len() - 3]), Err(Error::Format(_))));
        let mut b = bytes(&sample());
        b[0] = b'X';
        assert!(matches!(read_single(&mut b.as_slice()), Err(Error::Format(_))));
        let mut b = bytes(&sample());
        b[4] = 9;
        assert!(matches!(read_single(&mut b.as_slice()), Err(Error::Format(_))));
    }
}
