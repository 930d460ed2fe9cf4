//! Binary tensor snapshots: `"PSTK"`, version u32, rank u32, extents
//! u64[rank], dtype tag u8 (0 = f64, 1 = f32), raw little-endian values.

use std::io::{Read, Write};

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"PSTK";
pub const SNAPSHOT_VERSION: u32 = 1;

pub fn write_snapshot<T: Element, W: Write>(t: &Tensor<T>, out: &mut W) -> Result<()> {
    let mut buf = Vec::with_capacity(17 + 8 * t.shape().len() + t.numel() * T::DTYPE.size());
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.push(T::DTYPE.tag());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one snapshot, converting the stored precision to `T` if needed.
pub fn read_snapshot<T: Element, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor snapshot version {version}"
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let dtype = DType::from_tag(tag[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", tag[0])))?;
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * dtype.size()];
    r.read_exact(&mut raw)?;
    let data: Vec<T> = match dtype {
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
    };
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::<f32>::from_f64(vec![2, 1], &[1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"PSTK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &2u64.to_le_bytes());
        assert_eq!(&buf[20..28], &1u64.to_le_bytes());
        assert_eq!(buf[28], 1);
        assert_eq!(&buf[29..33], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 4 + 4 + 4 + 16 + 1 + 8);

        let back: Tensor<f32> = read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        let wide: Tensor<f64> = read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(wide.data(), &[1.0, -2.5]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_snapshot::<f64, _>(&mut &b"NOPE\0\0\0\0"[..]).is_err());
        let t = Tensor::<f64>::zeros(vec![3]);
        let mut buf = Vec::new();
        write_snapshot(&t, &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_snapshot::<f64, _>(&mut buf.as_slice()).is_err());
    }
}
