//! Flat binary tensor format used by capture export and golden-file tests.
//!
//! Layout: magic bytes `QKVT`, u32 rank, u32 dims[rank], then the
//! row-major f32 payload. All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"QKVT";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(format!("unreasonable rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_normal, SeededRng};

    #[test]
    fn roundtrip_is_lossless() {
        let mut rng = SeededRng::new(77);
        let t = seeded_normal(&[2, 3, 4], &mut rng).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], b"QKVT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 16 + 8);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f".to_vec();
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
