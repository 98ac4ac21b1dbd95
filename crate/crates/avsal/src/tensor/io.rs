//! CSPT binary tensor files.
//!
//! Layout: magic `0x43 0x53 0x50 0x54` ("CSPT"), u8 version = 1, u8 rank,
//! rank x u32 little-endian extents, then product(extents) x f32
//! little-endian values. Used for checkpoints, maps, and dataset tensors.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = [0x43, 0x53, 0x50, 0x54];
pub const VERSION: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Contract(format!("rank {} exceeds CSPT limit", t.rank())));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, t.rank() as u8])?;
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(Error::Contract(format!("extent {d} exceeds CSPT limit")));
        }
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
        return Err(Error::Input(format!("bad CSPT magic {magic:02x?}")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(Error::Input(format!("unsupported CSPT version {}", head[0])));
    }
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Tensor::from_vec(&shape, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let t = Tensor::from_vec(&[2, 3], vec![1.5, -0.25, 3.0e-8, f32::MIN_POSITIVE, 7.0, -0.0])
            .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], &MAGIC);
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 2);
        let back = read_tensor(&mut &buf[..]).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let buf = vec![0u8; 16];
        assert!(matches!(read_tensor(&mut &buf[..]), Err(Error::Input(_))));
    }
}
