//! Binary framing shared by model checkpoints and probability-map files:
//!
//! ```text
//! magic      8 bytes
//! version    u32 LE
//! desc_len   u32 LE, then desc_len bytes of UTF-8 JSON
//! count      u32 LE
//! count x { ndim u32 LE, ndim x dim u32 LE, prod(dims) x f32 LE }
//! ```

use std::io::{self, Read, Write};

use crate::{Error, Result};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write(out: &mut impl Write, magic: &[u8; 8], descriptor: &str, blobs: &[Blob]) -> Result<()> {
    out.write_all(magic)?;
    out.write_all(&VERSION.to_le_bytes())?;
    write_u32(out, descriptor.len())?;
    out.write_all(descriptor.as_bytes())?;
    write_u32(out, blobs.len())?;
    for blob in blobs {
        write_u32(out, blob.shape.len())?;
        for &d in &blob.shape {
            write_u32(out, d)?;
        }
        let mut bytes = Vec::with_capacity(blob.data.len() * 4);
        for v in &blob.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read(input: &mut impl Read, magic: &[u8; 8]) -> Result<(String, Vec<Blob>)> {
    let mut found = [0u8; 8];
    input.read_exact(&mut found)?;
    if &found != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported container version {version}")));
    }
    let len = read_u32(input)? as usize;
    let mut desc = vec![0u8; len];
    input.read_exact(&mut desc)?;
    let desc = String::from_utf8(desc).map_err(|_| Error::format("descriptor is not UTF-8"))?;
    let count = read_u32(input)? as usize;
    let mut blobs = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let ndim = read_u32(input)? as usize;
        if ndim > 8 {
            return Err(Error::format(format!("blob with {ndim} dimensions")));
        }
        let shape = (0..ndim)
            .map(|_| read_u32(input).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blobs.push(Blob { shape, data });
    }
    Ok((desc, blobs))
}

fn write_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("value does not fit the u32 header field"))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(input: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
