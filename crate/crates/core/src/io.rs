//! ISTN v1 tensor file format.
//!
//! Layout: magic bytes `ISTN`, `u8` version (1), `u8` dtype tag
//! (0 = f32, 1 = f64), `u8` rank, `rank` little-endian `u32` dims,
//! then the row-major little-endian element payload. Used for
//! checkpoints, heatmap dumps, dataset samples and test fixtures.

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ISTN";
const VERSION: u8 = 1;

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Config(format!("tensor rank {} exceeds format limit", t.rank())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, S::DTYPE as u8, t.rank() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Config(format!("dimension {} exceeds u32", d)))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.numel() * S::DTYPE.size());
    for &v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Reads a tensor, casting the stored dtype to `S` when they differ.
pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Corrupt("bad ISTN magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Corrupt(format!("unsupported ISTN version {}", head[4])));
    }
    let dtype = Dtype::from_tag(head[5])
        .ok_or_else(|| Error::Corrupt(format!("unknown ISTN dtype tag {}", head[5])))?;
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * dtype.size()];
    r.read_exact(&mut payload)?;
    let data: Vec<S> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::from_le_slice(c).as_f64()))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| S::from_f64(f64::from_le_slice(c)))
            .collect(),
    };
    Tensor::new(&shape, data)
}

pub fn save_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}
