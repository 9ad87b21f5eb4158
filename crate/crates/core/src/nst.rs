//! `NST1` tensor blobs: magic, four little-endian `u32` dims (n, c, h, w),
//! then the values as little-endian `f32`.

use std::io::{Read, Write};

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

pub const MAGIC: &[u8; 4] = b"NST1";

pub fn write_tensor<S: Scalar, W: Write>(t: &Tensor<S>, out: &mut W) -> Result<()> {
    let d = t.dims();
    out.write_all(MAGIC)?;
    for v in [d.n, d.c, d.h, d.w] {
        let v = u32::try_from(v).map_err(|_| crate::Error::Format(format!("dim {v} exceeds u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<S: Scalar, R: Read>(input: &mut R) -> Result<Tensor<S>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|e| crate::Error::Format(format!("missing NST1 header: {e}")))?;
    if &magic != MAGIC {
        bail!(Format, "bad tensor magic {magic:?}");
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(|e| crate::Error::Format(format!("truncated dims: {e}")))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let dims = Dims::new(dims[0], dims[1], dims[2], dims[3]).map_err(|e| crate::Error::Format(e.to_string()))?;
    let mut raw = vec![0u8; dims.len() * 4];
    input.read_exact(&mut raw).map_err(|e| crate::Error::Format(format!("truncated tensor data: {e}")))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_and_layout() {
        let t = Tensor::<f32>::uniform(Dims::new(2, 3, 4, 5).unwrap(), -2.0, 2.0, &mut Rng::new(1));
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"NST1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &5u32.to_le_bytes());
        assert_eq!(buf.len(), 20 + 4 * 120);
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        assert!(read_tensor::<f32, _>(&mut &b"NST2xxxxxxxxxxxxxxxx"[..]).is_err());
        let mut buf = Vec::new();
        write_tensor(&Tensor::<f32>::zeros(Dims::new(1, 1, 2, 2).unwrap()), &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_tensor::<f32, _>(&mut buf.as_slice()).is_err());
    }
}
