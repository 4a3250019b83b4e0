//! Binary checkpoint persistence.
//!
//! Layout: magic bytes `SDC1`, a `u32` format version, a `u32` tensor count,
//! then one record per tensor: `u32` name length, name bytes, a dtype tag
//! byte, `u32` rank, `u64` dims, and the raw little-endian element bytes.
//! Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::model::Parameters;
use crate::tensor::{Dtype, Element, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDC1";
pub const VERSION: u32 = 1;

/// Serialize parameters into the checkpoint byte format.
pub fn to_bytes<F: Element>(params: &Parameters<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.entries() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le_bytes(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parse a checkpoint byte buffer.
pub fn from_bytes<F: Element>(bytes: &[u8]) -> Result<Parameters<F>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid tensor name".into()))?;
        let dtype = Dtype::from_tag(r.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag in {name}")))?;
        if dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dtype {dtype:?}, expected {:?}",
                F::DTYPE
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = F::byte_width();
        let raw = r.take(numel * width)?;
        let data = raw
            .chunks_exact(width)
            .map(F::from_le_bytes)
            .collect::<Vec<_>>();
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
    }
    Ok(Parameters::from_entries(entries))
}

/// Write a checkpoint file.
pub fn save<F: Element>(params: &Parameters<F>, path: &Path) -> Result<()> {
    let bytes = to_bytes(params);
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

/// Read a checkpoint file.
pub fn load<F: Element>(path: &Path) -> Result<Parameters<F>> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, Parametrization};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_len: 12,
            parametrization: Parametrization::Unshifted,
        }
    }

    #[test]
    fn round_trip_is_bit_exact_f32_and_f64() {
        let p64: Parameters<f64> = init_params(&cfg(), 17).unwrap();
        let bytes = to_bytes(&p64);
        assert_eq!(&bytes[..4], MAGIC);
        let back: Parameters<f64> = from_bytes(&bytes).unwrap();
        for ((n1, t1), (n2, t2)) in p64.entries().iter().zip(back.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1
                .data()
                .iter()
                .zip(t2.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        let p32: Parameters<f32> = init_params(&cfg(), 17).unwrap();
        let back32: Parameters<f32> = from_bytes(&to_bytes(&p32)).unwrap();
        assert_eq!(p32, back32);
    }

    #[test]
    fn rejects_bad_magic_and_dtype_mismatch() {
        let p: Parameters<f32> = init_params(&cfg(), 1).unwrap();
        let mut bytes = to_bytes(&p);
        assert!(from_bytes::<f64>(&bytes).is_err(), "dtype mismatch");
        bytes[0] = b'X';
        assert!(from_bytes::<f32>(&bytes).is_err(), "bad magic");
    }
}
