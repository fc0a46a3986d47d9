//! Binary named-tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "ZMBA"
//! version  u32      FORMAT_VERSION
//! count    u32      number of records
//! record*  u32 name length, UTF-8 name, u32 rank, u64 extent per axis,
//!          u8 precision tag (0 = f32, 1 = f64), row-major payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ZMBA";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.push(T::TAG);
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_payload<S: Scalar, T: Scalar>(r: &mut Reader, n: usize) -> Result<Vec<T>> {
    let bytes = r.take(n.checked_mul(S::BYTES).ok_or_else(|| Error::format(r.path, "payload size overflows"))?)?;
    Ok(bytes
        .chunks_exact(S::BYTES)
        .map(|b| T::of(S::read_le(b).as_f64()))
        .collect())
}

/// Decodes a checkpoint into precision `T`. Values stored at a different
/// precision are converted.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "record name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::format(path, format!("{name}: extents overflow")))?;
        let tag = r.take(1)?[0];
        let data = match tag {
            0 => read_payload::<f32, T>(&mut r, n)?,
            1 => read_payload::<f64, T>(&mut r, n)?,
            _ => return Err(Error::format(path, format!("{name}: unknown precision tag {tag}"))),
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        if names.contains(&name) {
            return Err(Error::format(path, format!("duplicate record {name}")));
        }
        names.push(name);
        values.push(t);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ParamStore::from_parts(names, values))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]).unwrap());
        s.add("b", Tensor::scalar(f32::MAX));
        s
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let s = store();
        let bytes = encode_checkpoint(&s);
        let back: ParamStore<f32> = decode_checkpoint(&bytes, Path::new("x")).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        for ((n1, t1), (n2, t2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&store());
        assert_eq!(&bytes[..4], b"ZMBA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"a.weight");
        // rank 2, extents 2 and 3, tag 0, six f32 payload values
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 2);
        assert_eq!(bytes[44], 0);
        assert_eq!(f32::from_le_bytes(bytes[45..49].try_into().unwrap()), 1.0);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode_checkpoint(&store());
        let p = Path::new("x");
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint::<f32>(&bad, p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint::<f32>(&extra, p).is_err());
        let mut tag = bytes;
        tag[44] = 9;
        assert!(decode_checkpoint::<f32>(&tag, p).is_err());
    }

    #[test]
    fn precision_conversion() {
        let s = store();
        let back: ParamStore<f64> = decode_checkpoint(&encode_checkpoint(&s), Path::new("x")).unwrap();
        assert_eq!(back.get(back.id_of("a.weight").unwrap()).data()[1], -2.5);
    }
}
