//! Flat binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DVAN" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: UTF-8 bytes | rank: u32 | extents: rank × u64 | payload: numel × f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DVAN";
pub const FORMAT_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<NamedTensors> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad magic, expected \"DVAN\"".into() });
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported format version {version}"),
        });
    }
    let mut out = Vec::new();
    while c.pos < buf.len() {
        let start = c.pos;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Parse { offset: start + 4, message: "name is not UTF-8".into() })?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = match numel {
            Some(n) if n > 0 && rank > 0 => n,
            _ => {
                return Err(Error::Parse {
                    offset: start,
                    message: format!("invalid shape {shape:?} for {name}"),
                })
            }
        };
        let bytes = c.take(numel.saturating_mul(8), "payload")?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn write_to<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(&encode(tensors))?;
    Ok(())
}

pub fn read_from<R: Read>(mut r: R) -> Result<NamedTensors> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<NamedTensors> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[("a".into(), Tensor::scalar(1.5))]);
        assert_eq!(&bytes[..4], b"DVAN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], b'a');
        assert_eq!(&bytes[13..17], &1u32.to_le_bytes());
        assert_eq!(&bytes[17..25], &1u64.to_le_bytes());
        assert_eq!(&bytes[25..33], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 33);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&[("w".into(), Tensor::zeros(&[2, 2]))]);
        assert!(decode(b"DVAX\x01\0\0\0").is_err());
        for cut in 9..bytes.len() {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "cut {cut}: {err}");
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in prop::collection::vec(
                ("[a-z/_]{1,12}", prop::collection::vec(1usize..4, 1..4))
                    .prop_flat_map(|(name, shape)| {
                        let n: usize = shape.iter().product();
                        (Just(name), Just(shape), prop::collection::vec(any::<f64>(), n))
                    }),
                0..5,
            )
        ) {
            let named: NamedTensors = tensors
                .into_iter()
                .map(|(n, s, d)| (n, Tensor::new(&s, d).unwrap()))
                .collect();
            let back = decode(&encode(&named)).unwrap();
            prop_assert_eq!(named.len(), back.len());
            for ((na, ta), (nb, tb)) in named.iter().zip(&back) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
