//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DFNC"  u16 version  u32 count
//! count × { u16 name_len, name (UTF-8), u8 dtype (0 = f32, 1 = f64),
//!           u8 rank, rank × u64 extent, raw little-endian values }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::tensor::{Float, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DFNC";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(format_err!("unknown dtype byte {other}")),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode<'a>(
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    dtype: Dtype,
) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| format_err!("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| format_err!("tensor name longer than 65535 bytes"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype as u8);
        out.push(4);
        for e in t.shape().0 {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => t
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err!("truncated checkpoint at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

/// Parses a whole container; nothing is returned unless every tensor parses.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(format_err!("bad magic, not a DFNC checkpoint"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(format_err!("unsupported checkpoint version {version}"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format_err!("tensor name is not UTF-8"))?
            .to_owned();
        let dtype = Dtype::from_byte(r.u8()?)?;
        let rank = r.u8()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(format_err!("tensor {name:?} has unsupported rank {rank}"));
        }
        let mut dims = [1usize; 4];
        for d in &mut dims[4 - rank..] {
            *d = usize::try_from(r.u64()?).map_err(|_| format_err!("extent overflow"))?;
        }
        let shape = Shape(dims);
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err!("tensor {name:?} is too large"))?;
        let raw = r.take(
            n.checked_mul(dtype.width())
                .ok_or_else(|| format_err!("tensor {name:?} is too large"))?,
        )?;
        let data: Vec<Float> = match dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Float)
                .collect(),
        };
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(format_err!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        ));
    }
    Ok(out)
}

pub fn write_tensors<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let bytes = encode(entries, Dtype::F64)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => format_err!("{}: {msg}", path.display()),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a".into(), Tensor::from_vec([1, 2, 1, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap()),
            ("bias".into(), Tensor::zeros([1, 3, 1, 1])),
        ]
    }

    #[test]
    fn header_layout() {
        let s = sample();
        let bytes = encode(s.iter().map(|(n, t)| (n.as_str(), t)), Dtype::F64).unwrap();
        assert_eq!(&bytes[..4], b"DFNC");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes([bytes[10], bytes[11]]), 1);
        assert_eq!(bytes[12], b'a');
        assert_eq!(bytes[13], 1);
        assert_eq!(bytes[14], 4);
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let s = sample();
        let bytes = encode(s.iter().map(|(n, t)| (n.as_str(), t)), Dtype::F64).unwrap();
        for cut in [0, 3, 9, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn f32_payload_reads_back_as_rounded_values() {
        let t = Tensor::from_vec([1, 1, 1, 2], vec![0.1, 2.0]).unwrap();
        let bytes = encode([("x", &t)], Dtype::F32).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].1.data(), &[0.1f32 as f64, 2.0]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::array::uniform4(1usize..4),
            seed in any::<u64>(),
            name in "[a-z][a-z0-9_.]{0,20}",
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::uniform(dims, -1e6, 1e6, &mut rng);
            let bytes = encode([(name.as_str(), &t)], Dtype::F64).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            let same = back[0].1.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
            prop_assert_eq!(back[0].1.shape(), t.shape());
        }
    }
}
