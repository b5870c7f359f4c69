//! `NTEN` named-tensor container.
//!
//! Layout (little-endian): magic `NTEN`, `u32` tensor count, then for each
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank` x `u32`
//! dims and the `f64` data in row-major order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NTEN";

#[derive(Debug, thiserror::Error)]
pub enum NtenError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not an NTEN container (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("malformed NTEN container: {0}")]
    Malformed(String),
}

fn malformed(e: impl std::fmt::Display) -> NtenError {
    NtenError::Malformed(e.to_string())
}

pub fn write_to(params: &ParamSet, mut w: impl Write) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "tensor name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    write_to(params, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet, NtenError> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(malformed)?;
    if &magic != MAGIC {
        return Err(NtenError::BadMagic(magic));
    }
    let count = read_u32(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(malformed)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(malformed)?;
        let name = String::from_utf8(name).map_err(malformed)?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(malformed)?;
        let shape = (0..rank[0])
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        if r.len() < n * 8 {
            return Err(malformed(format!("tensor {name} truncated")));
        }
        let (head, tail) = r.split_at(n * 8);
        let data = head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        r = tail;
        let t = Tensor::new(shape, data).map_err(malformed)?;
        params.insert(name, t);
    }
    if !r.is_empty() {
        return Err(malformed(format!("{} trailing bytes", r.len())));
    }
    Ok(params)
}

fn read_u32(r: &mut &[u8]) -> Result<u32, NtenError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(malformed)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save(params: &ParamSet, path: impl AsRef<Path>) -> Result<(), NtenError> {
    let path = path.as_ref();
    fs::write(path, to_bytes(params)).map_err(|source| NtenError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamSet, NtenError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| NtenError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut p = ParamSet::new();
        p.insert("ab", Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap());
        let bytes = to_bytes(&p);
        let mut expect = b"NTEN".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u16.to_le_bytes());
        expect.extend(b"ab");
        expect.push(2);
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-0.5f64).to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(from_bytes(b"NOPE\0\0\0\0"), Err(NtenError::BadMagic(_))));
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let bytes = to_bytes(&p);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load("/definitely/not/here.nten").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.nten"));
    }
}
