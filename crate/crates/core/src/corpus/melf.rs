//! Log-mel spectrogram container and the `MELF` file format.
//!
//! Layout (little-endian): magic `MELF`, `u32` version (1), `u32` frame count,
//! `u32` mel count, then `frames * n_mels` `f32` values, row-major by frame.

use std::fs;
use std::path::Path;

use super::CorpusError;

pub const N_MELS: usize = 128;
pub const LOG_FLOOR: f64 = 1e-5;

const MAGIC: &[u8; 4] = b"MELF";
const VERSION: u32 = 1;

/// `frames x n_mels` natural-log mel magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    n_mels: usize,
    data: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, data: Vec<f32>) -> Result<Self, CorpusError> {
        if n_mels == 0 || data.is_empty() || data.len() % n_mels != 0 {
            return Err(CorpusError::Invalid(format!(
                "mel data of {} values does not form frames of {n_mels} bins",
                data.len()
            )));
        }
        Ok(Self { n_mels, data })
    }

    pub fn from_f64(n_mels: usize, data: &[f64]) -> Result<Self, CorpusError> {
        Self::new(n_mels, data.iter().map(|&v| v as f32).collect())
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.n_mels
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Same frames in reverse order.
    pub fn reversed(&self) -> Self {
        let data = (0..self.frames())
            .rev()
            .flat_map(|t| self.frame(t).iter().copied())
            .collect();
        Self {
            n_mels: self.n_mels,
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_mels as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CorpusError> {
        let bad = |msg: &str| CorpusError::Invalid(format!("malformed MELF: {msg}"));
        if bytes.len() < 16 {
            return Err(bad("header truncated"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != VERSION as usize {
            return Err(bad(&format!("unsupported version {}", word(4))));
        }
        let (frames, n_mels) = (word(8), word(12));
        let body = &bytes[16..];
        if frames == 0 || n_mels == 0 || body.len() != frames * n_mels * 4 {
            return Err(bad(&format!(
                "{frames}x{n_mels} header with {} payload bytes",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { n_mels, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| CorpusError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| CorpusError::Invalid(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let m = MelSpectrogram::new(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = m.to_bytes();
        assert_eq!(&b[..4], b"MELF");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(MelSpectrogram::from_bytes(&b).unwrap(), m);
    }

    #[test]
    fn rejects_inconsistent_payload() {
        let m = MelSpectrogram::new(2, vec![1.0, 2.0]).unwrap();
        let b = m.to_bytes();
        assert!(MelSpectrogram::from_bytes(&b[..b.len() - 1]).is_err());
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(MelSpectrogram::from_bytes(&v2).is_err());
        assert!(MelSpectrogram::new(3, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn reversal_flips_frames() {
        let m = MelSpectrogram::new(1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.reversed().data(), &[3.0, 2.0, 1.0]);
    }
}
