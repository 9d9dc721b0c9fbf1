//! The `CMG1` sample file and its JSON sidecar.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"CMG1"  u32 count
//! count x { u32 frames  u32 bins  u32 valid_frames  f32 values[frames * bins] }
//! ```
//!
//! Values are row-major. The first `valid_frames` frames are real content,
//! the rest padding.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::model::Sample;
use crate::tensor::Array;

pub const MAGIC: &[u8; 4] = b"CMG1";

/// Run information stored next to a sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub config_hash: String,
    pub count: usize,
    /// Generation steps, when the samples came from `generate`.
    pub steps: Option<usize>,
    /// Wall time spent generating, for real-time-factor reports.
    pub synthesis_seconds: Option<f64>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Encodes samples. The mask must mark a prefix of the frames as valid.
pub fn encode_samples(samples: &[Sample]) -> Result<Vec<u8>, HarnessError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&to_u32(samples.len(), "count")?.to_le_bytes());
    for (i, s) in samples.iter().enumerate() {
        let valid = s.valid_frames();
        if s.mask()[..valid].iter().any(|m| !m) {
            return Err(HarnessError::Format(format!(
                "sample {i}: mask is not a prefix of valid frames"
            )));
        }
        for v in [s.frames(), s.bins(), valid] {
            out.extend_from_slice(&to_u32(v, "dimension")?.to_le_bytes());
        }
        for v in s.values().data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_samples(bytes: &[u8]) -> Result<Vec<Sample>, HarnessError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(HarnessError::Format("missing CMG1 magic".into()));
    }
    let count = r.u32("count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let frames = r.u32("frames")? as usize;
        let bins = r.u32("bins")? as usize;
        let valid = r.u32("valid_frames")? as usize;
        if frames == 0 || bins == 0 || valid == 0 || valid > frames {
            return Err(HarnessError::Format(format!(
                "sample {i}: inconsistent shape frames={frames} bins={bins} valid={valid}"
            )));
        }
        let n = frames
            .checked_mul(bins)
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| HarnessError::Format(format!("sample {i}: shape overflows")))?;
        let raw = r.take(n * 4, "values")?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HarnessError::Format(format!("sample {i}: non-finite value")));
        }
        let array = Array::new(vec![frames, bins], values)?;
        samples.push(Sample::with_length(array, valid)?);
    }
    if r.pos != bytes.len() {
        return Err(HarnessError::Format(format!(
            "{} trailing bytes after {count} samples",
            bytes.len() - r.pos
        )));
    }
    Ok(samples)
}

pub fn write_samples(path: &Path, samples: &[Sample], meta: &SampleMeta) -> Result<(), HarnessError> {
    let bytes = encode_samples(samples)?;
    super::write_file(path, &bytes)?;
    let json = serde_json::to_vec_pretty(meta).expect("meta serializes");
    super::write_file(&meta_path(path), &json)
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode_samples(&bytes).map_err(|e| match e {
        HarnessError::Format(m) => HarnessError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// The sidecar of `path`, if there is one.
pub fn read_meta(path: &Path) -> Result<Option<SampleMeta>, HarnessError> {
    let meta = meta_path(path);
    match std::fs::read(&meta) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| HarnessError::Format(format!("{}: {e}", meta.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(HarnessError::io(&meta, e)),
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32, HarnessError> {
    u32::try_from(v).map_err(|_| HarnessError::Format(format!("{what} {v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], HarnessError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(HarnessError::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, HarnessError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(frames: usize, valid: usize, offset: f64) -> Sample {
        let data = (0..frames * 2).map(|i| offset + i as f64 * 0.25).collect();
        Sample::with_length(Array::new(vec![frames, 2], data).unwrap(), valid).unwrap()
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = encode_samples(&[sample(1, 1, 1.0)]).unwrap();
        assert_eq!(&bytes[..4], b"CMG1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn rejects_bad_magic_and_trailing_bytes() {
        let mut bytes = encode_samples(&[sample(2, 2, 0.0)]).unwrap();
        bytes.push(0);
        assert!(decode_samples(&bytes).is_err());
        bytes.pop();
        bytes[0] = b'X';
        assert!(matches!(decode_samples(&bytes), Err(HarnessError::Format(_))));
    }

    #[test]
    fn rejects_nan_and_bad_lengths() {
        let mut bytes = encode_samples(&[sample(2, 1, 0.0)]).unwrap();
        let mut nan = bytes.clone();
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_samples(&nan).is_err());
        // valid_frames > frames
        bytes[16..20].copy_from_slice(&3u32.to_le_bytes());
        assert!(decode_samples(&bytes).is_err());
    }
}
