//! Binary checkpoint: `PFCK`, format version, a `key = value` text header
//! with the configuration and step, then named little-endian f64 arrays.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Detector, DetectorConfig, ParamStore};
use crate::assign::MatcherConfig;
use crate::autodiff::Array;
use crate::config;

const MAGIC: &[u8; 4] = b"PFCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    detector: DetectorConfig,
    matcher: MatcherConfig,
}

/// Everything stored in a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DetectorConfig,
    pub matcher: MatcherConfig,
    pub step: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn of(detector: &Detector) -> Self {
        Self {
            config: detector.config.clone(),
            matcher: detector.matcher.clone(),
            step: detector.step,
            params: detector.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = config::to_text(&Header {
            step: self.step,
            detector: self.config.clone(),
            matcher: self.matcher.clone(),
        });
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let header: Header = config::from_text(header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let array = Array::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            pairs.push((name, array));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            config: header.detector,
            matcher: header.matcher,
            step: header.step,
            params: ParamStore::from_pairs(pairs),
        })
    }

    /// Rebuilds a detector, checking the stored parameters against the
    /// layout implied by the stored configuration.
    pub fn into_detector(self) -> Result<Detector, CheckpointError> {
        let mut detector =
            Detector::build(self.config, self.matcher, 0).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let layout_ok = detector.params.len() == self.params.len()
            && detector
                .params
                .iter()
                .zip(self.params.iter())
                .all(|((a, av), (b, bv))| a == b && av.shape() == bv.shape());
        if !layout_ok {
            return Err(CheckpointError::Corrupt("parameter layout does not match config".into()));
        }
        detector.params = self.params;
        detector.step = self.step;
        Ok(detector)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(detector: &Detector, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, Checkpoint::of(detector).to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Detector, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)?.into_detector()
}
