//! Binary checkpoint format, little-endian:
//!
//! ```text
//! "TSCK" | version u32 | header_len u32 | header JSON
//! | n u32 | n × tensor                      parameters
//! | n u32 | n × tensor                      momentum buffers
//! | step u64 | seed u64
//! tensor = name_len u16 | name | rank u8 | rank × dim u32 | f32 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::encoder::{EncoderConfig, EncoderParameters, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TSCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: EncoderParameters<f32>,
    pub momentum: EncoderParameters<f32>,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for set in [&self.params, &self.momentum] {
            out.extend_from_slice(&(set.tensors.len() as u32).to_le_bytes());
            for t in &set.tensors {
                out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
                out.extend_from_slice(t.name.as_bytes());
                out.push(t.shape.len() as u8);
                for &dim in &t.shape {
                    out.extend_from_slice(&(dim as u32).to_le_bytes());
                }
                for &v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format("checkpoint", path, reason);
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).map_err(&bad)?;
        if magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u32().map_err(&bad)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.u32().map_err(&bad)? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len).map_err(&bad)?).map_err(|e| bad(format!("header: {e}")))?;
        header.encoder.validate()?;
        let mut sets = Vec::with_capacity(2);
        for _ in 0..2 {
            let expected = EncoderParameters::<f32>::zeros(&header.encoder)?;
            let count = r.u32().map_err(&bad)? as usize;
            if count != expected.tensors.len() {
                return Err(bad(format!("{count} tensors, expected {}", expected.tensors.len())));
            }
            let mut tensors = Vec::with_capacity(count);
            for e in &expected.tensors {
                let name_len = r.u16().map_err(&bad)? as usize;
                let name = String::from_utf8(r.take(name_len).map_err(&bad)?.to_vec())
                    .map_err(|_| bad("tensor name is not UTF-8".into()))?;
                let rank = r.take(1).map_err(&bad)?[0] as usize;
                let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>().map_err(&bad)?;
                if name != e.name || shape != e.shape {
                    return Err(bad(format!("tensor {name} {shape:?} does not match {} {:?}", e.name, e.shape)));
                }
                let n: usize = shape.iter().product();
                let raw = r.take(4 * n).map_err(&bad)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                tensors.push(Tensor { name, shape, data });
            }
            sets.push(EncoderParameters { config: header.encoder.clone(), tensors });
        }
        let step = r.u64().map_err(&bad)?;
        let seed = r.u64().map_err(&bad)?;
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let momentum = sets.pop().unwrap();
        let params = sets.pop().unwrap();
        Ok(Checkpoint { header, params, momentum, step, seed })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().ok_or_else(|| Error::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
