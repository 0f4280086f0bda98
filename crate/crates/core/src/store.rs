//! Embedding store and prediction files.
//!
//! Embedding store, little-endian:
//!
//! ```text
//! "IREMB" | version u32 | d u32 | count u64
//! record = image_id u64 | plant_id u16 | module_id u32
//!        | label u8 (0 normal, 1 anomalous, 255 unlabelled)
//!        | fault u8 (0 none, 1..=10) | d × f32
//! ```

use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::dataset::{BinaryLabel, FaultClass, ImageId, ModuleId, PlantId};
use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::index::Prediction;
use crate::trainer::write_atomic;

const MAGIC: &[u8; 5] = b"IREMB";
const VERSION: u32 = 1;
const UNLABELLED: u8 = 255;

pub fn encode_embeddings(embeddings: &[Embedding]) -> Result<Vec<u8>> {
    let d = embeddings.first().map_or(0, |e| e.z.len());
    let mut out = Vec::with_capacity(25 + embeddings.len() * (16 + 4 * d));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(embeddings.len() as u64).to_le_bytes());
    for e in embeddings {
        if e.z.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: e.z.len() });
        }
        out.extend_from_slice(&e.image_id.0.to_le_bytes());
        out.extend_from_slice(&e.plant_id.0.to_le_bytes());
        out.extend_from_slice(&e.module_id.0.to_le_bytes());
        out.push(match e.binary_label {
            None => UNLABELLED,
            Some(BinaryLabel::Normal) => 0,
            Some(BinaryLabel::Anomalous) => 1,
        });
        out.push(e.fault_class.map_or(0, FaultClass::code));
        for &v in &e.z {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<Vec<Embedding>> {
    let bad = |reason: String| Error::format("embedding store", path, reason);
    if bytes.len() < 21 || &bytes[..5] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u32_at(5);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let d = u32_at(9) as usize;
    let count = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
    let record = 16 + 4 * d;
    let expected = (count as u128) * record as u128 + 21;
    if expected != bytes.len() as u128 {
        return Err(bad(format!("{} bytes for {count} records of dimension {d}", bytes.len())));
    }
    bytes[21..]
        .chunks_exact(record)
        .map(|r| {
            let image_id = ImageId(u64::from_le_bytes(r[0..8].try_into().unwrap()));
            let binary_label = match r[14] {
                0 => Some(BinaryLabel::Normal),
                1 => Some(BinaryLabel::Anomalous),
                UNLABELLED => None,
                other => return Err(bad(format!("image {image_id}: label code {other}"))),
            };
            let fault_class = match r[15] {
                0 => None,
                code => Some(FaultClass::from_code(code).ok_or_else(|| bad(format!("image {image_id}: fault code {code}")))?),
            };
            Ok(Embedding {
                z: r[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                image_id,
                plant_id: PlantId(u16::from_le_bytes(r[8..10].try_into().unwrap())),
                module_id: ModuleId(u32::from_le_bytes(r[10..14].try_into().unwrap())),
                binary_label,
                fault_class,
            })
        })
        .collect()
}

pub fn write_embeddings(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    write_atomic(path, &encode_embeddings(embeddings)?)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Embedding>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, path)
}

/// Any serializable records as JSON Lines, written atomically.
pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format("JSON Lines", path, e))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path, kind: &'static str) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(kind, path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    write_jsonl(path, predictions)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let predictions: Vec<Prediction> = read_jsonl(path, "predictions")?;
    for p in &predictions {
        if !(p.score.is_finite() && (0.0..=1.0).contains(&p.score)) {
            return Err(Error::format("predictions", path, format!("image {}: score {} outside [0, 1]", p.image_id, p.score)));
        }
    }
    Ok(predictions)
}
