use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{BinaryLabel, FaultClass, ImageId, IrImage, ModuleId, PlantId, Radiometry, RawFrame};
use crate::error::{Error, Result};

/// One line of a dataset manifest (JSON Lines). `path` is relative to the
/// manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: ImageId,
    pub plant_id: PlantId,
    pub module_id: ModuleId,
    pub path: String,
    #[serde(default)]
    pub orientation: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_label: Option<BinaryLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_class: Option<FaultClass>,
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default = "default_offset")]
    pub offset: f64,
}

fn default_gain() -> f64 {
    Radiometry::default().gain
}

fn default_offset() -> f64 {
    Radiometry::default().offset
}

impl ManifestRecord {
    pub fn resolve(&self, base: &Path) -> PathBuf {
        let p = Path::new(&self.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

pub fn read_manifest_records(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format("manifest", path, format!("line {}: {e}", lineno + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Reads the manifest and every referenced image.
pub fn load_manifest(path: &Path) -> Result<Vec<IrImage>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest_records(path)?
        .into_iter()
        .map(|record| {
            let raw = read_png16(&record.resolve(base))?;
            let image = IrImage {
                image_id: record.image_id,
                plant_id: record.plant_id,
                module_id: record.module_id,
                raw,
                orientation: record.orientation % 4,
                radiometry: Radiometry { gain: record.gain, offset: record.offset },
                binary_label: record.binary_label,
                fault_class: record.fault_class,
            };
            image.validate()?;
            Ok(image)
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("manifest records always serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_png16(path: &Path) -> Result<RawFrame> {
    let decoded = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
    match decoded {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(RawFrame { height: h as usize, width: w as usize, data: buf.into_raw() })
        }
        other => Err(Error::format(
            "image",
            path,
            format!("expected 16-bit single-channel PNG, found {:?}", other.color()),
        )),
    }
}

pub fn write_png16(path: &Path, frame: &RawFrame) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(frame.width as u32, frame.height as u32, frame.data.clone())
            .ok_or_else(|| Error::format("image", path, "pixel count does not match dimensions"))?;
    buf.save(path).map_err(|source| Error::Image { path: path.into(), source })
}
