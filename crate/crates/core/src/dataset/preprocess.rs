use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BinaryLabel, FaultClass, ImageId, IrImage, ModuleId, PlantId};
use crate::error::{Error, Result};

pub const PATCH_SIZE: usize = 64;
pub const PATCH_CHANNELS: usize = 3;
pub const PATCH_LEN: usize = PATCH_CHANNELS * PATCH_SIZE * PATCH_SIZE;
pub const STD_FLOOR: f64 = 1e-6;

/// Row-major 2D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "grid data does not match {height}x{width}");
        Grid { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Rotates counter-clockwise by `turns` quarter turns.
pub fn rotate_quarter_turns<T: Copy>(grid: &Grid<T>, turns: u8) -> Grid<T> {
    let mut out = grid.clone();
    for _ in 0..turns % 4 {
        let (h, w) = (out.height, out.width);
        let mut data = Vec::with_capacity(h * w);
        for i in 0..w {
            for j in 0..h {
                data.push(out.data[j * w + (w - 1 - i)]);
            }
        }
        out = Grid { height: w, width: h, data };
    }
    out
}

pub fn raw_to_celsius(raw: &Grid<u16>, gain: f64, offset: f64) -> Grid<f64> {
    raw.map(|v| gain * f64::from(v) + offset)
}

/// Min-max scales to `[0, 255]` with round-half-up. A constant grid maps to zeros.
pub fn normalize_minmax(celsius: &Grid<f64>) -> Grid<u8> {
    let (min, max) = celsius
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(max > min) {
        return celsius.map(|_| 0u8);
    }
    let range = max - min;
    celsius.map(|t| (255.0 * (t - min) / range + 0.5).floor().clamp(0.0, 255.0) as u8)
}

/// Bilinear resampling with corner-aligned sample positions.
pub fn bilinear_resize(grid: &Grid<f64>, out_height: usize, out_width: usize) -> Grid<f64> {
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        (0..out_len)
            .map(|i| {
                let pos = if out_len > 1 {
                    i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
                } else {
                    0.0
                };
                let lo = (pos.floor() as usize).min(in_len - 1);
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = axis(out_height, grid.height);
    let cols = axis(out_width, grid.width);
    let mut data = Vec::with_capacity(out_height * out_width);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = grid.at(r0, c0) * (1.0 - fx) + grid.at(r0, c1) * fx;
            let bottom = grid.at(r1, c0) * (1.0 - fx) + grid.at(r1, c1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Grid::new(out_height, out_width, data)
}

/// Per-plant standardization constants in 8-bit intensity units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantStats {
    pub plant_id: PlantId,
    pub mean: f64,
    pub std: f64,
}

impl PlantStats {
    pub fn identity(plant_id: PlantId) -> Self {
        PlantStats { plant_id, mean: 0.0, std: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantStatsTable {
    pub plants: BTreeMap<PlantId, PlantStats>,
}

impl PlantStatsTable {
    pub fn insert(&mut self, stats: PlantStats) {
        self.plants.insert(stats.plant_id, stats);
    }

    pub fn get(&self, plant: PlantId) -> Result<&PlantStats> {
        self.plants.get(&plant).ok_or(Error::MissingPlantStats(plant))
    }

    /// Stats for every plant present in `images`.
    pub fn from_images(images: &[IrImage]) -> Result<Self> {
        let plants: std::collections::BTreeSet<PlantId> = images.iter().map(|i| i.plant_id).collect();
        let mut table = PlantStatsTable::default();
        for plant in plants {
            table.insert(compute_plant_stats(images, plant)?);
        }
        Ok(table)
    }
}

/// Everything up to (excluding) standardization: rotate, convert, min-max, resize.
fn intensity_patch(image: &IrImage) -> Grid<f64> {
    let raw = Grid::new(image.raw.height, image.raw.width, image.raw.data.clone());
    let upright = rotate_quarter_turns(&raw, image.orientation);
    let celsius = raw_to_celsius(&upright, image.radiometry.gain, image.radiometry.offset);
    let eight_bit = normalize_minmax(&celsius).map(f64::from);
    bilinear_resize(&eight_bit, PATCH_SIZE, PATCH_SIZE)
}

/// Population mean and standard deviation of all resized 8-bit pixels of the
/// given plant's images. Pass only train-split images.
pub fn compute_plant_stats(images: &[IrImage], plant_id: PlantId) -> Result<PlantStats> {
    let mut count = 0usize;
    let mut sum = 0.0f64;
    let mut patches = Vec::new();
    for image in images.iter().filter(|i| i.plant_id == plant_id) {
        let patch = intensity_patch(image);
        sum += patch.data.iter().sum::<f64>();
        count += patch.data.len();
        patches.push(patch);
    }
    if count == 0 {
        return Err(Error::EmptyPlant(plant_id));
    }
    let mean = sum / count as f64;
    let var = patches
        .iter()
        .flat_map(|p| p.data.iter())
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count as f64;
    Ok(PlantStats { plant_id, mean, std: var.sqrt().max(STD_FLOOR) })
}

/// A standardized 3x64x64 (CHW) patch with the source image's identity and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedPatch {
    pub tensor: Vec<f32>,
    pub image_id: ImageId,
    pub plant_id: PlantId,
    pub module_id: ModuleId,
    pub binary_label: Option<BinaryLabel>,
    pub fault_class: Option<FaultClass>,
}

impl PreprocessedPatch {
    pub fn is_anomalous(&self) -> bool {
        self.binary_label == Some(BinaryLabel::Anomalous)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = PATCH_SIZE * PATCH_SIZE;
        &self.tensor[c * plane..(c + 1) * plane]
    }
}

pub fn preprocess(image: &IrImage, stats: &PlantStats) -> Result<PreprocessedPatch> {
    if stats.plant_id != image.plant_id {
        return Err(Error::MissingPlantStats(image.plant_id));
    }
    image.validate()?;
    let patch = intensity_patch(image);
    let plane: Vec<f32> = patch.data.iter().map(|&v| ((v - stats.mean) / stats.std) as f32).collect();
    let mut tensor = Vec::with_capacity(PATCH_LEN);
    for _ in 0..PATCH_CHANNELS {
        tensor.extend_from_slice(&plane);
    }
    Ok(PreprocessedPatch {
        tensor,
        image_id: image.image_id,
        plant_id: image.plant_id,
        module_id: image.module_id,
        binary_label: image.binary_label,
        fault_class: image.fault_class,
    })
}

pub fn preprocess_all<'a>(
    images: impl IntoIterator<Item = &'a IrImage>,
    stats: &PlantStatsTable,
) -> Result<Vec<PreprocessedPatch>> {
    images.into_iter().map(|image| preprocess(image, stats.get(image.plant_id)?)).collect()
}
