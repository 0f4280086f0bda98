//! IR imagery: identities, labels, preprocessing, splits, augmentation and
//! the two-domain synthetic generator.

mod augment;
mod manifest;
mod preprocess;
mod split;
pub mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment_batch, BatchTransform};
pub use manifest::{load_manifest, read_manifest_records, read_png16, write_manifest, write_png16, ManifestRecord};
pub use preprocess::{
    bilinear_resize, compute_plant_stats, normalize_minmax, preprocess, preprocess_all, raw_to_celsius,
    rotate_quarter_turns, Grid, PlantStats, PlantStatsTable, PreprocessedPatch, PATCH_CHANNELS, PATCH_LEN,
    PATCH_SIZE, STD_FLOOR,
};
pub use split::{split_dataset, DatasetSplit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlantId(pub u16);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModuleId(pub u32);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for PlantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Normal,
    Anomalous,
}

impl BinaryLabel {
    pub fn is_anomalous(self) -> bool {
        matches!(self, BinaryLabel::Anomalous)
    }
}

/// The ten fault classes, in the order used by the on-disk class codes (1..=10).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultClass {
    /// Module open circuit.
    Mh,
    /// Module short circuit.
    Mp,
    /// Substring open circuit.
    Sh,
    /// Substring short circuit.
    Sp,
    /// Potential-induced degradation.
    Pid,
    /// Multiple hot cells.
    #[serde(rename = "Cm+")]
    CmPlus,
    /// Single hot cell.
    #[serde(rename = "Cs+")]
    CsPlus,
    /// Warm cells.
    C,
    /// Overheated bypass diode.
    D,
    /// Hot spot.
    Chs,
}

impl FaultClass {
    pub const ALL: [FaultClass; 10] = [
        FaultClass::Mh,
        FaultClass::Mp,
        FaultClass::Sh,
        FaultClass::Sp,
        FaultClass::Pid,
        FaultClass::CmPlus,
        FaultClass::CsPlus,
        FaultClass::C,
        FaultClass::D,
        FaultClass::Chs,
    ];

    /// Classes withheld from the source in the unknown-anomaly protocol.
    pub const LEAVEOUT: [FaultClass; 5] =
        [FaultClass::Mp, FaultClass::Sh, FaultClass::Sp, FaultClass::CmPlus, FaultClass::CsPlus];

    pub fn code(self) -> u8 {
        FaultClass::ALL.iter().position(|&c| c == self).unwrap() as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<FaultClass> {
        match code {
            1..=10 => Some(FaultClass::ALL[code as usize - 1]),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultClass::Mh => "Mh",
            FaultClass::Mp => "Mp",
            FaultClass::Sh => "Sh",
            FaultClass::Sp => "Sp",
            FaultClass::Pid => "Pid",
            FaultClass::CmPlus => "Cm+",
            FaultClass::CsPlus => "Cs+",
            FaultClass::C => "C",
            FaultClass::D => "D",
            FaultClass::Chs => "Chs",
        }
    }
}

impl fmt::Display for FaultClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FaultClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        FaultClass::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown fault class '{s}'"))
    }
}

/// Affine radiometric calibration from 16-bit counts to degrees Celsius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Radiometry {
    pub gain: f64,
    pub offset: f64,
}

impl Default for Radiometry {
    fn default() -> Self {
        Radiometry { gain: 0.04, offset: -273.15 }
    }
}

/// A raw single-channel 16-bit frame in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl RawFrame {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Option<Self> {
        (data.len() == height * width).then_some(RawFrame { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u16) -> Self {
        RawFrame { height, width, data: vec![value; height * width] }
    }
}

pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct IrImage {
    pub image_id: ImageId,
    pub plant_id: PlantId,
    pub module_id: ModuleId,
    pub raw: RawFrame,
    /// Counter-clockwise quarter turns that bring the junction box to the top.
    pub orientation: u8,
    pub radiometry: Radiometry,
    pub binary_label: Option<BinaryLabel>,
    pub fault_class: Option<FaultClass>,
}

impl IrImage {
    /// Checks the label consistency and minimum size invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidImage { id: self.image_id, reason });
        if self.raw.height < MIN_IMAGE_SIDE || self.raw.width < MIN_IMAGE_SIDE {
            return fail(format!(
                "frame is {}x{}, both sides must be at least {MIN_IMAGE_SIDE}",
                self.raw.height, self.raw.width
            ));
        }
        if self.raw.data.len() != self.raw.height * self.raw.width {
            return fail("pixel count does not match frame dimensions".into());
        }
        if self.fault_class.is_some() && self.binary_label != Some(BinaryLabel::Anomalous) {
            return fail("fault class given but binary label is not anomalous".into());
        }
        if self.fault_class.is_none() && self.binary_label == Some(BinaryLabel::Anomalous) {
            return fail("anomalous label without a fault class".into());
        }
        if !(self.radiometry.gain > 0.0) || !self.radiometry.offset.is_finite() {
            return fail(format!("invalid radiometry {:?}", self.radiometry));
        }
        Ok(())
    }

    /// Module key that is unique across plants.
    pub fn module_key(&self) -> (PlantId, ModuleId) {
        (self.plant_id, self.module_id)
    }

    pub fn is_anomalous(&self) -> bool {
        self.binary_label == Some(BinaryLabel::Anomalous)
    }
}
