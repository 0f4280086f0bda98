//! Desk-scale synthetic PV plants.
//!
//! Each module is rendered as a frame around a grid of cells, split column-wise
//! into three substrings, with the junction box at the top in canonical
//! orientation. Faults add heat to regions of the cell area. Plants differ in
//! base temperature, noise, cell grid, resolution and a top-to-bottom gradient,
//! which produces a domain shift between plants.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, write_png16, ManifestRecord};
use super::preprocess::{rotate_quarter_turns, Grid};
use super::{BinaryLabel, FaultClass, ImageId, IrImage, ModuleId, PlantId, Radiometry, RawFrame};
use crate::error::{Error, Result};

const FRAME_DROP_C: f64 = 2.5;
const GAP_DROP_C: f64 = 0.4;
const CELL_OFFSET_SD_C: f64 = 0.2;
const CELL_OFFSET_CLIP_C: f64 = 0.5;
const VIEW_OFFSET_SD_C: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub plant_id: u16,
    pub modules: u32,
    pub base_temp_c: f64,
    pub noise_sigma_c: f64,
    /// Cell columns; split into three substrings.
    pub cells_x: u32,
    pub cells_y: u32,
    /// Canonical (junction box up) image size in pixels.
    pub height: u32,
    pub width: u32,
    /// Temperature rise from the top to the bottom edge.
    #[serde(default)]
    pub gradient_c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub images_per_module: u32,
    /// Minimum excess of the hottest fault pixel over the module median (all classes but Mp).
    #[serde(default = "default_margin")]
    pub fault_margin_c: f64,
    /// Per-class probability that a module carries that fault; the remainder is normal.
    pub fault_mix: BTreeMap<String, f64>,
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default = "default_offset")]
    pub offset: f64,
    pub plants: Vec<PlantSpec>,
}

fn default_margin() -> f64 {
    3.0
}

fn default_gain() -> f64 {
    Radiometry::default().gain
}

fn default_offset() -> f64 {
    Radiometry::default().offset
}

pub fn uniform_fault_mix(anomaly_fraction: f64) -> BTreeMap<String, f64> {
    FaultClass::ALL.iter().map(|c| (c.name().to_string(), anomaly_fraction / 10.0)).collect()
}

impl SynthConfig {
    /// Two plants with 300 modules of 5 views each and 10% anomalous modules.
    pub fn two_plant_desk(seed: u64) -> Self {
        SynthConfig {
            seed,
            images_per_module: 3,
            fault_margin_c: default_margin(),
            fault_mix: uniform_fault_mix(0.1),
            gain: default_gain(),
            offset: default_offset(),
            plants: vec![
                PlantSpec {
                    plant_id: 0,
                    modules: 600,
                    base_temp_c: 31.0,
                    noise_sigma_c: 0.25,
                    cells_x: 6,
                    cells_y: 10,
                    height: 60,
                    width: 36,
                    gradient_c: 0.4,
                },
                PlantSpec {
                    plant_id: 1,
                    modules: 600,
                    base_temp_c: 46.0,
                    noise_sigma_c: 0.5,
                    cells_x: 6,
                    cells_y: 12,
                    height: 44,
                    width: 24,
                    gradient_c: -0.6,
                },
            ],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SynthConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("synthetic config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("synthetic config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.images_per_module < 1 {
            return bad("images_per_module must be at least 1".into());
        }
        if self.plants.is_empty() {
            return bad("at least one plant is required".into());
        }
        if !(self.gain > 0.0) || !self.offset.is_finite() {
            return bad("gain must be positive and offset finite".into());
        }
        if !(self.fault_margin_c >= 0.0) {
            return bad("fault_margin_c must be non-negative".into());
        }
        let mut total = 0.0;
        for (name, &p) in &self.fault_mix {
            name.parse::<FaultClass>().map_err(Error::InvalidConfig)?;
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability of {name} is {p}, outside [0, 1]"));
            }
            total += p;
        }
        if total > 1.0 + 1e-9 {
            return bad(format!("fault probabilities sum to {total} > 1"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for plant in &self.plants {
            if !ids.insert(plant.plant_id) {
                return bad(format!("duplicate plant id {}", plant.plant_id));
            }
            if plant.cells_x < 3 || plant.cells_y < 2 {
                return bad(format!("plant {}: need at least 3x2 cells", plant.plant_id));
            }
            if plant.height < 2 * plant.cells_y + 2 || plant.width < 2 * plant.cells_x + 2 {
                return bad(format!("plant {}: resolution too small for its cell grid", plant.plant_id));
            }
            if !(plant.noise_sigma_c >= 0.0) || !plant.base_temp_c.is_finite() || !plant.gradient_c.is_finite() {
                return bad(format!("plant {}: invalid temperatures", plant.plant_id));
            }
        }
        Ok(())
    }

    fn fault_probabilities(&self) -> Vec<(FaultClass, f64)> {
        let mut out: Vec<(FaultClass, f64)> =
            self.fault_mix.iter().map(|(name, &p)| (name.parse::<FaultClass>().unwrap(), p)).collect();
        out.sort_by_key(|(c, _)| *c);
        out
    }
}

/// Fault geometry in cell coordinates, independent of the rendered resolution.
#[derive(Clone, Debug, PartialEq)]
enum Fault {
    WholeModule { delta: f64 },
    Substring { index: u32, delta: f64 },
    Cells { cells: Vec<(u32, u32)>, delta: f64 },
    /// Rectangle centred on the boundary after `boundary` substrings, in the top cell row.
    Diode { boundary: u32, delta: f64 },
    /// Disc centred in a cell, radius as a fraction of the cell width.
    Disc { cell: (u32, u32), radius: f64, delta: f64 },
}

struct ModulePlan<'a> {
    plant: &'a PlantSpec,
    fault: Option<(FaultClass, Fault)>,
    cell_offsets: Vec<f64>,
    orientation: u8,
}

/// Per-view reference values used to check fault visibility.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewReference {
    /// Median temperature of the same view rendered without its fault.
    pub clean_median_c: f64,
    pub hottest_c: f64,
}

struct Deltas {
    mild: f64,
    strong: f64,
    slight: f64,
}

fn deltas(config: &SynthConfig, plant: &PlantSpec) -> Deltas {
    // worst case spread between a hot-region pixel and the clean median:
    // clipped noise on both sides, cell offsets, gap lines and the gradient
    let spread = 6.0 * plant.noise_sigma_c + 2.0 * CELL_OFFSET_CLIP_C + GAP_DROP_C + plant.gradient_c.abs();
    let mild = config.fault_margin_c + spread + 1.0;
    Deltas { mild, strong: mild + 6.0, slight: 0.6 * config.fault_margin_c }
}

fn plan_fault(class: FaultClass, plant: &PlantSpec, d: &Deltas, rng: &mut ChaCha8Rng) -> Fault {
    let random_cell = |rng: &mut ChaCha8Rng| (rng.random_range(0..plant.cells_y), rng.random_range(0..plant.cells_x));
    let distinct_cells = |rng: &mut ChaCha8Rng, n: usize| {
        let mut cells = Vec::new();
        while cells.len() < n {
            let c = random_cell(rng);
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        cells
    };
    match class {
        FaultClass::Mh => Fault::WholeModule { delta: d.strong },
        FaultClass::Mp => Fault::WholeModule { delta: d.slight },
        FaultClass::Sh => Fault::Substring { index: rng.random_range(0..3), delta: d.strong },
        FaultClass::Sp => Fault::Substring { index: rng.random_range(0..3), delta: d.mild },
        FaultClass::Pid => {
            let bottom = plant.cells_y.min(2);
            let mut cells = Vec::new();
            for row in plant.cells_y - bottom..plant.cells_y {
                for col in 0..plant.cells_x {
                    if rng.random_bool(0.6) {
                        cells.push((row, col));
                    }
                }
            }
            if cells.is_empty() {
                cells.push((plant.cells_y - 1, rng.random_range(0..plant.cells_x)));
            }
            Fault::Cells { cells, delta: d.mild }
        }
        FaultClass::CmPlus => {
            let n = rng.random_range(3..=6);
            Fault::Cells { cells: distinct_cells(rng, n), delta: d.strong }
        }
        FaultClass::CsPlus => Fault::Cells { cells: distinct_cells(rng, 1), delta: d.strong },
        FaultClass::C => {
            let n = rng.random_range(1..=2);
            Fault::Cells { cells: distinct_cells(rng, n), delta: d.mild }
        }
        FaultClass::D => Fault::Diode { boundary: rng.random_range(1..3), delta: d.strong },
        FaultClass::Chs => Fault::Disc { cell: random_cell(rng), radius: rng.random_range(0.2..=0.5), delta: d.strong },
    }
}

struct ViewParams {
    height: usize,
    width: usize,
    offset_c: f64,
    noise_seed: u64,
}

/// Renders a canonical view in degrees Celsius.
fn render_view(plan: &ModulePlan, view: &ViewParams, with_fault: bool) -> Grid<f64> {
    let plant = plan.plant;
    let (h, w) = (view.height, view.width);
    let border = ((h.min(w) as f64) / 24.0).round().max(1.0) as usize;
    let inner_h = (h - 2 * border) as f64;
    let inner_w = (w - 2 * border) as f64;
    let cell_h = inner_h / plant.cells_y as f64;
    let cell_w = inner_w / plant.cells_x as f64;
    let sub_w = inner_w / 3.0;
    let base = plant.base_temp_c + view.offset_c;

    let mut noise_rng = ChaCha8Rng::seed_from_u64(view.noise_seed);
    let noise = Normal::new(0.0, plant.noise_sigma_c.max(1e-12)).unwrap();
    let clip = 3.0 * plant.noise_sigma_c;

    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let gradient = plant.gradient_c * r as f64 / (h - 1) as f64;
            let mut eps = noise.sample(&mut noise_rng);
            if plant.noise_sigma_c == 0.0 {
                eps = 0.0;
            }
            let eps = eps.clamp(-clip, clip);
            let inside = r >= border && r < h - border && c >= border && c < w - border;
            if !inside {
                data.push(base - FRAME_DROP_C + gradient + eps);
                continue;
            }
            // continuous position inside the cell area
            let y = r as f64 - border as f64 + 0.5;
            let x = c as f64 - border as f64 + 0.5;
            let row = ((y / cell_h) as u32).min(plant.cells_y - 1);
            let col = ((x / cell_w) as u32).min(plant.cells_x - 1);
            let fy = y / cell_h - row as f64;
            let fx = x / cell_w - col as f64;
            let on_gap = cell_h >= 4.0 && cell_w >= 4.0 && (fy < 1.0 / cell_h || fx < 1.0 / cell_w);
            let mut t = base + plan.cell_offsets[(row * plant.cells_x + col) as usize] + gradient + eps;
            if on_gap {
                t -= GAP_DROP_C;
            }
            if with_fault {
                if let Some((_, fault)) = &plan.fault {
                    t += match fault {
                        Fault::WholeModule { delta } => *delta,
                        Fault::Substring { index, delta } => {
                            if ((x / sub_w) as u32).min(2) == *index {
                                *delta
                            } else {
                                0.0
                            }
                        }
                        Fault::Cells { cells, delta } => {
                            if cells.contains(&(row, col)) {
                                *delta
                            } else {
                                0.0
                            }
                        }
                        Fault::Diode { boundary, delta } => {
                            let bx = *boundary as f64 * sub_w;
                            let half_w = (cell_w / 3.0).max(1.0);
                            if (x - bx).abs() <= half_w && y <= (cell_h * 0.6).max(1.5) {
                                *delta
                            } else {
                                0.0
                            }
                        }
                        Fault::Disc { cell, radius, delta } => {
                            let cy = (cell.0 as f64 + 0.5) * cell_h;
                            let cx = (cell.1 as f64 + 0.5) * cell_w;
                            let rad = (radius * cell_w).max(0.75);
                            if (y - cy).hypot(x - cx) <= rad {
                                *delta
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
            data.push(t);
        }
    }
    Grid::new(h, w, data)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn to_raw(celsius: &Grid<f64>, gain: f64, offset: f64) -> Grid<u16> {
    celsius.map(|t| ((t - offset) / gain).round().clamp(0.0, f64::from(u16::MAX)) as u16)
}

/// Generates the dataset together with per-view reference temperatures.
pub fn synth_generate_with_reference(config: &SynthConfig) -> Result<Vec<(IrImage, ViewReference)>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let faults = config.fault_probabilities();
    let offset_dist = Normal::new(0.0, CELL_OFFSET_SD_C).unwrap();
    let view_dist = Normal::new(0.0, VIEW_OFFSET_SD_C).unwrap();
    let radiometry = Radiometry { gain: config.gain, offset: config.offset };

    let mut out = Vec::new();
    let mut next_image = 0u64;
    let mut next_module = 0u32;
    for plant in &config.plants {
        let d = deltas(config, plant);
        for _ in 0..plant.modules {
            let module_id = ModuleId(next_module);
            next_module += 1;

            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut class = None;
            for &(c, p) in &faults {
                acc += p;
                if u < acc {
                    class = Some(c);
                    break;
                }
            }
            let fault = class.map(|c| (c, plan_fault(c, plant, &d, &mut rng)));
            let cell_offsets = (0..plant.cells_x * plant.cells_y)
                .map(|_| offset_dist.sample(&mut rng).clamp(-CELL_OFFSET_CLIP_C, CELL_OFFSET_CLIP_C))
                .collect();
            let plan = ModulePlan { plant, fault, cell_offsets, orientation: rng.random_range(0..4) };

            for _ in 0..config.images_per_module {
                let view = ViewParams {
                    height: plant.height as usize + rng.random_range(0..=2),
                    width: plant.width as usize + rng.random_range(0..=2),
                    offset_c: view_dist.sample(&mut rng),
                    noise_seed: rng.random(),
                };
                let faulty = render_view(&plan, &view, true);
                let reference = ViewReference {
                    clean_median_c: median(&render_view(&plan, &view, false).data),
                    hottest_c: faulty.data.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
                // stored frames are rotated so that `orientation` turns restore the canonical view
                let stored = rotate_quarter_turns(&to_raw(&faulty, config.gain, config.offset), (4 - plan.orientation) % 4);
                let image = IrImage {
                    image_id: ImageId(next_image),
                    plant_id: PlantId(plant.plant_id),
                    module_id,
                    raw: RawFrame { height: stored.height, width: stored.width, data: stored.data },
                    orientation: plan.orientation,
                    radiometry,
                    binary_label: Some(if plan.fault.is_some() { BinaryLabel::Anomalous } else { BinaryLabel::Normal }),
                    fault_class: plan.fault.as_ref().map(|(c, _)| *c),
                };
                next_image += 1;
                out.push((image, reference));
            }
        }
    }
    Ok(out)
}

pub fn synth_generate(config: &SynthConfig) -> Result<Vec<IrImage>> {
    Ok(synth_generate_with_reference(config)?.into_iter().map(|(image, _)| image).collect())
}

/// Writes `images/<id>.png` files and `manifest.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, images: &[IrImage]) -> Result<Vec<ManifestRecord>> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut records = Vec::with_capacity(images.len());
    for image in images {
        let rel = format!("images/{:06}.png", image.image_id.0);
        write_png16(&dir.join(&rel), &image.raw)?;
        records.push(ManifestRecord {
            image_id: image.image_id,
            plant_id: image.plant_id,
            module_id: image.module_id,
            path: rel,
            orientation: image.orientation,
            binary_label: image.binary_label,
            fault_class: image.fault_class,
            gain: image.radiometry.gain,
            offset: image.radiometry.offset,
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
