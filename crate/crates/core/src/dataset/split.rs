use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageId, IrImage, ModuleId, PlantId};
use crate::error::{Error, Result};

/// Module-disjoint train/test partition of image ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<ImageId>,
    pub test: Vec<ImageId>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn train_images<'a>(&self, images: &'a [IrImage]) -> Vec<&'a IrImage> {
        let keep: std::collections::HashSet<ImageId> = self.train.iter().copied().collect();
        images.iter().filter(|i| keep.contains(&i.image_id)).collect()
    }

    pub fn test_images<'a>(&self, images: &'a [IrImage]) -> Vec<&'a IrImage> {
        let keep: std::collections::HashSet<ImageId> = self.test.iter().copied().collect();
        images.iter().filter(|i| keep.contains(&i.image_id)).collect()
    }
}

/// Shuffles modules with `seed` and moves them to train until the train image
/// fraction first reaches `ratio`. At least one module always lands in test.
pub fn split_dataset(images: &[IrImage], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut modules: BTreeMap<(PlantId, ModuleId), Vec<ImageId>> = BTreeMap::new();
    for image in images {
        modules.entry(image.module_key()).or_default().push(image.image_id);
    }
    if modules.len() < 2 {
        return Err(Error::TooFewModules(modules.len()));
    }
    let mut order: Vec<Vec<ImageId>> = modules.into_values().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = images.len() as f64;
    let mut split = DatasetSplit { train: Vec::new(), test: Vec::new(), seed };
    let last = order.len() - 1;
    for (i, ids) in order.into_iter().enumerate() {
        let reached = split.train.len() as f64 / total >= ratio;
        if reached || i == last {
            split.test.extend(ids);
        } else {
            split.train.extend(ids);
        }
    }
    Ok(split)
}
