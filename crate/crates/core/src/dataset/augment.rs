use rand::Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::{rotate_quarter_turns, Grid, PreprocessedPatch, PATCH_CHANNELS, PATCH_SIZE};
use crate::error::{Error, Result};

/// One element of the flip/rotation group acting on square patches. Applied as
/// up-down flip, then left-right flip, then counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchTransform {
    pub flip_ud: bool,
    pub flip_lr: bool,
    pub quarter_turns: u8,
}

impl BatchTransform {
    pub const IDENTITY: BatchTransform = BatchTransform { flip_ud: false, flip_lr: false, quarter_turns: 0 };

    /// All 16 parameter tuples (8 distinct transforms).
    pub fn all() -> impl Iterator<Item = BatchTransform> {
        (0..16u8).map(|i| BatchTransform { flip_ud: i & 1 != 0, flip_lr: i & 2 != 0, quarter_turns: i >> 2 })
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        BatchTransform {
            flip_ud: rng.random_bool(0.5),
            flip_lr: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
        }
    }

    pub fn apply_grid<T: Copy>(&self, grid: &Grid<T>) -> Grid<T> {
        let (h, w) = (grid.height, grid.width);
        let mut out = grid.clone();
        if self.flip_ud {
            for r in 0..h {
                out.data[r * w..(r + 1) * w].copy_from_slice(&grid.data[(h - 1 - r) * w..(h - r) * w]);
            }
        }
        if self.flip_lr {
            for row in out.data.chunks_mut(w) {
                row.reverse();
            }
        }
        rotate_quarter_turns(&out, self.quarter_turns)
    }

    pub fn apply(&self, patch: &mut PreprocessedPatch) {
        if *self == Self::IDENTITY {
            return;
        }
        let plane = PATCH_SIZE * PATCH_SIZE;
        for c in 0..PATCH_CHANNELS {
            let slice = &mut patch.tensor[c * plane..(c + 1) * plane];
            let grid = Grid::new(PATCH_SIZE, PATCH_SIZE, slice.to_vec());
            slice.copy_from_slice(&self.apply_grid(&grid).data);
        }
    }

    /// Pixel permutation on a 3x3 probe, which identifies the group element.
    fn signature(&self) -> Vec<u8> {
        self.apply_grid(&Grid::new(3, 3, (0..9).collect())).data
    }

    pub fn same_action(&self, other: &BatchTransform) -> bool {
        self.signature() == other.signature()
    }

    /// The transform equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &BatchTransform) -> BatchTransform {
        let probe = next.apply_grid(&self.apply_grid(&Grid::new(3, 3, (0..9).collect()))).data;
        Self::all().find(|t| t.signature() == probe).expect("flip/rotation group is closed")
    }

    pub fn inverse(&self) -> BatchTransform {
        Self::all().find(|t| self.then(t).same_action(&Self::IDENTITY)).unwrap()
    }
}

/// Samples one transform and applies it to every patch of the batch.
pub fn augment_batch<R: Rng + ?Sized>(batch: &mut [PreprocessedPatch], rng: &mut R) -> Result<BatchTransform> {
    if batch.is_empty() {
        return Err(Error::Empty("augmentation batch"));
    }
    let transform = BatchTransform::sample(rng);
    for patch in batch.iter_mut() {
        transform.apply(patch);
    }
    Ok(transform)
}
