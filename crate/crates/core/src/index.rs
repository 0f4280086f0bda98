//! Exact k-NN search over labelled source embeddings, thresholded voting,
//! module-level aggregation and k-means compression.

use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BinaryLabel, FaultClass, ImageId, ModuleId, PlantId};
use crate::encoder::Embedding;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_DELTA: f64 = 0.1;
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

const KMEANS_MAX_ITERATIONS: usize = 100;
const KMEANS_TOLERANCE: f64 = 1e-6;

/// Identity and label of one stored embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub image_id: ImageId,
    pub plant_id: PlantId,
    pub module_id: ModuleId,
    pub label: BinaryLabel,
    pub fault_class: Option<FaultClass>,
}

/// Immutable store of labelled unit-norm embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyIndex {
    dim: usize,
    vectors: Vec<f32>,
    entries: Vec<IndexEntry>,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Euclidean distance accumulated in f64.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn build_index(embeddings: &[Embedding]) -> Result<AnomalyIndex> {
    let first = embeddings.first().ok_or(Error::Empty("index input"))?;
    let dim = first.z.len();
    let mut vectors = Vec::with_capacity(dim * embeddings.len());
    let mut entries = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        if e.z.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: e.z.len() });
        }
        let n = norm(&e.z);
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidConfig(format!("embedding of image {} has norm {n}", e.image_id)));
        }
        let label = e
            .binary_label
            .ok_or_else(|| Error::InvalidConfig(format!("source embedding of image {} is unlabelled", e.image_id)))?;
        vectors.extend_from_slice(&e.z);
        entries.push(IndexEntry {
            image_id: e.image_id,
            plant_id: e.plant_id,
            module_id: e.module_id,
            label,
            fault_class: e.fault_class,
        });
    }
    Ok(AnomalyIndex { dim, vectors, entries })
}

/// The `k` nearest stored embeddings of a query.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    /// Ascending.
    pub distances: Vec<f64>,
    pub anomaly_fraction: f64,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl AnomalyIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entry(&self, i: usize) -> &IndexEntry {
        &self.entries[i]
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Stored records as embeddings, in index order.
    pub fn to_embeddings(&self) -> Vec<Embedding> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| Embedding {
                z: self.vector(i).to_vec(),
                image_id: e.image_id,
                plant_id: e.plant_id,
                module_id: e.module_id,
                binary_label: Some(e.label),
                fault_class: e.fault_class,
            })
            .collect()
    }

    pub fn anomaly_fraction(&self) -> f64 {
        self.entries.iter().filter(|e| e.label.is_anomalous()).count() as f64 / self.len() as f64
    }

    /// Exact full scan; equal distances are ordered by lower index.
    pub fn query(&self, z: &[f32], k: usize) -> Result<NeighborSet> {
        if k == 0 || k > self.len() {
            return Err(Error::KOutOfRange { k, count: self.len() });
        }
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: z.len() });
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for i in 0..self.len() {
            let c = Candidate(euclidean(z, self.vector(i)), i);
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().unwrap() {
                heap.pop();
                heap.push(c);
            }
        }
        let sorted = heap.into_sorted_vec();
        let anomalous = sorted.iter().filter(|c| self.entries[c.1].label.is_anomalous()).count();
        Ok(NeighborSet {
            indices: sorted.iter().map(|c| c.1).collect(),
            distances: sorted.iter().map(|c| c.0).collect(),
            anomaly_fraction: anomalous as f64 / k as f64,
        })
    }
}

/// Anomalous iff `score` strictly exceeds `delta`.
pub fn classify(score: f64, delta: f64) -> BinaryLabel {
    if score > delta {
        BinaryLabel::Anomalous
    } else {
        BinaryLabel::Normal
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&delta) {
        Ok(())
    } else {
        Err(Error::ThresholdOutOfRange(delta))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: ImageId,
    pub plant_id: PlantId,
    pub module_id: ModuleId,
    pub score: f64,
    pub verdict: BinaryLabel,
    pub k: usize,
    pub delta: f64,
    /// Ground truth carried from the target image when known (evaluation only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_label: Option<BinaryLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_class: Option<FaultClass>,
}

impl Prediction {
    /// Recomputes the verdict for another threshold; the score is untouched.
    pub fn with_delta(&self, delta: f64) -> Prediction {
        Prediction { verdict: classify(self.score, delta), delta, ..self.clone() }
    }
}

pub fn predict_batch(index: &AnomalyIndex, targets: &[Embedding], k: usize, delta: f64) -> Result<Vec<Prediction>> {
    check_delta(delta)?;
    if k == 0 || k > index.len() {
        return Err(Error::KOutOfRange { k, count: index.len() });
    }
    targets
        .iter()
        .map(|t| {
            let neighbors = index.query(&t.z, k)?;
            Ok(Prediction {
                image_id: t.image_id,
                plant_id: t.plant_id,
                module_id: t.module_id,
                score: neighbors.anomaly_fraction,
                verdict: classify(neighbors.anomaly_fraction, delta),
                k,
                delta,
                binary_label: t.binary_label,
                fault_class: t.fault_class,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleVerdict {
    pub plant_id: PlantId,
    pub module_id: ModuleId,
    pub verdict: BinaryLabel,
    /// Mean image score.
    pub score: f64,
    pub images: usize,
    pub anomalous_images: usize,
    /// Ground truth when every image of the module carries one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_label: Option<BinaryLabel>,
}

/// Anomalous iff at least half of the module's images are predicted anomalous.
pub fn aggregate_module(predictions: &[Prediction]) -> Result<ModuleVerdict> {
    let first = predictions.first().ok_or(Error::Empty("module predictions"))?;
    if let Some(other) = predictions.iter().find(|p| (p.plant_id, p.module_id) != (first.plant_id, first.module_id)) {
        return Err(Error::MixedModules(first.module_id.0, other.module_id.0));
    }
    let anomalous = predictions.iter().filter(|p| p.verdict.is_anomalous()).count();
    // summed in sorted order so the mean does not depend on input order
    let mut scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    scores.sort_by(f64::total_cmp);
    let score = scores.iter().sum::<f64>() / predictions.len() as f64;
    let truth = if predictions.iter().all(|p| p.binary_label.is_some()) {
        Some(if predictions.iter().any(|p| p.binary_label == Some(BinaryLabel::Anomalous)) {
            BinaryLabel::Anomalous
        } else {
            BinaryLabel::Normal
        })
    } else {
        None
    };
    Ok(ModuleVerdict {
        plant_id: first.plant_id,
        module_id: first.module_id,
        verdict: if 2 * anomalous >= predictions.len() { BinaryLabel::Anomalous } else { BinaryLabel::Normal },
        score,
        images: predictions.len(),
        anomalous_images: anomalous,
        binary_label: truth,
    })
}

/// Groups by (plant, module) and aggregates each group, ordered by key.
pub fn aggregate_modules(predictions: &[Prediction]) -> Result<Vec<ModuleVerdict>> {
    let mut groups: BTreeMap<(PlantId, ModuleId), Vec<Prediction>> = BTreeMap::new();
    for p in predictions {
        groups.entry((p.plant_id, p.module_id)).or_default().push(p.clone());
    }
    groups.values().map(|g| aggregate_module(g)).collect()
}

/// Replaces the index by `m` labelled centroids.
///
/// Centroids are allotted to the two classes in proportion to their sizes
/// (largest remainder, at least one per present class); each class is
/// clustered separately with seeded farthest-point initialization and Lloyd
/// iterations, and centroids are projected back onto the unit sphere.
pub fn compress_index(index: &AnomalyIndex, m: usize, seed: u64) -> Result<AnomalyIndex> {
    let mut by_class: BTreeMap<BinaryLabel, Vec<usize>> = BTreeMap::new();
    for (i, e) in index.entries.iter().enumerate() {
        by_class.entry(e.label).or_default().push(i);
    }
    if m > index.len() {
        return Err(Error::Compression(format!("{m} centroids requested for {} embeddings", index.len())));
    }
    if m < by_class.len() {
        return Err(Error::Compression(format!("{m} centroids cannot cover {} classes", by_class.len())));
    }
    let allotment = allot(m, &by_class.values().map(Vec::len).collect::<Vec<_>>());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embeddings = Vec::with_capacity(m);
    for ((label, members), &clusters) in by_class.iter().zip(&allotment) {
        let points: Vec<&[f32]> = members.iter().map(|&i| index.vector(i)).collect();
        let centroids = kmeans(&points, clusters, &mut rng);
        for centroid in centroids {
            let n = centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(Error::DegenerateEmbedding);
            }
            let z: Vec<f32> = centroid.iter().map(|x| (x / n) as f32).collect();
            // identity of the member closest to the centroid
            let nearest = members
                .iter()
                .copied()
                .min_by(|&a, &b| euclidean(&z, index.vector(a)).total_cmp(&euclidean(&z, index.vector(b))).then(a.cmp(&b)))
                .unwrap();
            let e = index.entries[nearest];
            embeddings.push(Embedding {
                z,
                image_id: e.image_id,
                plant_id: e.plant_id,
                module_id: e.module_id,
                binary_label: Some(*label),
                fault_class: e.fault_class,
            });
        }
    }
    build_index(&embeddings)
}

fn allot(m: usize, sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let quotas: Vec<f64> = sizes.iter().map(|&s| m as f64 * s as f64 / total as f64).collect();
    let mut out: Vec<usize> = quotas.iter().zip(sizes).map(|(q, &s)| (q.floor() as usize).clamp(1, s)).collect();
    let remainder = |i: usize, out: &[usize]| quotas[i] - out[i] as f64;
    loop {
        let sum: usize = out.iter().sum();
        if sum == m {
            return out;
        }
        let candidates = (0..sizes.len()).filter(|&i| if sum < m { out[i] < sizes[i] } else { out[i] > 1 });
        // grow the largest shortfall, shrink the largest excess; ties to the lower class
        let pick = if sum < m {
            candidates.fold(None, |b: Option<usize>, i| match b {
                Some(b) if remainder(b, &out) >= remainder(i, &out) => Some(b),
                _ => Some(i),
            })
        } else {
            candidates.fold(None, |b: Option<usize>, i| match b {
                Some(b) if remainder(b, &out) <= remainder(i, &out) => Some(b),
                _ => Some(i),
            })
        };
        let i = pick.expect("allotment within bounds");
        if sum < m {
            out[i] += 1;
        } else {
            out[i] -= 1;
        }
    }
}

fn sq_dist(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - f64::from(y)).powi(2)).sum()
}

fn kmeans(points: &[&[f32]], clusters: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let first = rng.random_range(0..points.len());
    let mut chosen = vec![first];
    let mut centers: Vec<Vec<f64>> = vec![points[first].iter().map(|&x| f64::from(x)).collect()];
    let mut min_dist: Vec<f64> = points.iter().map(|p| sq_dist(&centers[0], p)).collect();
    while centers.len() < clusters {
        let mut best: Option<usize> = None;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let next = best.expect("more clusters than points");
        chosen.push(next);
        let c: Vec<f64> = points[next].iter().map(|&x| f64::from(x)).collect();
        for (d, p) in min_dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(&c, p));
        }
        centers.push(c);
    }

    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut sums = vec![vec![0.0f64; dim]; clusters];
        let mut counts = vec![0usize; clusters];
        for p in points {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(center, p);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            counts[best] += 1;
            for (s, &x) in sums[best].iter_mut().zip(p.iter()) {
                *s += f64::from(x);
            }
        }
        let mut shift = 0.0f64;
        for c in 0..clusters {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            let moved = new.iter().zip(&centers[c]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            shift = shift.max(moved);
            centers[c] = new;
        }
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }
    centers
}
