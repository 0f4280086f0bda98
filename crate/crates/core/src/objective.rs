//! Training objectives: the normal-mean contrastive loss and the binary
//! cross-entropy baseline, each with its exact gradient.

use serde::{Deserialize, Serialize};

use crate::encoder::Real;
use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Indices of the normal and anomalous samples of a batch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLabels {
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

impl BatchLabels {
    pub fn from_flags(anomalous: &[bool]) -> Self {
        let mut labels = BatchLabels::default();
        for (i, &a) in anomalous.iter().enumerate() {
            if a {
                labels.anomalous.push(i);
            } else {
                labels.normal.push(i);
            }
        }
        labels
    }

    pub fn len(&self) -> usize {
        self.normal.len() + self.anomalous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_cover(&self, rows: usize) -> Result<()> {
        let mut seen = vec![false; rows];
        for &i in self.normal.iter().chain(&self.anomalous) {
            if i >= rows || std::mem::replace(&mut seen[i], true) {
                return Err(Error::ShapeMismatch(format!("labels do not partition a batch of {rows}")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::ShapeMismatch(format!("labels do not partition a batch of {rows}")));
        }
        Ok(())
    }
}

/// Mean of the normal rows of `z` (`d` columns); not re-normalized.
pub fn normal_mean<T: Real>(z: &[T], d: usize, labels: &BatchLabels) -> Result<Vec<T>> {
    if labels.normal.is_empty() {
        return Err(Error::DegenerateBatch { normal: 0, anomalous: labels.anomalous.len() });
    }
    let mut mean = vec![T::zero(); d];
    for &i in &labels.normal {
        for (m, &v) in mean.iter_mut().zip(&z[i * d..(i + 1) * d]) {
            *m += v;
        }
    }
    let inv = T::one() / T::of(labels.normal.len() as f64);
    mean.iter_mut().for_each(|m| *m = *m * inv);
    Ok(mean)
}

/// Contrastive anomaly-detection loss on unit rows `z` (`N×d`):
///
/// `L = −1/|N| Σ_{i∈N} log( exp(z_i·z̄/τ) / Σ_j exp(z_j·z̄/τ) )`
///
/// with `z̄` the mean normal embedding. The returned gradient includes the
/// dependence of `z̄` on the normal rows.
pub fn contrastive_loss<T: Real>(z: &[T], d: usize, labels: &BatchLabels, tau: T) -> Result<(T, Vec<T>)> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    if d == 0 || z.len() % d != 0 {
        return Err(Error::ShapeMismatch(format!("{} values do not form rows of width {d}", z.len())));
    }
    let rows = z.len() / d;
    labels.check_cover(rows)?;
    if labels.normal.is_empty() || labels.anomalous.is_empty() {
        return Err(Error::DegenerateBatch { normal: labels.normal.len(), anomalous: labels.anomalous.len() });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("contrastive loss input"));
    }

    let mean = normal_mean(z, d, labels)?;
    let inv_tau = T::one() / tau;
    let sims: Vec<T> = z.chunks(d).map(|row| dot(row, &mean) * inv_tau).collect();
    let max = sims.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = sims.iter().map(|&s| (s - max).exp()).collect();
    let denom: T = exps.iter().copied().sum();
    let log_sum_exp = max + denom.ln();

    let n_normal = T::of(labels.normal.len() as f64);
    let normal_sim_mean = labels.normal.iter().map(|&i| sims[i]).sum::<T>() / n_normal;
    let loss = log_sum_exp - normal_sim_mean;

    // dL/ds_j = softmax_j − [j ∈ N] / |N|
    let mut d_sims: Vec<T> = exps.iter().map(|&e| e / denom).collect();
    for &i in &labels.normal {
        d_sims[i] = d_sims[i] - T::one() / n_normal;
    }

    let mut grad = vec![T::zero(); z.len()];
    let mut d_mean = vec![T::zero(); d];
    for (j, row) in z.chunks(d).enumerate() {
        let scale = d_sims[j] * inv_tau;
        for k in 0..d {
            grad[j * d + k] = scale * mean[k];
            d_mean[k] += scale * row[k];
        }
    }
    for &i in &labels.normal {
        for k in 0..d {
            grad[i * d + k] += d_mean[k] / n_normal;
        }
    }
    Ok((loss, grad))
}

/// Mean softmax cross-entropy over `N×2` logits; label `true` is class 1 (anomalous).
pub fn cross_entropy_loss<T: Real>(logits: &[T], anomalous: &[bool]) -> Result<(T, Vec<T>)> {
    if logits.len() != 2 * anomalous.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} labels; expected two per sample",
            logits.len(),
            anomalous.len()
        )));
    }
    if anomalous.is_empty() {
        return Err(Error::Empty("cross-entropy batch"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cross-entropy logits"));
    }
    let n = T::of(anomalous.len() as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.chunks(2).zip(anomalous) {
        let max = row[0].max(row[1]);
        let e0 = (row[0] - max).exp();
        let e1 = (row[1] - max).exp();
        let lse = max + (e0 + e1).ln();
        let target = usize::from(label);
        loss += lse - row[target];
        let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
        for (c, &pc) in p.iter().enumerate() {
            let onehot = if c == target { T::one() } else { T::zero() };
            grad.push((pc - onehot) / n);
        }
    }
    Ok((loss / n, grad))
}

/// Probability of the anomalous class for one pair of logits.
pub fn anomaly_probability(logits: &[f32]) -> f64 {
    let (a, b) = (f64::from(logits[0]), f64::from(logits[1]));
    1.0 / (1.0 + (a - b).exp())
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn unit_rows(rows: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for _ in 0..rows {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(v.iter().map(|x| x / n));
        }
        out
    }

    /// Literal evaluation of the loss, for oracles.
    fn direct_loss(z: &[f64], d: usize, anomalous: &[bool], tau: f64) -> f64 {
        let normals: Vec<&[f64]> = z.chunks(d).zip(anomalous).filter(|(_, &a)| !a).map(|(r, _)| r).collect();
        let mean: Vec<f64> = (0..d).map(|k| normals.iter().map(|r| r[k]).sum::<f64>() / normals.len() as f64).collect();
        let s = |r: &[f64]| r.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() / tau;
        let denom: f64 = z.chunks(d).map(|r| s(r).exp()).sum();
        -normals.iter().map(|r| (s(r).exp() / denom).ln()).sum::<f64>() / normals.len() as f64
    }

    #[test]
    fn normal_mean_examples() {
        let labels = BatchLabels::from_flags(&[false]);
        assert_eq!(normal_mean(&[1.0, 0.0], 2, &labels).unwrap(), vec![1.0, 0.0]);
        let labels = BatchLabels::from_flags(&[false, false, true]);
        assert_eq!(normal_mean(&[1.0, 0.0, 0.0, 1.0, -1.0, 0.0], 2, &labels).unwrap(), vec![0.5, 0.5]);
        let z = unit_rows(9, 5, 1);
        let m = normal_mean(&z, 5, &BatchLabels::from_flags(&[false; 9])).unwrap();
        assert!(m.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1.0);
        assert!(normal_mean(&z[..5], 5, &BatchLabels::from_flags(&[true])).is_err());
    }

    #[test]
    fn three_embedding_closed_form() {
        let z = [1.0, 0.0, 0.0, 1.0, -1.0, 0.0];
        let labels = BatchLabels::from_flags(&[false, false, true]);
        let (loss, _) = contrastive_loss(&z, 2, &labels, 0.1).unwrap();
        let expected = (2.0 + (-10.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.693_169_880_267_186_2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_batches_are_errors() {
        let z = unit_rows(3, 2, 0);
        let all_normal = BatchLabels::from_flags(&[false; 3]);
        assert!(matches!(contrastive_loss(&z, 2, &all_normal, 0.1), Err(Error::DegenerateBatch { normal: 3, anomalous: 0 })));
        let all_anomalous = BatchLabels::from_flags(&[true; 3]);
        assert!(matches!(contrastive_loss(&z, 2, &all_anomalous, 0.1), Err(Error::DegenerateBatch { .. })));
        let mut bad = z.clone();
        bad[0] = f64::INFINITY;
        assert!(contrastive_loss(&bad, 2, &BatchLabels::from_flags(&[false, true, false]), 0.1).is_err());
    }

    #[test]
    fn contrastive_gradient_matches_central_differences() {
        for seed in 0..5 {
            let (rows, d) = (6, 4);
            let z = unit_rows(rows, d, seed);
            let flags = [false, true, false, false, true, false];
            let labels = BatchLabels::from_flags(&flags);
            let (loss, grad) = contrastive_loss(&z, d, &labels, 0.1).unwrap();
            assert!((loss - direct_loss(&z, d, &flags, 0.1)).abs() < 1e-12);
            let eps = 1e-6;
            for i in 0..z.len() {
                let mut up = z.clone();
                let mut down = z.clone();
                up[i] += eps;
                down[i] -= eps;
                let numeric = (contrastive_loss(&up, d, &labels, 0.1).unwrap().0
                    - contrastive_loss(&down, d, &labels, 0.1).unwrap().0)
                    / (2.0 * eps);
                let rel = (grad[i] - numeric).abs() / grad[i].abs().max(1e-8);
                assert!(rel < 1e-8 || (grad[i] - numeric).abs() < 1e-9, "seed {seed} entry {i}: {} vs {numeric}", grad[i]);
            }
        }
    }

    #[test]
    fn loss_ignores_batch_order() {
        let z = unit_rows(7, 3, 4);
        let flags = [false, false, true, false, true, false, false];
        let (loss, _) = contrastive_loss(&z, 3, &BatchLabels::from_flags(&flags), 0.1).unwrap();
        let perm = [6, 2, 0, 5, 1, 4, 3];
        let zp: Vec<f64> = perm.iter().flat_map(|&i| z[i * 3..i * 3 + 3].to_vec()).collect();
        let fp: Vec<bool> = perm.iter().map(|&i| flags[i]).collect();
        let (lp, _) = contrastive_loss(&zp, 3, &BatchLabels::from_flags(&fp), 0.1).unwrap();
        assert!((loss - lp).abs() < 1e-12);
    }

    #[test]
    fn pushing_an_anomaly_away_lowers_the_loss() {
        let d = 3;
        let mut z = unit_rows(5, d, 8);
        let flags = [false, false, false, true, false];
        let labels = BatchLabels::from_flags(&flags);
        let mean = normal_mean(&z, d, &labels).unwrap();
        let mean_norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut previous = contrastive_loss(&z, d, &labels, 0.1).unwrap().0;
        // rotate the anomaly step by step towards −z̄
        for step in 1..=10 {
            let t = step as f64 / 10.0;
            let row: Vec<f64> = (0..d).map(|k| (1.0 - t) * z[3 * d + k] - t * mean[k] / mean_norm).collect();
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            z[3 * d..4 * d].iter_mut().zip(&row).for_each(|(a, b)| *a = b / n);
            let loss = contrastive_loss(&z, d, &labels, 0.1).unwrap().0;
            assert!(loss < previous, "step {step}: {loss} >= {previous}");
            previous = loss;
        }
    }

    #[test]
    fn equal_similarity_configuration_hits_the_bound() {
        let theta = 0.7f64;
        let at = |phi: f64| [theta.cos(), theta.sin() * phi.cos(), theta.sin() * phi.sin()];
        let deg = std::f64::consts::PI / 180.0;
        let mut z = Vec::new();
        for phi in [0.0, 120.0, 240.0, 60.0, 180.0] {
            z.extend(at(phi * deg));
        }
        let flags = [false, false, false, true, true];
        let (loss, _) = contrastive_loss(&z, 3, &BatchLabels::from_flags(&flags), 0.1).unwrap();
        let (n, a) = (3.0f64, 2.0f64);
        // every term of the sum is log(1 / (n + a))
        assert!((loss - (n + a).ln()).abs() < 1e-12);
        assert!((loss - direct_loss(&z, 3, &flags, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn stable_at_tiny_temperature() {
        let z = [1.0f64, 0.0, 1.0, 0.0, -1.0, 0.0];
        let labels = BatchLabels::from_flags(&[false, false, true]);
        let (loss, grad) = contrastive_loss(&z, 2, &labels, 1e-3).unwrap();
        assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_attraction_equals_scaled_pairwise_attraction() {
        // the numerator term pulls each normal towards z̄; it equals the
        // all-pairs attraction up to the factor 1/|N|
        let d = 3;
        let z = unit_rows(3, d, 17);
        let n = 3.0;
        let tau = 0.1;
        let to_mean = |z: &[f64]| {
            let m = normal_mean(z, d, &BatchLabels::from_flags(&[false; 3])).unwrap();
            -z.chunks(d).map(|r| dot(r, &m)).sum::<f64>() / (n * tau)
        };
        let pairwise = |z: &[f64]| {
            let mut s = 0.0;
            for a in z.chunks(d) {
                for b in z.chunks(d) {
                    s += dot(a, b);
                }
            }
            -s / (n * tau)
        };
        let eps = 1e-6;
        for i in 0..z.len() {
            let mut up = z.clone();
            let mut down = z.clone();
            up[i] += eps;
            down[i] -= eps;
            let g_mean = (to_mean(&up) - to_mean(&down)) / (2.0 * eps);
            let g_pairs = (pairwise(&up) - pairwise(&down)) / (2.0 * eps);
            assert!((g_mean - g_pairs / n).abs() < 1e-7, "{g_mean} vs {}", g_pairs / n);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = cross_entropy_loss(&[0.0, 0.0], &[false]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let (loss, _) = cross_entropy_loss(&[0.0, 0.0], &[true]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let (loss, _) = cross_entropy_loss(&[30.0, -30.0], &[false]).unwrap();
        assert!(loss < 1e-12);
        assert!(cross_entropy_loss(&[0.0, 0.0, 1.0], &[false]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = [true, false, false, true, false];
        let (_, grad) = cross_entropy_loss(&logits, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[i] += eps;
            down[i] -= eps;
            let numeric = (cross_entropy_loss(&up, &labels).unwrap().0 - cross_entropy_loss(&down, &labels).unwrap().0) / (2.0 * eps);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(1e-8);
            assert!(rel < 1e-8, "entry {i}: {} vs {numeric}", grad[i]);
        }
    }

    #[test]
    fn anomaly_probability_is_the_softmax_of_class_one() {
        assert!((anomaly_probability(&[0.0, 0.0]) - 0.5).abs() < 1e-15);
        assert!(anomaly_probability(&[-5.0, 5.0]) > 0.9999);
    }
}
