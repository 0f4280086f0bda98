//! SGD with momentum and cosine annealing over source batches, for the
//! contrastive objective and the cross-entropy baseline.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment_batch, preprocess_all, FaultClass, IrImage, PlantStatsTable, PreprocessedPatch};
use crate::encoder::{
    backward, embed_patches, forward, init_parameters, normalize_rows, normalize_rows_backward, raw_outputs,
    stack_patches, EncoderConfig, EncoderParameters,
};
use crate::error::{Error, Result};
use crate::evaluation::{auroc, average_precision, ScoredSample, ValidationPoint};
use crate::index::{build_index, predict_batch};
use crate::objective::{anomaly_probability, contrastive_loss, cross_entropy_loss, BatchLabels};

mod checkpoint;
mod log;

pub use checkpoint::{read_checkpoint, write_atomic, write_checkpoint, Checkpoint, CheckpointHeader};
pub use log::{read_log, validation_points, write_log, LogEvent};

/// Consecutive single-class batches tolerated under shuffle sampling.
pub const MAX_DEGENERATE_RETRIES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Contrastive,
    CrossEntropy,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "contrastive" => Ok(Objective::Contrastive),
            "cross_entropy" | "ce" => Ok(Objective::CrossEntropy),
            other => Err(Error::InvalidConfig(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Shuffle,
    Stratified,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shuffle" => Ok(Sampling::Shuffle),
            "stratified" => Ok(Sampling::Stratified),
            other => Err(Error::InvalidConfig(format!("unknown sampling mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub seed: u64,
    pub objective: Objective,
    pub sampling: Sampling,
    #[serde(default)]
    pub leaveout: BTreeSet<FaultClass>,
    /// Checkpoint (and validation) cadence in steps; 0 keeps only the first and last.
    pub checkpoint_every: u64,
    /// Neighbour count for validation scoring.
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    crate::index::DEFAULT_K
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            batch_size: 64,
            lr: 0.06,
            momentum: 0.9,
            weight_decay: 5e-4,
            tau: crate::objective::DEFAULT_TEMPERATURE,
            seed: 0,
            objective: Objective::Contrastive,
            sampling: Sampling::Stratified,
            leaveout: BTreeSet::new(),
            checkpoint_every: 500,
            k: default_k(),
        }
    }
}

impl TrainConfig {
    /// Full-length schedule: 110000 steps at batch size 128.
    pub fn paper() -> Self {
        TrainConfig { total_steps: 110_000, batch_size: 128, checkpoint_every: 5000, ..Self::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("tau", self.tau)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::InvalidConfig(format!("momentum must be below 1, got {}", self.momentum)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        match self.objective {
            Objective::Contrastive => EncoderConfig::desk(self.seed),
            Objective::CrossEntropy => EncoderConfig::binary_classifier(self.seed),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serializes to TOML")
    }
}

/// η₀/2 · (1 + cos(π · step / total)).
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let p = step.min(total_steps) as f64 / total_steps as f64;
    lr0 / 2.0 * (1.0 + (p * std::f64::consts::PI).cos())
}

/// Momentum buffers mirroring the parameters, and the number of updates applied.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: EncoderParameters<f32>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &EncoderParameters<f32>) -> Self {
        OptimizerState { momentum: params.zeros_like(), step: 0 }
    }
}

/// One classical SGD update: `buf ← μ·buf + (g + λ·w)`, `w ← w − η·buf`.
///
/// Nothing is modified when a gradient is non-finite.
pub fn sgd_step(
    params: &mut EncoderParameters<f32>,
    grads: &EncoderParameters<f32>,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let layouts_match = |a: &EncoderParameters<f32>| {
        a.tensors.len() == params.tensors.len()
            && a.tensors.iter().zip(&params.tensors).all(|(x, y)| x.name == y.name && x.shape == y.shape)
    };
    if !layouts_match(grads) || !layouts_match(&state.momentum) {
        return Err(Error::ShapeMismatch("gradients or momentum do not mirror the parameters".into()));
    }
    if !grads.all_finite() {
        return Err(Error::Diverged { step: state.step });
    }
    let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((w, g), buf) in params.tensors.iter_mut().zip(&grads.tensors).zip(state.momentum.tensors.iter_mut()) {
        for ((w, &g), b) in w.data.iter_mut().zip(&g.data).zip(buf.data.iter_mut()) {
            *b = mu * *b + (g + wd * *w);
            *w -= lr * *b;
        }
    }
    state.step += 1;
    Ok(())
}

/// One epoch of batches over samples with the given anomaly flags.
///
/// Shuffle: a seeded permutation cut into full batches (the remainder is
/// dropped). Stratified: every batch draws `max(1, round(batch_size ×
/// anomaly fraction))` anomalies and fills up with normals, each from its
/// own shuffled pool that is reshuffled when exhausted.
pub fn make_batches(anomalous: &[bool], batch_size: usize, sampling: Sampling, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if anomalous.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if batch_size < 2 {
        return Err(Error::InvalidConfig(format!("batch size must be at least 2, got {batch_size}")));
    }
    if anomalous.len() < batch_size {
        return Err(Error::InvalidConfig(format!(
            "{} training images cannot fill a batch of {batch_size}",
            anomalous.len()
        )));
    }
    let batches = anomalous.len() / batch_size;
    match sampling {
        Sampling::Shuffle => {
            let mut order: Vec<usize> = (0..anomalous.len()).collect();
            order.shuffle(rng);
            Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
        }
        Sampling::Stratified => {
            let anomalies: Vec<usize> = (0..anomalous.len()).filter(|&i| anomalous[i]).collect();
            let normals: Vec<usize> = (0..anomalous.len()).filter(|&i| !anomalous[i]).collect();
            if anomalies.is_empty() || normals.is_empty() {
                return Err(Error::NoAnomaliesForStratified);
            }
            let fraction = anomalies.len() as f64 / anomalous.len() as f64;
            let per_batch = ((batch_size as f64 * fraction).round() as usize)
                .max(1)
                .min(anomalies.len())
                .min(batch_size - 1)
                .max(batch_size.saturating_sub(normals.len()));
            let mut anomaly_pool = Pool::new(anomalies);
            let mut normal_pool = Pool::new(normals);
            let mut out = Vec::with_capacity(batches);
            for _ in 0..batches {
                let mut batch = anomaly_pool.take(per_batch, rng);
                batch.extend(normal_pool.take(batch_size - per_batch, rng));
                batch.shuffle(rng);
                out.push(batch);
            }
            Ok(out)
        }
    }
}

/// Shuffled indices handed out in order, reshuffled after each pass.
struct Pool {
    items: Vec<usize>,
    next: usize,
}

impl Pool {
    fn new(items: Vec<usize>) -> Self {
        Pool { next: items.len(), items }
    }

    /// `n` distinct items (n ≤ pool size).
    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.next == self.items.len() {
                self.items.shuffle(rng);
                self.next = 0;
            }
            let item = self.items[self.next];
            self.next += 1;
            if !out.contains(&item) {
                out.push(item);
            }
        }
        out
    }
}

/// Removes anomalous images whose fault class is left out.
pub fn apply_leaveout(images: &[IrImage], leaveout: &BTreeSet<FaultClass>) -> Vec<IrImage> {
    images
        .iter()
        .filter(|i| i.fault_class.is_none_or(|c| !leaveout.contains(&c)))
        .cloned()
        .collect()
}

/// Anomaly scores of patches under a checkpoint: k-NN vote against `source`
/// for contrastive models, softmax probability for the classifier.
pub fn score_patches(
    params: &EncoderParameters<f32>,
    objective: Objective,
    source: &[PreprocessedPatch],
    targets: &[PreprocessedPatch],
    k: usize,
) -> Result<Vec<f64>> {
    match objective {
        Objective::Contrastive => {
            let index = build_index(&embed_patches(params, source)?)?;
            let targets = embed_patches(params, targets)?;
            let k = k.min(index.len());
            Ok(predict_batch(&index, &targets, k, crate::index::DEFAULT_DELTA)?.into_iter().map(|p| p.score).collect())
        }
        Objective::CrossEntropy => Ok(raw_outputs(params, targets)?.iter().map(|l| anomaly_probability(l)).collect()),
    }
}

fn validate_patches(
    params: &EncoderParameters<f32>,
    config: &TrainConfig,
    source: &[PreprocessedPatch],
    validation: &[PreprocessedPatch],
) -> Result<(Option<f64>, Option<f64>)> {
    let scores = score_patches(params, config.objective, source, validation, config.k)?;
    let samples: Vec<ScoredSample> = scores
        .iter()
        .zip(validation)
        .map(|(&s, p)| ScoredSample {
            score: s,
            label: p.binary_label.expect("validation patches are labelled"),
            fault_class: p.fault_class,
            module_id: p.module_id,
        })
        .collect();
    // a validation set missing a class simply yields no metric
    Ok((auroc(&samples).ok(), average_precision(&samples).ok()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Step 0, every `checkpoint_every` steps, and the final step.
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogEvent>,
}

impl TrainOutcome {
    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("training always yields the initial checkpoint")
    }

    pub fn checkpoint_at(&self, step: u64) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.step == step)
    }

    pub fn validation_points(&self) -> Vec<ValidationPoint> {
        validation_points(&self.log)
    }
}

/// Trains on labelled `source` images. `stats` must cover every plant in
/// `source` and `validation`. `on_checkpoint` sees each checkpoint as it is
/// produced (for persisting it).
pub fn train(
    config: &TrainConfig,
    source: &[IrImage],
    stats: &PlantStatsTable,
    validation: Option<&[IrImage]>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let source = apply_leaveout(source, &config.leaveout);
    if let Some(image) = source.iter().find(|i| i.binary_label.is_none()) {
        return Err(Error::InvalidImage { id: image.image_id, reason: "training images must be labelled".into() });
    }
    let patches = preprocess_all(&source, stats)?;
    let flags: Vec<bool> = patches.iter().map(PreprocessedPatch::is_anomalous).collect();
    if config.objective == Objective::Contrastive && (flags.iter().all(|&a| a) || flags.iter().all(|&a| !a)) {
        return Err(Error::DegenerateBatch {
            normal: flags.iter().filter(|&&a| !a).count(),
            anomalous: flags.iter().filter(|&&a| a).count(),
        });
    }
    let validation = match validation {
        Some(images) => {
            if let Some(image) = images.iter().find(|i| i.binary_label.is_none()) {
                return Err(Error::InvalidImage { id: image.image_id, reason: "validation images must be labelled".into() });
            }
            Some(preprocess_all(images, stats)?)
        }
        None => None,
    };

    let encoder = config.encoder();
    let mut params = init_parameters(&encoder, config.seed)?;
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let header = CheckpointHeader { encoder: encoder.clone(), train: config.clone() };
    let mut outcome = TrainOutcome { checkpoints: Vec::new(), log: Vec::new() };

    let mut emit = |params: &EncoderParameters<f32>, state: &OptimizerState, outcome: &mut TrainOutcome| -> Result<()> {
        let (val_auroc, val_ap) = match &validation {
            Some(v) => validate_patches(params, config, &patches, v)?,
            None => (None, None),
        };
        let checkpoint = Checkpoint {
            header: header.clone(),
            params: params.clone(),
            momentum: state.momentum.clone(),
            step: state.step,
            seed: config.seed,
        };
        on_checkpoint(&checkpoint)?;
        outcome.log.push(LogEvent::Checkpoint { step: state.step, val_auroc, val_ap });
        outcome.checkpoints.push(checkpoint);
        Ok(())
    };
    emit(&params, &state, &mut outcome)?;

    let mut queue: std::collections::VecDeque<Vec<usize>> = Default::default();
    let d = encoder.embedding_dim;
    while state.step < config.total_steps {
        let step = state.step;
        let mut retries = 0;
        let batch = loop {
            if queue.is_empty() {
                queue.extend(make_batches(&flags, config.batch_size, config.sampling, &mut rng)?);
            }
            let batch = queue.pop_front().unwrap();
            let anomalies = batch.iter().filter(|&&i| flags[i]).count();
            if config.objective == Objective::CrossEntropy || (anomalies > 0 && anomalies < batch.len()) {
                break batch;
            }
            retries += 1;
            if retries >= MAX_DEGENERATE_RETRIES {
                return Err(Error::TooManyDegenerateBatches { step, retries });
            }
        };

        let mut batch_patches: Vec<PreprocessedPatch> = batch.iter().map(|&i| patches[i].clone()).collect();
        augment_batch(&mut batch_patches, &mut rng)?;
        let batch_flags: Vec<bool> = batch.iter().map(|&i| flags[i]).collect();
        let (input, n) = stack_patches::<f32>(&batch_patches);
        let pass = forward(&params, &input, n)?;
        if pass.pre_norm.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step });
        }
        let (loss, grad_out) = match config.objective {
            Objective::Contrastive => {
                let (z, norms) = normalize_rows(&pass.pre_norm, d)?;
                let labels = BatchLabels::from_flags(&batch_flags);
                let (loss, dz) = contrastive_loss(&z, d, &labels, config.tau as f32)?;
                (loss, normalize_rows_backward(&z, &norms, &dz, d))
            }
            Objective::CrossEntropy => cross_entropy_loss(&pass.pre_norm, &batch_flags)?,
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = backward(&params, &pass, &grad_out)?;
        let lr = cosine_lr(step, config.total_steps, config.lr);
        sgd_step(&mut params, &grads, &mut state, lr, config.momentum, config.weight_decay)?;
        outcome.log.push(LogEvent::Update {
            step,
            lr,
            loss: f64::from(loss),
            images: batch.iter().map(|&i| patches[i].image_id).collect(),
        });

        let done = state.step;
        if done == config.total_steps || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
            emit(&params, &state, &mut outcome)?;
        }
    }
    Ok(outcome)
}
