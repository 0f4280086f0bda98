//! Convolutional encoder, projection head, L2 normalization and exact
//! reverse-mode gradients.
//!
//! Activations are kept channel-major over the whole batch (`[C][N][H][W]`)
//! so every convolution is a single im2col matrix product.

mod real;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    preprocess, BinaryLabel, FaultClass, ImageId, IrImage, ModuleId, PlantId, PlantStatsTable, PreprocessedPatch,
};
use crate::error::{Error, Result};

pub use real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub input_size: usize,
    /// Convolution stages, each followed by a rectified-linear activation.
    /// Padding is `kernel / 2`.
    pub stages: Vec<ConvStage>,
    /// Hidden width of the head; `None` gives a single linear layer.
    pub head_hidden: Option<usize>,
    /// Output width of the head.
    pub embedding_dim: usize,
    pub init_seed: u64,
}

impl EncoderConfig {
    /// Desk-scale encoder: three stride-2 stages (16, 32, 64 channels), global
    /// average pooling to 64 features and a 64→64→32 projection head.
    ///
    /// The full-size reference network is a ResNet-34 backbone (512 pooled
    /// features) with a 512→512→128 head.
    pub fn desk(init_seed: u64) -> Self {
        EncoderConfig {
            input_channels: 3,
            input_size: crate::dataset::PATCH_SIZE,
            stages: vec![
                ConvStage { out_channels: 16, kernel: 3, stride: 2 },
                ConvStage { out_channels: 32, kernel: 3, stride: 2 },
                ConvStage { out_channels: 64, kernel: 3, stride: 2 },
            ],
            head_hidden: Some(64),
            embedding_dim: 32,
            init_seed,
        }
    }

    /// Same backbone with a single two-way linear layer on the pooled features.
    pub fn binary_classifier(init_seed: u64) -> Self {
        EncoderConfig { head_hidden: None, embedding_dim: 2, ..Self::desk(init_seed) }
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(self.input_channels, |s| s.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("encoder: {m}")));
        if self.embedding_dim < 2 {
            return bad("embedding dimension must be at least 2");
        }
        if self.input_channels == 0 || self.input_size == 0 || self.head_hidden == Some(0) {
            return bad("all widths must be at least 1");
        }
        let mut size = self.input_size;
        for s in &self.stages {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return bad("all widths must be at least 1");
            }
            if size + 2 * (s.kernel / 2) < s.kernel {
                return bad("kernel larger than its padded input");
            }
            size = conv_out(size, s.kernel, s.stride);
        }
        Ok(())
    }

    fn geometry(&self) -> Vec<ConvGeom> {
        let mut in_c = self.input_channels;
        let mut size = self.input_size;
        self.stages
            .iter()
            .map(|s| {
                let g = ConvGeom {
                    in_c,
                    out_c: s.out_channels,
                    kernel: s.kernel,
                    stride: s.stride,
                    pad: s.kernel / 2,
                    in_size: size,
                    out_size: conv_out(size, s.kernel, s.stride),
                };
                in_c = s.out_channels;
                size = g.out_size;
                g
            })
            .collect()
    }

    fn head_widths(&self) -> Vec<(usize, usize)> {
        let f = self.feature_dim();
        match self.head_hidden {
            Some(h) => vec![(f, h), (h, self.embedding_dim)],
            None => vec![(f, self.embedding_dim)],
        }
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    in_size: usize,
    out_size: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { name: name.into(), shape, data: vec![T::zero(); len] }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect(),
        }
    }
}

/// All trainable tensors of the encoder and head, in a fixed order:
/// `conv{i}.weight` `[out, in, k, k]`, `conv{i}.bias`, then `head{j}.weight`
/// `[in, out]` and `head{j}.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParameters<T = f32> {
    pub config: EncoderConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> EncoderParameters<T> {
    /// Tensors with the right names and shapes, all zero.
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (i, g) in config.geometry().iter().enumerate() {
            tensors.push(Tensor::zeros(format!("conv{i}.weight"), vec![g.out_c, g.in_c, g.kernel, g.kernel]));
            tensors.push(Tensor::zeros(format!("conv{i}.bias"), vec![g.out_c]));
        }
        for (j, (fan_in, fan_out)) in config.head_widths().into_iter().enumerate() {
            tensors.push(Tensor::zeros(format!("head{j}.weight"), vec![fan_in, fan_out]));
            tensors.push(Tensor::zeros(format!("head{j}.bias"), vec![fan_out]));
        }
        Ok(EncoderParameters { config: config.clone(), tensors })
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParameters {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.name.clone(), t.shape.clone())).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> EncoderParameters<U> {
        EncoderParameters { config: self.config.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Flat view of scalar `index` across all tensors, in tensor order.
    pub fn scalar_mut(&mut self, mut index: usize) -> &mut T {
        for t in &mut self.tensors {
            if index < t.data.len() {
                return &mut t.data[index];
            }
            index -= t.data.len();
        }
        panic!("scalar index out of range")
    }

    pub fn scalar(&self, mut index: usize) -> T {
        for t in &self.tensors {
            if index < t.data.len() {
                return t.data[index];
            }
            index -= t.data.len();
        }
        panic!("scalar index out of range")
    }

    fn shapes_match(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

/// Fan-in scaled normal initialization (`sd = sqrt(2 / fan_in)`), zero biases.
pub fn init_parameters(config: &EncoderConfig, seed: u64) -> Result<EncoderParameters<f32>> {
    let mut params = EncoderParameters::<f32>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut params.tensors {
        if !t.name.ends_with(".weight") {
            continue;
        }
        let fan_in: usize = if t.shape.len() == 4 { t.shape[1..].iter().product() } else { t.shape[0] };
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        for v in &mut t.data {
            *v = dist.sample(&mut rng) as f32;
        }
    }
    Ok(params)
}

struct ConvCache<T> {
    cols: Vec<T>,
    /// Post-activation output, `[out_c][N][oh][ow]`.
    out: Vec<T>,
}

/// Outputs of a forward pass plus everything `backward` needs.
pub struct ForwardPass<T> {
    pub batch: usize,
    /// Pooled encoder features, `N×F` row-major.
    pub features: Vec<T>,
    /// Head outputs before normalization, `N×d` row-major.
    pub pre_norm: Vec<T>,
    convs: Vec<ConvCache<T>>,
    /// Inputs of each head layer (`features`, then hidden activations).
    head_inputs: Vec<Vec<T>>,
}

impl<T: Real> ForwardPass<T> {
    pub fn feature_row(&self, i: usize) -> &[T] {
        let f = self.features.len() / self.batch;
        &self.features[i * f..(i + 1) * f]
    }

    pub fn output_row(&self, i: usize) -> &[T] {
        let d = self.pre_norm.len() / self.batch;
        &self.pre_norm[i * d..(i + 1) * d]
    }

    /// Which rectified units are active (convolutions, then hidden head layers).
    /// Two passes with equal patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.convs
            .iter()
            .flat_map(|c| c.out.iter())
            .chain(self.head_inputs.iter().skip(1).flatten())
            .map(|&v| v > T::zero())
            .collect()
    }
}

fn im2col<T: Real>(input: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let (hin, hout) = (g.in_size, g.out_size);
    let cols_n = n * hout * hout;
    let mut cols = vec![T::zero(); g.patch_len() * cols_n];
    for c in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let plane = &input[(c * n + b) * hin * hin..(c * n + b + 1) * hin * hin];
                    for oy in 0..hout {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= hin as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * hin..(iy as usize + 1) * hin];
                        let dst_row = &mut dst[(b * hout + oy) * hout..(b * hout + oy + 1) * hout];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < hin as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let (hin, hout) = (g.in_size, g.out_size);
    let cols_n = n * hout * hout;
    let mut out = vec![T::zero(); g.in_c * n * hin * hin];
    for c in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let plane = &mut out[(c * n + b) * hin * hin..(c * n + b + 1) * hin * hin];
                    for oy in 0..hout {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= hin as isize {
                            continue;
                        }
                        let src_row = &src[(b * hout + oy) * hout..(b * hout + oy + 1) * hout];
                        for (ox, &v) in src_row.iter().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < hin as isize {
                                plane[iy as usize * hin + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Stacks patches into an `N×C×H×W` input tensor.
pub fn stack_patches<'a, T: Real>(patches: impl IntoIterator<Item = &'a PreprocessedPatch>) -> (Vec<T>, usize) {
    let mut data = Vec::new();
    let mut n = 0;
    for p in patches {
        data.extend(p.tensor.iter().map(|&v| T::of(f64::from(v))));
        n += 1;
    }
    (data, n)
}

/// Runs encoder and head on an `N×C×H×W` batch.
pub fn forward<T: Real>(params: &EncoderParameters<T>, input: &[T], batch: usize) -> Result<ForwardPass<T>> {
    let config = &params.config;
    let geometry = config.geometry();
    let plane = config.input_size * config.input_size;
    if batch == 0 {
        return Err(Error::Empty("forward batch"));
    }
    if input.len() != batch * config.input_channels * plane {
        return Err(Error::ShapeMismatch(format!(
            "input has {} values, expected {batch}x{}x{}x{}",
            input.len(),
            config.input_channels,
            config.input_size,
            config.input_size
        )));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder input"));
    }

    // NCHW -> CNHW
    let mut act = vec![T::zero(); input.len()];
    for b in 0..batch {
        for c in 0..config.input_channels {
            let src = &input[(b * config.input_channels + c) * plane..][..plane];
            act[(c * batch + b) * plane..][..plane].copy_from_slice(src);
        }
    }

    let mut convs = Vec::with_capacity(geometry.len());
    for (i, g) in geometry.iter().enumerate() {
        let weight = &params.tensors[2 * i].data;
        let bias = &params.tensors[2 * i + 1].data;
        let cols = im2col(&act, batch, g);
        let cols_n = batch * g.out_size * g.out_size;
        let mut out = vec![T::zero(); g.out_c * cols_n];
        T::gemm(g.out_c, g.patch_len(), cols_n, weight, false, &cols, false, T::zero(), &mut out);
        for (row, &b) in out.chunks_mut(cols_n).zip(bias) {
            for v in row {
                *v = (*v + b).max(T::zero());
            }
        }
        act = out.clone();
        convs.push(ConvCache { cols, out });
    }

    // global average pooling
    let channels = config.feature_dim();
    let spatial = geometry.last().map_or(plane, |g| g.out_size * g.out_size);
    let inv = T::one() / T::of(spatial as f64);
    let mut features = vec![T::zero(); batch * channels];
    for c in 0..channels {
        for b in 0..batch {
            let sum: T = act[(c * batch + b) * spatial..][..spatial].iter().copied().sum();
            features[b * channels + c] = sum * inv;
        }
    }

    let layers = config.head_widths();
    let head_offset = 2 * geometry.len();
    let mut head_inputs = Vec::with_capacity(layers.len());
    let mut x = features.clone();
    for (j, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let weight = &params.tensors[head_offset + 2 * j].data;
        let bias = &params.tensors[head_offset + 2 * j + 1].data;
        let mut y = vec![T::zero(); batch * fan_out];
        T::gemm(batch, fan_in, fan_out, &x, false, weight, false, T::zero(), &mut y);
        let hidden = j + 1 < layers.len();
        for row in y.chunks_mut(fan_out) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
                if hidden {
                    *v = v.max(T::zero());
                }
            }
        }
        head_inputs.push(std::mem::replace(&mut x, y));
    }

    Ok(ForwardPass { batch, features, pre_norm: x, convs, head_inputs })
}

/// Exact gradients of `sum(grad_pre_norm ⊙ pre_norm)` with respect to every parameter.
pub fn backward<T: Real>(
    params: &EncoderParameters<T>,
    pass: &ForwardPass<T>,
    grad_pre_norm: &[T],
) -> Result<EncoderParameters<T>> {
    let config = &params.config;
    let batch = pass.batch;
    if grad_pre_norm.len() != pass.pre_norm.len() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} values, forward output has {}",
            grad_pre_norm.len(),
            pass.pre_norm.len()
        )));
    }
    let geometry = config.geometry();
    if pass.convs.len() != geometry.len() {
        return Err(Error::ShapeMismatch("forward pass does not belong to these parameters".into()));
    }
    let mut grads = params.zeros_like();
    let head_offset = 2 * geometry.len();
    let layers = config.head_widths();

    let mut g = grad_pre_norm.to_vec();
    for (j, &(fan_in, fan_out)) in layers.iter().enumerate().rev() {
        let x = &pass.head_inputs[j];
        T::gemm(fan_in, batch, fan_out, x, true, &g, false, T::zero(), &mut grads.tensors[head_offset + 2 * j].data);
        let db = &mut grads.tensors[head_offset + 2 * j + 1].data;
        for row in g.chunks(fan_out) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        let weight = &params.tensors[head_offset + 2 * j].data;
        let mut gx = vec![T::zero(); batch * fan_in];
        T::gemm(batch, fan_out, fan_in, &g, false, weight, true, T::zero(), &mut gx);
        if j > 0 {
            for (d, &xv) in gx.iter_mut().zip(x) {
                if xv <= T::zero() {
                    *d = T::zero();
                }
            }
        }
        g = gx;
    }

    // g is now dL/dfeatures (N×F); undo pooling into the last activation map
    let Some(last) = geometry.last() else {
        return Ok(grads);
    };
    let channels = config.feature_dim();
    let spatial = last.out_size * last.out_size;
    let inv = T::one() / T::of(spatial as f64);
    let mut d_act = vec![T::zero(); channels * batch * spatial];
    for c in 0..channels {
        for b in 0..batch {
            let v = g[b * channels + c] * inv;
            d_act[(c * batch + b) * spatial..][..spatial].iter_mut().for_each(|d| *d = v);
        }
    }

    for (i, geom) in geometry.iter().enumerate().rev() {
        let cache = &pass.convs[i];
        let cols_n = batch * geom.out_size * geom.out_size;
        for (d, &o) in d_act.iter_mut().zip(&cache.out) {
            if o <= T::zero() {
                *d = T::zero();
            }
        }
        T::gemm(geom.out_c, cols_n, geom.patch_len(), &d_act, false, &cache.cols, true, T::zero(), &mut grads.tensors[2 * i].data);
        for (db, row) in grads.tensors[2 * i + 1].data.iter_mut().zip(d_act.chunks(cols_n)) {
            *db = row.iter().copied().sum();
        }
        if i > 0 {
            let mut d_cols = vec![T::zero(); geom.patch_len() * cols_n];
            T::gemm(geom.patch_len(), geom.out_c, cols_n, &params.tensors[2 * i].data, true, &d_act, false, T::zero(), &mut d_cols);
            d_act = col2im(&d_cols, batch, geom);
        }
    }
    Ok(grads)
}

pub fn l2_normalize<T: Real>(v: &[T]) -> Result<Vec<T>> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

/// Normalizes each `d`-wide row; returns unit rows and the original norms.
pub fn normalize_rows<T: Real>(v: &[T], d: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut z = Vec::with_capacity(v.len());
    let mut norms = Vec::with_capacity(v.len() / d);
    for row in v.chunks(d) {
        let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::DegenerateEmbedding);
        }
        z.extend(row.iter().map(|&x| x / norm));
        norms.push(norm);
    }
    Ok((z, norms))
}

/// Pulls `dL/dz` back through `z = v / ‖v‖`: `dv = (dz − z (z·dz)) / ‖v‖`.
pub fn normalize_rows_backward<T: Real>(z: &[T], norms: &[T], dz: &[T], d: usize) -> Vec<T> {
    let mut dv = Vec::with_capacity(z.len());
    for ((zr, gr), &n) in z.chunks(d).zip(dz.chunks(d)).zip(norms) {
        let dot: T = zr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dv.extend(zr.iter().zip(gr).map(|(&a, &b)| (b - a * dot) / n));
    }
    dv
}

/// A unit-norm embedding with the identity and labels of its image.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub z: Vec<f32>,
    pub image_id: ImageId,
    pub plant_id: PlantId,
    pub module_id: ModuleId,
    pub binary_label: Option<BinaryLabel>,
    pub fault_class: Option<FaultClass>,
}

impl Embedding {
    pub fn is_anomalous(&self) -> bool {
        self.binary_label == Some(BinaryLabel::Anomalous)
    }
}

const EMBED_CHUNK: usize = 128;

/// Forward passes in fixed-size chunks; each row only depends on its own patch.
fn chunked_forward(
    params: &EncoderParameters<f32>,
    patches: &[&PreprocessedPatch],
    mut sink: impl FnMut(&ForwardPass<f32>, &[&PreprocessedPatch]) -> Result<()>,
) -> Result<()> {
    for chunk in patches.chunks(EMBED_CHUNK) {
        let (input, n) = stack_patches::<f32>(chunk.iter().copied());
        let pass = forward(params, &input, n)?;
        sink(&pass, chunk)?;
    }
    Ok(())
}

pub fn embed_patches<'a>(
    params: &EncoderParameters<f32>,
    patches: impl IntoIterator<Item = &'a PreprocessedPatch>,
) -> Result<Vec<Embedding>> {
    let patches: Vec<&PreprocessedPatch> = patches.into_iter().collect();
    let mut out = Vec::with_capacity(patches.len());
    chunked_forward(params, &patches, |pass, chunk| {
        for (i, p) in chunk.iter().enumerate() {
            let v: Vec<f64> = pass.output_row(i).iter().map(|&x| f64::from(x)).collect();
            let z = l2_normalize(&v)?;
            out.push(Embedding {
                z: z.into_iter().map(|x| x as f32).collect(),
                image_id: p.image_id,
                plant_id: p.plant_id,
                module_id: p.module_id,
                binary_label: p.binary_label,
                fault_class: p.fault_class,
            });
        }
        Ok(())
    })?;
    Ok(out)
}

/// Preprocesses, encodes and normalizes every image.
pub fn embed(params: &EncoderParameters<f32>, images: &[IrImage], stats: &PlantStatsTable) -> Result<Vec<Embedding>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        let patches = chunk
            .iter()
            .map(|image| preprocess(image, stats.get(image.plant_id)?))
            .collect::<Result<Vec<_>>>()?;
        out.extend(embed_patches(params, &patches)?);
    }
    Ok(out)
}

/// Pooled encoder features (before the head), one row per patch.
pub fn extract_features<'a>(
    params: &EncoderParameters<f32>,
    patches: impl IntoIterator<Item = &'a PreprocessedPatch>,
) -> Result<Vec<Vec<f32>>> {
    let patches: Vec<&PreprocessedPatch> = patches.into_iter().collect();
    let mut out = Vec::with_capacity(patches.len());
    chunked_forward(params, &patches, |pass, chunk| {
        out.extend((0..chunk.len()).map(|i| pass.feature_row(i).to_vec()));
        Ok(())
    })?;
    Ok(out)
}

/// Head outputs without normalization (logits for the binary classifier).
pub fn raw_outputs<'a>(
    params: &EncoderParameters<f32>,
    patches: impl IntoIterator<Item = &'a PreprocessedPatch>,
) -> Result<Vec<Vec<f32>>> {
    let patches: Vec<&PreprocessedPatch> = patches.into_iter().collect();
    let mut out = Vec::with_capacity(patches.len());
    chunked_forward(params, &patches, |pass, chunk| {
        out.extend((0..chunk.len()).map(|i| pass.output_row(i).to_vec()));
        Ok(())
    })?;
    Ok(out)
}

/// Adds `other` into `acc`, tensor by tensor.
pub fn accumulate<T: Real>(acc: &mut EncoderParameters<T>, other: &EncoderParameters<T>) -> Result<()> {
    if !acc.shapes_match(other) {
        return Err(Error::ShapeMismatch("parameter sets differ in layout".into()));
    }
    for (a, b) in acc.tensors.iter_mut().zip(&other.tensors) {
        for (x, &y) in a.data.iter_mut().zip(&b.data) {
            *x += y;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
