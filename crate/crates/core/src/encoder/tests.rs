use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny(seed: u64) -> EncoderConfig {
    EncoderConfig {
        input_channels: 3,
        input_size: 12,
        stages: vec![ConvStage { out_channels: 4, kernel: 3, stride: 2 }, ConvStage { out_channels: 6, kernel: 3, stride: 2 }],
        head_hidden: Some(5),
        embedding_dim: 3,
        init_seed: seed,
    }
}

fn random_input(n: usize, config: &EncoderConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * config.input_channels * config.input_size * config.input_size).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Random parameters with positive biases so few units are dead.
fn random_params(config: &EncoderConfig, seed: u64) -> EncoderParameters<f64> {
    let mut p = init_parameters(config, seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for t in &mut p.tensors {
        if t.name.ends_with(".bias") {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..0.3));
        }
    }
    p
}

/// Direct convolution on NCHW input, independent of im2col.
fn naive_conv(input: &[f64], n: usize, in_c: usize, size: usize, w: &Tensor<f64>, b: &[f64], stride: usize) -> (Vec<f64>, usize) {
    let (out_c, k) = (w.shape[0], w.shape[2]);
    let pad = (k / 2) as isize;
    let out_size = (size + 2 * (k / 2) - k) / stride + 1;
    let mut out = vec![0.0; n * out_c * out_size * out_size];
    for bi in 0..n {
        for o in 0..out_c {
            for oy in 0..out_size {
                for ox in 0..out_size {
                    let mut acc = b[o];
                    for c in 0..in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride) as isize + ky as isize - pad;
                                let ix = (ox * stride) as isize + kx as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < size && (ix as usize) < size {
                                    acc += w.data[((o * in_c + c) * k + ky) * k + kx]
                                        * input[((bi * in_c + c) * size + iy as usize) * size + ix as usize];
                                }
                            }
                        }
                    }
                    out[((bi * out_c + o) * out_size + oy) * out_size + ox] = acc.max(0.0);
                }
            }
        }
    }
    (out, out_size)
}

#[test]
fn init_is_deterministic_and_shaped() {
    let config = EncoderConfig::desk(0);
    let a = init_parameters(&config, 7).unwrap();
    let b = init_parameters(&config, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_parameters(&config, 8).unwrap());
    assert_eq!(a.get("head1.weight").unwrap().shape, vec![64, 32]);
    assert_eq!(a.get("conv0.weight").unwrap().shape, vec![16, 3, 3, 3]);
    assert!(a.get("conv2.bias").unwrap().data.iter().all(|&v| v == 0.0));
}

#[test]
fn init_scale_follows_fan_in() {
    let p = init_parameters(&EncoderConfig::desk(0), 3).unwrap();
    let w = p.get("conv2.weight").unwrap();
    let n = w.data.len() as f64;
    let mean = w.data.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let sd = (w.data.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt();
    let expected = (2.0f64 / (32.0 * 9.0)).sqrt();
    assert!((sd / expected - 1.0).abs() < 0.1, "sd {sd} vs {expected}");
}

#[test]
fn config_validation() {
    let mut c = EncoderConfig::desk(0);
    c.embedding_dim = 1;
    assert!(c.validate().is_err());
    let mut c = EncoderConfig::desk(0);
    c.stages[1].out_channels = 0;
    assert!(c.validate().is_err());
    assert_eq!(EncoderConfig::desk(0).feature_dim(), 64);
}

#[test]
fn zero_weights_and_input_give_zero_output() {
    let config = EncoderConfig::desk(0);
    let params = EncoderParameters::<f64>::zeros(&config).unwrap();
    let input = vec![0.0; 2 * 3 * 64 * 64];
    let pass = forward(&params, &input, 2).unwrap();
    assert!(pass.pre_norm.iter().all(|&v| v == 0.0));
    assert_eq!(pass.pre_norm.len(), 2 * 32);
    assert_eq!(pass.features.len(), 2 * 64);
}

#[test]
fn forward_rejects_bad_input() {
    let config = tiny(0);
    let params = random_params(&config, 1);
    let mut input = random_input(2, &config, 1);
    assert!(matches!(forward(&params, &input[1..], 2), Err(Error::ShapeMismatch(_))));
    input[5] = f64::NAN;
    assert!(matches!(forward(&params, &input, 2), Err(Error::NonFinite(_))));
    assert!(forward(&params, &[], 0).is_err());
}

#[test]
fn rows_are_independent_of_the_rest_of_the_batch() {
    let config = tiny(0);
    let params = random_params(&config, 2);
    let one = random_input(1, &config, 5);
    let mut three = one.clone();
    three.extend(random_input(1, &config, 6));
    three.extend(one.clone());
    let pass1 = forward(&params, &one, 1).unwrap();
    let pass3 = forward(&params, &three, 3).unwrap();
    assert_eq!(pass3.output_row(0), pass3.output_row(2));
    assert_eq!(pass3.output_row(0), pass1.output_row(0));
}

#[test]
fn pooled_features_are_spatial_means_of_the_last_activation() {
    let config = tiny(0);
    let params = random_params(&config, 4);
    let n = 3;
    let input = random_input(n, &config, 9);
    let pass = forward(&params, &input, n).unwrap();

    let mut act = input.clone();
    let mut channels = config.input_channels;
    let mut size = config.input_size;
    for (i, stage) in config.stages.iter().enumerate() {
        let (out, out_size) =
            naive_conv(&act, n, channels, size, &params.tensors[2 * i], &params.tensors[2 * i + 1].data, stage.stride);
        act = out;
        channels = stage.out_channels;
        size = out_size;
    }
    for b in 0..n {
        for c in 0..channels {
            let plane = &act[(b * channels + c) * size * size..][..size * size];
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            assert!((pass.feature_row(b)[c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn normalize_examples() {
    assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
    assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
    let v = [0.3, -1.2, 2.5];
    let scaled: Vec<f64> = v.iter().map(|x| 7.0 * x).collect();
    let (a, b) = (l2_normalize(&v).unwrap(), l2_normalize(&scaled).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
    assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::DegenerateEmbedding)));
}

#[test]
fn zero_upstream_gradient_gives_zero_parameter_gradient() {
    let config = tiny(0);
    let params = random_params(&config, 3);
    let input = random_input(2, &config, 3);
    let pass = forward(&params, &input, 2).unwrap();
    let grads = backward(&params, &pass, &vec![0.0; pass.pre_norm.len()]).unwrap();
    assert!(grads.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    assert!(backward(&params, &pass, &[0.0]).is_err());
}

fn linear_loss(params: &EncoderParameters<f64>, input: &[f64], n: usize, weights: &[f64]) -> f64 {
    let pass = forward(params, input, n).unwrap();
    pass.pre_norm.iter().zip(weights).map(|(a, b)| a * b).sum()
}

#[test]
fn backward_matches_central_differences() {
    let config = tiny(0);
    let mut params = random_params(&config, 11);
    let n = 3;
    let input = random_input(n, &config, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let upstream: Vec<f64> = (0..n * config.embedding_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pass = forward(&params, &input, n).unwrap();
    let grads = backward(&params, &pass, &upstream).unwrap();
    let eps = 1e-4;
    // every scalar of this small network
    for idx in 0..params.scalar_count() {
        let orig = params.scalar(idx);
        *params.scalar_mut(idx) = orig + eps;
        let up = linear_loss(&params, &input, n, &upstream);
        *params.scalar_mut(idx) = orig - eps;
        let down = linear_loss(&params, &input, n, &upstream);
        *params.scalar_mut(idx) = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads.scalar(idx);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1e-8);
        assert!(rel < 1e-4 || (analytic - numeric).abs() < 1e-10, "scalar {idx}: {analytic} vs {numeric}");
    }
}

#[test]
fn batch_gradient_is_sum_of_per_sample_gradients() {
    let config = tiny(0);
    let params = random_params(&config, 21);
    let n = 4;
    let input = random_input(n, &config, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let upstream: Vec<f64> = (0..n * config.embedding_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let full = backward(&params, &forward(&params, &input, n).unwrap(), &upstream).unwrap();

    let sample = input.len() / n;
    let d = config.embedding_dim;
    let mut summed = params.zeros_like();
    for i in 0..n {
        let x = &input[i * sample..(i + 1) * sample];
        let g = backward(&params, &forward(&params, x, 1).unwrap(), &upstream[i * d..(i + 1) * d]).unwrap();
        accumulate(&mut summed, &g).unwrap();
    }
    for (a, b) in full.tensors.iter().zip(&summed.tensors) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{}: {x} vs {y}", a.name);
        }
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let config = EncoderConfig::desk(0);
    let params = init_parameters(&config, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input: Vec<f32> = (0..4 * 3 * 64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = || {
        let pass = forward(&params, &input, 4).unwrap();
        let g = backward(&params, &pass, &vec![0.5f32; pass.pre_norm.len()]).unwrap();
        (pass.pre_norm.clone(), g)
    };
    assert_eq!(run(), run());
}

#[test]
fn normalization_backward_matches_finite_differences() {
    let v = [0.4, -1.3, 0.7, 2.0];
    let dz = [0.3, 0.1, -0.8, 0.5];
    let (z, norms) = normalize_rows(&v, 4).unwrap();
    let dv = normalize_rows_backward(&z, &norms, &dz, 4);
    let f = |v: &[f64]| -> f64 { l2_normalize(v).unwrap().iter().zip(&dz).map(|(a, b)| a * b).sum() };
    for i in 0..4 {
        let mut up = v;
        let mut down = v;
        up[i] += 1e-6;
        down[i] -= 1e-6;
        let numeric = (f(&up) - f(&down)) / 2e-6;
        assert!((numeric - dv[i]).abs() < 1e-8);
    }
}
