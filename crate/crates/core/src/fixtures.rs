//! Deterministic generators for desk-scale fixtures: seeded toy CNNs,
//! synthetic smooth images, anomaly-patch datasets with fixations, and
//! random model builders for verification suites. Everything is a pure
//! function of its seed, so committed fixture files can be regenerated
//! and compared bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::{CnnModel, CnnSpec, LayerSpec};
use crate::error::Result;
use crate::imageio;
use crate::preprocess::PreprocessParams;
use crate::lstm::PredictorStack;
use crate::rng;
use crate::saliency::{write_fixations_csv, FixationSet};
use crate::tensor::{Element, Tensor};
use crate::vlm::{TrainMeta, VlmLayerModel};

/// Standard toy network: three convolutions on 32x32x3 input, tapping
/// conv1 (16x16x8), conv2 (8x8x12), and conv3 (8x8x16).
pub fn toy_cnn_spec() -> CnnSpec {
    CnnSpec {
        input: (32, 32, 3),
        layers: vec![
            LayerSpec::Conv {
                name: "conv1".into(),
                out_channels: 8,
                kernel_h: 5,
                kernel_w: 5,
                stride: 2,
                pad: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                name: "conv2".into(),
                out_channels: 12,
                kernel_h: 3,
                kernel_w: 3,
                stride: 2,
                pad: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                name: "conv3".into(),
                out_channels: 16,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                pad: 1,
            },
        ],
        taps: vec!["conv1".into(), "conv2".into(), "conv3".into()],
        taps_post_relu: false,
    }
}

/// Seeded random weights for [`toy_cnn_spec`]. Kernels are scaled by
/// 1/sqrt(fan_in) so activations stay tame on 0-255 inputs.
pub fn toy_cnn<T: Element>(seed: u64) -> CnnModel<T> {
    random_cnn(toy_cnn_spec(), seed)
}

/// Seeded random weights for any conv/linear spec.
pub fn random_cnn<T: Element>(spec: CnnSpec, seed: u64) -> CnnModel<T> {
    let mut stream = rng::stream(seed, "fixtures.cnn");
    let mut conv_weights = BTreeMap::new();
    let mut linear_weights = BTreeMap::new();
    let (mut h, mut w, mut c) = spec.input;
    for layer in &spec.layers {
        match layer {
            LayerSpec::Conv {
                name,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                pad,
            } => {
                let fan_in = (c * kernel_h * kernel_w) as f64;
                let scale = 1.0 / fan_in.sqrt();
                let kernel = random_tensor(&mut stream, &[*out_channels, c, *kernel_h, *kernel_w], scale);
                let bias = random_tensor(&mut stream, &[*out_channels], 0.1);
                conv_weights.insert(name.clone(), (kernel, bias));
                h = (h + 2 * pad - kernel_h) / stride + 1;
                w = (w + 2 * pad - kernel_w) / stride + 1;
                c = *out_channels;
            }
            LayerSpec::MaxPool { kernel, stride } => {
                h = (h - kernel) / stride + 1;
                w = (w - kernel) / stride + 1;
            }
            LayerSpec::Relu => {}
            LayerSpec::Linear { name, out_features } => {
                let fan_in = h * w * c;
                let scale = 1.0 / (fan_in as f64).sqrt();
                let weight = random_tensor(&mut stream, &[fan_in, *out_features], scale);
                let bias = random_tensor(&mut stream, &[*out_features], 0.1);
                linear_weights.insert(name.clone(), (weight, bias));
            }
        }
    }
    CnnModel::new(spec, conv_weights, linear_weights).expect("fixture weights match spec")
}

fn random_tensor<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| T::from_f64(rng.gen_range(-scale..scale)))
            .collect(),
    )
    .expect("fixture tensor shape")
}

/// Random `d x k` matrix with orthonormal columns (Gram-Schmidt on random
/// vectors, retried on near-degenerate draws).
pub fn random_orthonormal<T: Element>(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Tensor<T> {
    assert!(k <= d);
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(k);
    while columns.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for existing in &columns {
            let dot: f64 = v.iter().zip(existing.iter()).map(|(a, b)| a * b).sum();
            for (vi, ei) in v.iter_mut().zip(existing.iter()) {
                *vi -= dot * ei;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        columns.push(v);
    }
    let mut out = Tensor::zeros(&[d, k]);
    for (col, column) in columns.iter().enumerate() {
        for (row, &value) in column.iter().enumerate() {
            out.set(&[row, col], T::from_f64(value));
        }
    }
    out
}

/// Random valid preprocessing parameters for depth `d` (not fitted to any
/// corpus; for gradient and plumbing tests).
pub fn random_preprocess<T: Element>(rng: &mut ChaCha8Rng, d: usize) -> PreprocessParams<T> {
    let mean = random_tensor(rng, &[d], 1.0);
    let std = Tensor::from_vec(
        &[d],
        (0..d)
            .map(|_| T::from_f64(rng.gen_range(0.5..2.0)))
            .collect(),
    )
    .expect("std shape");
    let projection = random_orthonormal(rng, d, d / 2);
    PreprocessParams::new(mean, std, projection).expect("random params valid")
}

/// Random layer model (random preprocess + seeded random stacks) for a
/// tap of depth `d`.
pub fn random_vlm_model<T: Element>(layer_name: &str, d: usize, seed: u64) -> VlmLayerModel<T> {
    let mut stream = rng::stream(seed, "fixtures.vlm");
    let preprocess = random_preprocess(&mut stream, d);
    VlmLayerModel::new(layer_name, preprocess, seed)
}

/// Layer model whose four predictors are all-zero except for a fixed
/// readout bias (predicts `bias` everywhere); useful as a test double.
pub fn constant_predictor_model<T: Element>(
    layer_name: &str,
    preprocess: PreprocessParams<T>,
    bias: &[f64],
) -> VlmLayerModel<T> {
    let k = preprocess.output_depth();
    assert_eq!(bias.len(), k);
    let bias_t = Tensor::from_vec(
        &[k],
        bias.iter().map(|&b| T::from_f64(b)).collect(),
    )
    .expect("bias shape");
    let mut stack = PredictorStack::zeros(k);
    stack.out_b = bias_t;
    VlmLayerModel::from_parts(
        layer_name,
        preprocess,
        [stack.clone(), stack.clone(), stack.clone(), stack],
        TrainMeta::default(),
        false,
    )
    .expect("valid constant model")
}

/// Smooth synthetic image in 0-255: a few low-frequency cosine waves plus
/// gentle channel gradients, quantized to integers.
pub fn smooth_image<T: Element>(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<T> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.3..1.8),             // cycles across the image, x
                rng.gen_range(0.3..1.8),             // cycles across the image, y
                rng.gen_range(0.0..std::f64::consts::TAU), // phase
                rng.gen_range(10.0..35.0),           // amplitude
            )
        })
        .collect();
    let channel_offset: Vec<f64> = (0..3).map(|_| rng.gen_range(80.0..170.0)).collect();
    let channel_gain: Vec<f64> = (0..3).map(|_| rng.gen_range(0.6..1.4)).collect();
    let gradient: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0)))
        .collect();
    let mut out = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            let mut base = 0.0;
            for &(fx, fy, phase, amp) in &waves {
                base += amp
                    * (std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                        + phase)
                        .cos();
            }
            for c in 0..3 {
                let v = channel_offset[c]
                    + channel_gain[c] * base
                    + gradient[c].0 * (x as f64 / w as f64)
                    + gradient[c].1 * (y as f64 / h as f64);
                out.set(&[y, x, c], T::from_f64(v.round().clamp(0.0, 255.0)));
            }
        }
    }
    out
}

/// Stamp a high-frequency checkerboard anomaly of the given size centered
/// at `(cy, cx)` (clipped at borders).
pub fn stamp_anomaly<T: Element>(
    image: &mut Tensor<T>,
    cy: usize,
    cx: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let half = size / 2;
    let lo_color: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..60.0)).collect();
    let hi_color: Vec<f64> = (0..3).map(|_| rng.gen_range(195.0..255.0)).collect();
    for dy in 0..size {
        for dx in 0..size {
            let y = cy as isize + dy as isize - half as isize;
            let x = cx as isize + dx as isize - half as isize;
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let color = if (dy + dx) % 2 == 0 { &hi_color } else { &lo_color };
            for c in 0..3 {
                image.set(&[y as usize, x as usize, c], T::from_f64(color[c].round()));
            }
        }
    }
}

/// Write `count` smooth training images as PNGs named `img000.png`, ...;
/// returns the image ids.
pub fn write_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let mut stream = rng::stream(seed, &format!("fixtures.corpus.{i}"));
        let image: Tensor<f64> = smooth_image(&mut stream, size, size);
        let id = format!("img{i:03}");
        imageio::save_rgb_png(&dir.join(format!("{id}.png")), &image)?;
        ids.push(id);
    }
    Ok(ids)
}

/// Entry of the dataset manifest: where each image's anomaly sits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub image_id: String,
    pub center_y: usize,
    pub center_x: usize,
    pub patch_size: usize,
}

/// Write a fixation benchmark dataset: smooth images with one anomaly
/// patch each, and fixations concentrated on the patch. Layout is
/// `<root>/images/<id>.png` and `<root>/fixations/<id>.csv`, plus a
/// `centers.json` manifest of patch locations.
pub fn write_fixation_dataset(
    root: &Path,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<DatasetEntry>> {
    let images_dir = root.join("images");
    let fixations_dir = root.join("fixations");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&fixations_dir)?;
    let patch_size = (size / 4).max(6);
    let margin = patch_size / 2 + 2;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut stream = rng::stream(seed, &format!("fixtures.dataset.{i}"));
        let mut image: Tensor<f64> = smooth_image(&mut stream, size, size);
        let cy = stream.gen_range(margin..size - margin);
        let cx = stream.gen_range(margin..size - margin);
        stamp_anomaly(&mut image, cy, cx, patch_size, &mut stream);
        let id = format!("img{i:03}");
        imageio::save_rgb_png(&images_dir.join(format!("{id}.png")), &image)?;

        // fixations: tight cloud on the patch center
        let spread = patch_size as f64 / 4.0;
        let points: Vec<(f64, f64)> = (0..30)
            .map(|_| {
                let dy: f64 = stream.gen_range(-spread..spread);
                let dx: f64 = stream.gen_range(-spread..spread);
                let py = (cy as f64 + dy).clamp(0.0, (size - 1) as f64);
                let px = (cx as f64 + dx).clamp(0.0, (size - 1) as f64);
                ((px + 0.5) / size as f64, (py + 0.5) / size as f64)
            })
            .collect();
        let fixations = FixationSet::new(id.clone(), points)?;
        write_fixations_csv(&fixations_dir.join(format!("{id}.csv")), &fixations)?;
        entries.push(DatasetEntry {
            image_id: id,
            center_y: cy,
            center_x: cx,
            patch_size,
        });
    }
    let manifest = serde_json::to_string_pretty(&entries)?;
    std::fs::write(root.join("centers.json"), manifest + "\n")?;
    Ok(entries)
}
