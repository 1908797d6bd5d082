//! Invert an image feature by momentum gradient descent on pixels, with
//! the image unnaturalness score as the natural-image regularizer:
//!
//!   minimize ||phi(i) - phi(i_hat)||^2 + lambda_r * u(i_hat)
//!
//! `phi` is a designated CNN output (a tap or the final layer) and `u` is
//! the weighted sum of per-layer unnaturalness scores. Both terms live on
//! one gradient tape, so the pixel gradient is exact reverse mode through
//! the whole pipeline.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cnn::{self, CnnModel};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};
use crate::vlm::{build_grid_loss, load_stacks, MapOptions, VlmLayerModel};

/// Per-channel pixel statistics of a natural-image corpus, used to sample
/// the Gaussian initial solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RgbStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Std floor applied to zero-variance channels.
pub const RGB_STD_FLOOR: f64 = 1e-6;

/// Per-channel population mean and std over all pixels of all images.
pub fn fit_rgb_stats<'a, T: Element + 'a>(
    corpus: impl IntoIterator<Item = &'a Tensor<T>>,
) -> Result<RgbStats> {
    let mut count = 0u64;
    let mut mean = [0.0f64; 3];
    let mut m2 = [0.0f64; 3];
    for image in corpus {
        if image.rank() != 3 || image.shape()[2] != 3 {
            return Err(Error::InvalidShape {
                shape: image.shape().to_vec(),
                reason: "rgb stats need H x W x 3 images".into(),
            });
        }
        for pixel in image.data().chunks_exact(3) {
            count += 1;
            let n = count as f64;
            for c in 0..3 {
                let v = pixel[c].to_f64();
                let delta = v - mean[c];
                mean[c] += delta / n;
                m2[c] += delta * (v - mean[c]);
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyCorpus("rgb stats".into()));
    }
    let mut std = [0.0f64; 3];
    for c in 0..3 {
        let var = m2[c] / count as f64;
        std[c] = if var.sqrt() < RGB_STD_FLOOR {
            log::warn!("rgb stats: channel {c} has std {:.3e}; floored to {RGB_STD_FLOOR}", var.sqrt());
            RGB_STD_FLOOR
        } else {
            var.sqrt()
        };
    }
    Ok(RgbStats { mean, std })
}

/// Starting point of the descent.
#[derive(Debug, Clone)]
pub enum InitMode<T: Element> {
    /// Pixels sampled per channel from the corpus Gaussian.
    Gaussian(RgbStats),
    /// Start from a supplied image (e.g. another method's output).
    FromImage(Tensor<T>),
}

#[derive(Debug, Clone)]
pub struct ReconstructionConfig<T: Element> {
    /// Weight of the unnaturalness regularizer.
    pub lambda_r: f64,
    /// Per-layer weights of the unnaturalness score, keyed by layer name.
    pub lambda: BTreeMap<String, f64>,
    pub lr: f64,
    pub momentum: f64,
    pub iters: usize,
    pub init: InitMode<T>,
    pub seed: u64,
    /// Which CNN output is `phi`: a tap name, or the final layer when None.
    pub target_layer: Option<String>,
    pub map_options: MapOptions,
}

impl<T: Element> ReconstructionConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidArgument(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.iters == 0 {
            return Err(Error::InvalidArgument("iters must be >= 1".into()));
        }
        if self.lambda_r < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda_r must be >= 0, got {}",
                self.lambda_r
            )));
        }
        Ok(())
    }
}

/// Objective value split into its two terms.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveParts {
    pub value: f64,
    pub feature_term: f64,
    pub regularizer_term: f64,
}

/// One evaluated iterate.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveRecord {
    pub iter: usize,
    pub objective: f64,
    pub feature_term: f64,
    pub regularizer_term: f64,
}

/// Evaluate the objective and its pixel gradient at `image`.
///
/// `target` must match the shape of the designated `phi` output. Every
/// layer model must have a lambda weight and a matching CNN tap.
pub fn objective<T: Element>(
    target: &Tensor<T>,
    image: &Tensor<T>,
    cnn: &CnnModel<T>,
    models: &[&VlmLayerModel<T>],
    cfg: &ReconstructionConfig<T>,
) -> Result<(ObjectiveParts, Tensor<T>)> {
    let mut tape = Tape::new();
    let image_node = tape.input(image.clone());
    let (taps, final_node) = cnn::build_forward(&mut tape, cnn, image_node)?;

    let phi_node = match &cfg.target_layer {
        Some(name) => *taps
            .get(name)
            .ok_or_else(|| Error::UnknownTap(name.clone()))?,
        None => final_node,
    };
    if tape.value(phi_node).shape() != target.shape() {
        return Err(Error::shape(
            "reconstruction target",
            target.shape(),
            tape.value(phi_node).shape(),
        ));
    }
    let target_node = tape.constant(target.clone());
    let diff = tape.sub(phi_node, target_node)?;
    let squared = tape.mul(diff, diff)?;
    let feature_term = tape.sum(squared)?;

    let mut total = feature_term;
    let mut regularizer_value = 0.0;
    if cfg.lambda_r > 0.0 && !models.is_empty() {
        let mut reg_total = None;
        for model in models {
            let lambda = *cfg.lambda.get(&model.layer_name).ok_or_else(|| {
                Error::MissingWeight(format!("lambda for layer '{}'", model.layer_name))
            })?;
            let tap_node = *taps
                .get(&model.layer_name)
                .ok_or_else(|| Error::UnknownTap(model.layer_name.clone()))?;
            let preprocessed = model.preprocess.build_apply(&mut tape, tap_node)?;
            let stacks = load_stacks(&mut tape, model, false);
            let loss = build_grid_loss(&mut tape, &stacks, preprocessed, &cfg.map_options)?.loss;
            let weighted = tape.scale(loss, lambda)?;
            reg_total = Some(match reg_total {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        let reg_node = reg_total.expect("at least one model");
        regularizer_value = tape.value(reg_node).item()?.to_f64();
        let scaled = tape.scale(reg_node, cfg.lambda_r)?;
        total = tape.add(feature_term, scaled)?;
    }

    let value = tape.value(total).item()?.to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "reconstruction objective".into(),
            index: 0,
            value,
        });
    }
    let parts = ObjectiveParts {
        value,
        feature_term: tape.value(feature_term).item()?.to_f64(),
        regularizer_term: regularizer_value,
    };
    let grads = tape.backward(total)?;
    Ok((parts, grads.get_or_zeros(image_node, image.shape())))
}

/// Objective threshold beyond which the descent is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Momentum gradient descent from the configured init. Returns the
/// best-objective iterate (descent with momentum can overshoot late) and
/// the full per-iteration history.
pub fn reconstruct<T: Element>(
    target: &Tensor<T>,
    cnn: &CnnModel<T>,
    models: &[&VlmLayerModel<T>],
    cfg: &ReconstructionConfig<T>,
) -> Result<(Tensor<T>, Vec<ObjectiveRecord>)> {
    cfg.validate()?;
    let (h, w, c) = cnn.spec.input;
    let mut image = match &cfg.init {
        InitMode::FromImage(init) => {
            if init.shape() != [h, w, c] {
                return Err(Error::shape("init image", init.shape(), &[h, w, c]));
            }
            init.clone()
        }
        InitMode::Gaussian(stats) => {
            let mut stream = rng::stream(cfg.seed, "reconstruct.init");
            let mut data = Vec::with_capacity(h * w * c);
            for _ in 0..h * w {
                for ch in 0..c.min(3) {
                    let z: f64 = stream.sample(StandardNormal);
                    data.push(T::from_f64(stats.mean[ch] + stats.std[ch] * z));
                }
                for _ in 3..c {
                    let z: f64 = stream.sample(StandardNormal);
                    data.push(T::from_f64(z));
                }
            }
            Tensor::from_vec(&[h, w, c], data)?
        }
    };

    let mut velocity = Tensor::zeros(&[h, w, c]);
    let lr = T::from_f64(cfg.lr);
    let momentum = T::from_f64(cfg.momentum);
    let mut history = Vec::with_capacity(cfg.iters);
    let mut best_value = f64::INFINITY;
    let mut best_image = image.clone();
    for iter in 0..cfg.iters {
        let (parts, grad) = objective(target, &image, cnn, models, cfg)?;
        if !parts.value.is_finite() || parts.value > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                iter,
                reason: format!("objective {}", parts.value),
            });
        }
        history.push(ObjectiveRecord {
            iter,
            objective: parts.value,
            feature_term: parts.feature_term,
            regularizer_term: parts.regularizer_term,
        });
        if parts.value < best_value {
            best_value = parts.value;
            best_image = image.clone();
        }
        velocity = velocity.scale(momentum).sub(&grad.scale(lr))?;
        image = image.add(&velocity)?;
        if (iter + 1) % 100 == 0 {
            log::debug!("reconstruct iter {}: objective {:.6e}", iter + 1, parts.value);
        }
    }
    Ok((best_image, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{CnnSpec, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cnn() -> CnnModel<f64> {
        // single 1x1 identity conv on 3x3x1... needs 3 channels for rgb? use 2x2x2
        let spec = CnnSpec {
            input: (3, 3, 2),
            layers: vec![LayerSpec::Conv {
                name: "conv1".into(),
                out_channels: 2,
                kernel_h: 1,
                kernel_w: 1,
                stride: 1,
                pad: 0,
            }],
            taps: vec!["conv1".into()],
            taps_post_relu: false,
        };
        let mut kernel = Tensor::zeros(&[2, 2, 1, 1]);
        kernel.set(&[0, 0, 0, 0], 1.0);
        kernel.set(&[1, 1, 0, 0], 1.0);
        let mut conv = BTreeMap::new();
        conv.insert("conv1".to_string(), (kernel, Tensor::zeros(&[2])));
        CnnModel::new(spec, conv, BTreeMap::new()).unwrap()
    }

    fn plain_config(iters: usize, lr: f64, init: InitMode<f64>) -> ReconstructionConfig<f64> {
        ReconstructionConfig {
            lambda_r: 0.0,
            lambda: BTreeMap::new(),
            lr,
            momentum: 0.9,
            iters,
            init,
            seed: 1,
            target_layer: None,
            map_options: MapOptions::default(),
        }
    }

    #[test]
    fn rgb_stats_cases() {
        // constant corpus -> mean v, std floored
        let img = Tensor::filled(&[2, 2, 3], 5.0);
        let stats = fit_rgb_stats([&img]).unwrap();
        for c in 0..3 {
            assert_eq!(stats.mean[c], 5.0);
            assert_eq!(stats.std[c], RGB_STD_FLOOR);
        }
        // two values {0, 2} equally -> mean 1, std 1 (population)
        let a = Tensor::filled(&[1, 1, 3], 0.0);
        let b = Tensor::filled(&[1, 1, 3], 2.0);
        let stats = fit_rgb_stats([&a, &b]).unwrap();
        for c in 0..3 {
            assert_eq!(stats.mean[c], 1.0);
            assert_eq!(stats.std[c], 1.0);
        }
        // empty corpus
        assert!(fit_rgb_stats::<f64>([]).is_err());
    }

    #[test]
    fn rgb_stats_streaming_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        use rand::Rng;
        let images: Vec<Tensor<f64>> = (0..20)
            .map(|_| {
                let data: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.gen_range(0.0..255.0)).collect();
                Tensor::from_vec(&[4, 4, 3], data).unwrap()
            })
            .collect();
        let stats = fit_rgb_stats(images.iter()).unwrap();
        for c in 0..3 {
            let values: Vec<f64> = images
                .iter()
                .flat_map(|im| im.data().chunks_exact(3).map(move |p| p[c]))
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!((stats.mean[c] - mean).abs() < 1e-10);
            assert!((stats.std[c] - var.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_case_objective_zero() {
        let cnn = small_cnn();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        use rand::Rng;
        let original =
            Tensor::from_vec(&[3, 3, 2], (0..18).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap();
        let (_, target) = cnn.forward_full(&original).unwrap();
        let cfg = plain_config(3, 0.0, InitMode::FromImage(original.clone()));
        let (parts, grad) = objective(&target, &original, &cnn, &[], &cfg).unwrap();
        assert_eq!(parts.value, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));
        // descent from the optimum stays at the optimum
        let (best, history) = reconstruct(&target, &cnn, &[], &cfg).unwrap();
        assert_eq!(history.len(), 3);
        for rec in &history {
            assert_eq!(rec.objective, 0.0);
        }
        assert_eq!(best, original);
    }

    #[test]
    fn one_iteration_zero_lr_returns_init_exactly() {
        let cnn = small_cnn();
        let init = Tensor::filled(&[3, 3, 2], 0.25);
        let target = Tensor::filled(&[3, 3, 2], 1.0);
        let cfg = plain_config(1, 0.0, InitMode::FromImage(init.clone()));
        let (best, history) = reconstruct(&target, &cnn, &[], &cfg).unwrap();
        assert_eq!(history.len(), 1);
        assert_eq!(best, init);
    }

    #[test]
    fn zero_iterations_rejected() {
        let cnn = small_cnn();
        let init = Tensor::zeros(&[3, 3, 2]);
        let target = Tensor::zeros(&[3, 3, 2]);
        let cfg = plain_config(0, 0.1, InitMode::FromImage(init));
        assert!(reconstruct(&target, &cnn, &[], &cfg).is_err());
    }

    #[test]
    fn quadratic_descent_reduces_objective() {
        // identity phi: objective = ||i - target||^2, plain quadratic
        let cnn = small_cnn();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        use rand::Rng;
        let original =
            Tensor::from_vec(&[3, 3, 2], (0..18).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap();
        let (_, target) = cnn.forward_full(&original).unwrap();
        let init = Tensor::zeros(&[3, 3, 2]);
        let cfg = plain_config(200, 0.05, InitMode::FromImage(init));
        let (best, history) = reconstruct(&target, &cnn, &[], &cfg).unwrap();
        assert!(history.last().unwrap().objective < 1e-6 * history[0].objective);
        assert!(crate::tensor::max_abs_diff(&best, &original).unwrap() < 1e-3);
    }

    #[test]
    fn gaussian_init_is_seeded() {
        let cnn = small_cnn();
        let target = Tensor::zeros(&[3, 3, 2]);
        let stats = RgbStats {
            mean: [10.0, 20.0, 30.0],
            std: [1.0, 2.0, 3.0],
        };
        let cfg = plain_config(1, 0.0, InitMode::Gaussian(stats.clone()));
        let (a, _) = reconstruct(&target, &cnn, &[], &cfg).unwrap();
        let (b, _) = reconstruct(&target, &cnn, &[], &cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = plain_config(1, 0.0, InitMode::Gaussian(stats));
        cfg2.seed = 2;
        let (c, _) = reconstruct(&target, &cnn, &[], &cfg2).unwrap();
        assert!(a != c);
    }
}
