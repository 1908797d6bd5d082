//! `reconstruct`: invert a feature tensor to an image by momentum descent
//! with the unnaturalness regularizer. Emits the best iterate as PNG and
//! raw tensor, plus the per-iteration objective history.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use cnnvlm::cnn::CnnModel;
use cnnvlm::imageio;
use cnnvlm::reconstruct::{
    fit_rgb_stats, reconstruct, InitMode, ReconstructionConfig, RgbStats,
};
use cnnvlm::tensor::{Element, Tensor};
use cnnvlm::vlm::{MapOptions, VlmLayerModel};

use crate::commands::list_images;
use crate::config::{
    default_lambda, ReconstructSettings, DEFAULT_LAMBDA_R, DEFAULT_RECONSTRUCT_MOMENTUM,
};
use crate::manifest::Manifest;

#[derive(Debug, Serialize)]
struct ReconstructEntry {
    output_png: String,
    output_tensor: String,
    history_csv: String,
    iterations: usize,
    initial_objective: f64,
    best_objective: f64,
}

pub struct ReconstructArgs<'a> {
    pub cnn: &'a Path,
    pub models: &'a [PathBuf],
    pub target_image: Option<&'a Path>,
    pub target_tensor: Option<&'a Path>,
    pub init_image: Option<&'a Path>,
    pub out: &'a Path,
    pub settings: ReconstructSettings,
    pub seed: u64,
    pub precision: &'a str,
}

pub fn run<T: Element>(args: &ReconstructArgs) -> Result<()> {
    let cnn: CnnModel<T> = CnnModel::load(args.cnn)?;
    let mut models: Vec<VlmLayerModel<T>> = Vec::new();
    for path in args.models {
        models.push(VlmLayerModel::load(path).with_context(|| path.display().to_string())?);
    }
    let settings = &args.settings;

    let target: Tensor<T> = match (args.target_image, args.target_tensor) {
        (Some(image_path), None) => {
            let image: Tensor<T> = imageio::load_rgb(image_path)?;
            let (taps, final_out) = cnn.forward_full(&image)?;
            match &settings.target_layer {
                Some(layer) => {
                    taps.get(layer)
                        .ok_or_else(|| anyhow::anyhow!("CNN does not tap layer '{layer}'"))?
                        .values
                        .clone()
                }
                None => final_out,
            }
        }
        (None, Some(tensor_path)) => crate::commands::read_feature_tensor::<T>(tensor_path)?.1,
        _ => bail!("exactly one of --target-image / --target-tensor is required"),
    };

    let lambda: BTreeMap<String, f64> = match &settings.lambdas {
        Some(map) => map.clone(),
        None => models
            .iter()
            .map(|m| (m.layer_name.clone(), default_lambda(&m.layer_name)))
            .collect(),
    };

    let init = resolve_init::<T>(args, settings, &cnn)?;
    let cfg = ReconstructionConfig {
        lambda_r: settings.lambda_r.unwrap_or(DEFAULT_LAMBDA_R),
        lambda,
        lr: settings
            .lr
            .ok_or_else(|| anyhow::anyhow!("reconstruct.lr must be set (no universal default; see README)"))?,
        momentum: settings.momentum.unwrap_or(DEFAULT_RECONSTRUCT_MOMENTUM),
        iters: settings.iters.unwrap_or(500),
        init,
        seed: args.seed,
        target_layer: settings.target_layer.clone(),
        map_options: MapOptions::default(),
    };

    let model_refs: Vec<&VlmLayerModel<T>> = models.iter().collect();
    eprintln!(
        "reconstructing: {} iterations, lr {}, lambda_r {}",
        cfg.iters, cfg.lr, cfg.lambda_r
    );
    let (best, history) = reconstruct(&target, &cnn, &model_refs, &cfg)?;

    std::fs::create_dir_all(args.out)?;
    let png_path = args.out.join("reconstructed.png");
    imageio::save_rgb_png_affine(&png_path, &best)?;
    let tensor_path = args.out.join("reconstructed.vlmt");
    crate::commands::write_raw_tensor(&tensor_path, "reconstruction", &best)?;
    let history_path = args.out.join("history.csv");
    let mut file = std::fs::File::create(&history_path)?;
    writeln!(file, "iter,objective,feature_term,regularizer_term")?;
    for record in &history {
        writeln!(
            file,
            "{},{},{},{}",
            record.iter, record.objective, record.feature_term, record.regularizer_term
        )?;
    }

    let best_objective = history.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min);
    let entry = ReconstructEntry {
        output_png: "reconstructed.png".into(),
        output_tensor: "reconstructed.vlmt".into(),
        history_csv: "history.csv".into(),
        iterations: history.len(),
        initial_objective: history[0].objective,
        best_objective,
    };
    Manifest::new("reconstruct", args.seed, args.precision, vec![entry]).write(args.out)?;
    eprintln!(
        "done: objective {} -> best {}",
        history[0].objective, best_objective
    );
    Ok(())
}

fn resolve_init<T: Element>(
    args: &ReconstructArgs,
    settings: &ReconstructSettings,
    cnn: &CnnModel<T>,
) -> Result<InitMode<T>> {
    if let Some(path) = args.init_image {
        return Ok(InitMode::FromImage(imageio::load_rgb(path)?));
    }
    match settings.init.as_deref() {
        Some("from_image") => {
            let path = settings
                .init_image
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("init 'from_image' needs init_image"))?;
            Ok(InitMode::FromImage(imageio::load_rgb(Path::new(path))?))
        }
        None | Some("gaussian") => {
            let stats = match (&settings.rgb_mean, &settings.rgb_std, &settings.rgb_stats_images) {
                (Some(mean), Some(std), _) => RgbStats {
                    mean: *mean,
                    std: *std,
                },
                (_, _, Some(dir)) => {
                    let images = list_images(Path::new(dir))?;
                    let mut tensors = Vec::with_capacity(images.len());
                    for (_, path) in &images {
                        tensors.push(imageio::load_rgb::<T>(path)?);
                    }
                    fit_rgb_stats(tensors.iter())?
                }
                _ => bail!(
                    "gaussian init needs rgb_mean + rgb_std or rgb_stats_images in the config"
                ),
            };
            let _ = cnn;
            Ok(InitMode::Gaussian(stats))
        }
        Some(other) => bail!("unknown init mode '{other}' (gaussian | from_image)"),
    }
}
