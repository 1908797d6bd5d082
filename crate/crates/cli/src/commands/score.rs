//! `score`: print per-layer unnaturalness and the weighted image score
//! for one image.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use cnnvlm::cnn::CnnModel;
use cnnvlm::imageio;
use cnnvlm::tensor::{Element, Tensor};
use cnnvlm::vlm::{
    image_unnaturalness, layer_unnaturalness, unnaturalness_map, MapOptions, VlmLayerModel,
};

pub struct ScoreArgs<'a> {
    pub cnn: &'a Path,
    pub models: &'a [PathBuf],
    pub lambdas: BTreeMap<String, f64>,
    pub image: &'a Path,
    pub mean_rgb: Option<[f64; 3]>,
    pub symmetric: bool,
}

pub fn run<T: Element>(args: &ScoreArgs) -> Result<()> {
    let cnn: CnnModel<T> = CnnModel::load(args.cnn)?;
    let mut models: Vec<VlmLayerModel<T>> = Vec::new();
    for path in args.models {
        models.push(VlmLayerModel::load(path).with_context(|| path.display().to_string())?);
    }
    if models.is_empty() {
        bail!("at least one layer model is required");
    }
    let mut image: Tensor<T> = imageio::load_rgb(args.image)?;
    if let Some(mean) = args.mean_rgb {
        for pixel in image.data_mut().chunks_exact_mut(3) {
            for (value, m) in pixel.iter_mut().zip(mean.iter()) {
                *value = *value - T::from_f64(*m);
            }
        }
    }
    let taps = cnn.forward(&image)?;
    let opts = MapOptions {
        symmetric_weights: args.symmetric,
    };
    let mut per_layer = BTreeMap::new();
    for model in &models {
        let grid = taps
            .get(&model.layer_name)
            .ok_or_else(|| anyhow::anyhow!("CNN does not tap layer '{}'", model.layer_name))?;
        let map = unnaturalness_map(model, grid, false, &opts)?;
        per_layer.insert(model.layer_name.clone(), layer_unnaturalness(&map));
    }
    let per_layer_f64: BTreeMap<String, f64> =
        per_layer.iter().map(|(k, v)| (k.clone(), v.to_f64())).collect();
    let image_score = image_unnaturalness(&per_layer_f64, &args.lambdas)?;
    for (layer, score) in &per_layer_f64 {
        println!("{layer} {score:.10e}");
    }
    println!("image {image_score:.10e}");
    Ok(())
}
