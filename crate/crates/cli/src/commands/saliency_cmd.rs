//! `saliency`: unnaturalness map of one layer turned into a saliency map
//! (sqrt, resize, blur), written as 16-bit grayscale PNG plus raw tensor.

use std::path::Path;

use anyhow::{Context, Result};

use cnnvlm::cnn::CnnModel;
use cnnvlm::imageio;
use cnnvlm::saliency::saliency_from_map;
use cnnvlm::tensor::{Element, Tensor};
use cnnvlm::vlm::{unnaturalness_map, MapOptions, VlmLayerModel};

pub struct SaliencyArgs<'a> {
    pub cnn: &'a Path,
    pub model: &'a Path,
    pub image: &'a Path,
    pub sigma_rel: f64,
    pub out: &'a Path,
    pub raw_out: Option<&'a Path>,
    pub out_width: Option<usize>,
    pub out_height: Option<usize>,
    pub mean_rgb: Option<[f64; 3]>,
}

pub fn run<T: Element>(args: &SaliencyArgs) -> Result<()> {
    let cnn: CnnModel<T> = CnnModel::load(args.cnn)?;
    let model: VlmLayerModel<T> =
        VlmLayerModel::load(args.model).with_context(|| args.model.display().to_string())?;
    let mut image: Tensor<T> = imageio::load_rgb(args.image)?;
    if let Some(mean) = args.mean_rgb {
        for pixel in image.data_mut().chunks_exact_mut(3) {
            for (value, m) in pixel.iter_mut().zip(mean.iter()) {
                *value = *value - T::from_f64(*m);
            }
        }
    }
    let (img_h, img_w) = (image.shape()[0], image.shape()[1]);
    let taps = cnn.forward(&image)?;
    let grid = taps
        .get(&model.layer_name)
        .ok_or_else(|| anyhow::anyhow!("CNN does not tap layer '{}'", model.layer_name))?;
    let map = unnaturalness_map(&model, grid, false, &MapOptions::default())?;
    let out_h = args.out_height.unwrap_or(img_h);
    let out_w = args.out_width.unwrap_or(img_w);
    let saliency = saliency_from_map(&map, out_h, out_w, args.sigma_rel)?;
    imageio::save_gray16_png(args.out, saliency.values())?;
    if let Some(raw) = args.raw_out {
        crate::commands::write_raw_tensor(raw, "saliency", saliency.values())?;
    }
    eprintln!(
        "saliency for layer '{}' written to {}",
        model.layer_name,
        args.out.display()
    );
    Ok(())
}
