//! `extract`: run images through a CNN and write one feature-tensor file
//! per image per tap, plus a manifest with shapes and source hashes.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use cnnvlm::cnn::CnnModel;
use cnnvlm::imageio;
use cnnvlm::tensor::{Element, Tensor};

use crate::commands::{feature_file_name, install_pool, list_images, write_feature_tensor};
use crate::manifest::{sha256_hex, Manifest};

#[derive(Debug, Serialize)]
struct ExtractEntry {
    image_id: String,
    tap: String,
    file: String,
    shape: Vec<usize>,
    source_sha256: String,
}

pub struct ExtractArgs<'a> {
    pub cnn: &'a Path,
    pub images: &'a Path,
    pub taps: Vec<String>,
    pub out: &'a Path,
    pub mean_rgb: Option<[f64; 3]>,
    pub jobs: usize,
    pub seed: u64,
    pub precision: &'a str,
}

pub fn run<T: Element>(args: &ExtractArgs) -> Result<()> {
    let model: CnnModel<T> = CnnModel::load(args.cnn)
        .with_context(|| format!("loading CNN model {}", args.cnn.display()))?;
    for tap in &args.taps {
        if !model.spec.taps.contains(tap) {
            bail!("tap '{tap}' is not exported by this model (taps: {:?})", model.spec.taps);
        }
    }
    let images = list_images(args.images)?;
    std::fs::create_dir_all(args.out)?;

    let pool = install_pool(args.jobs)?;
    let results: Vec<Result<Vec<ExtractEntry>>> = pool.install(|| {
        images
            .par_iter()
            .map(|(id, path)| -> Result<Vec<ExtractEntry>> {
                let image: Tensor<T> = match imageio::load_rgb(path) {
                    Ok(t) => t,
                    Err(e) => {
                        log::warn!("skipping {}: {e}", path.display());
                        return Ok(Vec::new());
                    }
                };
                let image = match args.mean_rgb {
                    Some(mean) => subtract_mean(&image, mean),
                    None => image,
                };
                let taps = model
                    .forward(&image)
                    .with_context(|| format!("forward pass on {}", path.display()))?;
                let source_sha256 = sha256_hex(path)?;
                let mut entries = Vec::new();
                for tap in &args.taps {
                    let grid = &taps[tap];
                    let file = feature_file_name(id, tap);
                    write_feature_tensor(&args.out.join(&file), id, tap, &grid.values)?;
                    entries.push(ExtractEntry {
                        image_id: id.clone(),
                        tap: tap.clone(),
                        file,
                        shape: grid.values.shape().to_vec(),
                        source_sha256: source_sha256.clone(),
                    });
                }
                eprintln!("extracted {id}");
                Ok(entries)
            })
            .collect()
    });

    let mut entries = Vec::new();
    for r in results {
        entries.extend(r?);
    }
    if entries.is_empty() {
        bail!("all images were skipped as undecodable");
    }
    Manifest::new("extract", args.seed, args.precision, entries).write(args.out)?;
    Ok(())
}

fn subtract_mean<T: Element>(image: &Tensor<T>, mean: [f64; 3]) -> Tensor<T> {
    let mut out = image.clone();
    for pixel in out.data_mut().chunks_exact_mut(3) {
        for (value, m) in pixel.iter_mut().zip(mean.iter()) {
            *value = *value - T::from_f64(*m);
        }
    }
    out
}
