//! `eval-auc`: shuffled-AUC benchmark over a fixation dataset laid out as
//! `<root>/images/<id>.png` + `<root>/fixations/<id>.csv`. Negatives are
//! pooled from the other images' fixations (seeded, capped).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use cnnvlm::cnn::CnnModel;
use cnnvlm::imageio;
use cnnvlm::saliency::{
    build_negative_set, read_fixations_csv, saliency_from_map, shuffled_auc, FixationSet,
};
use cnnvlm::tensor::{Element, Tensor};
use cnnvlm::vlm::{unnaturalness_map, MapOptions, VlmLayerModel};

use crate::commands::{install_pool, list_images};
use crate::manifest::Manifest;

#[derive(Debug, Serialize)]
struct AucEntry {
    image_id: String,
    shuffled_auc: f64,
}

pub struct AucArgs<'a> {
    pub cnn: &'a Path,
    pub model: &'a Path,
    pub dataset: &'a Path,
    pub sigma_rel: f64,
    pub cap: usize,
    pub seed: u64,
    pub out: &'a Path,
    pub jobs: usize,
    pub mean_rgb: Option<[f64; 3]>,
    pub precision: &'a str,
}

pub fn run<T: Element>(args: &AucArgs) -> Result<()> {
    let cnn: CnnModel<T> = CnnModel::load(args.cnn)?;
    let model: VlmLayerModel<T> =
        VlmLayerModel::load(args.model).with_context(|| args.model.display().to_string())?;
    let images = list_images(&args.dataset.join("images"))?;
    let fixations_dir = args.dataset.join("fixations");
    let mut all_fixations: BTreeMap<String, FixationSet> = BTreeMap::new();
    for (id, _) in &images {
        let path = fixations_dir.join(format!("{id}.csv"));
        if !path.exists() {
            bail!("missing fixation file {}", path.display());
        }
        all_fixations.insert(id.clone(), read_fixations_csv(&path, id)?);
    }
    if all_fixations.len() < 2 {
        bail!("shuffled AUC needs at least two images with fixations");
    }

    let pool = install_pool(args.jobs)?;
    let scores: Vec<Result<AucEntry>> = pool.install(|| {
        images
            .par_iter()
            .map(|(id, path)| -> Result<AucEntry> {
                let mut image: Tensor<T> = imageio::load_rgb(path)?;
                if let Some(mean) = args.mean_rgb {
                    for pixel in image.data_mut().chunks_exact_mut(3) {
                        for (value, m) in pixel.iter_mut().zip(mean.iter()) {
                            *value = *value - T::from_f64(*m);
                        }
                    }
                }
                let (h, w) = (image.shape()[0], image.shape()[1]);
                let taps = cnn.forward(&image)?;
                let grid = taps.get(&model.layer_name).ok_or_else(|| {
                    anyhow::anyhow!("CNN does not tap layer '{}'", model.layer_name)
                })?;
                let map = unnaturalness_map(&model, grid, false, &MapOptions::default())?;
                let saliency = saliency_from_map(&map, h, w, args.sigma_rel)?;
                let negatives = build_negative_set(&all_fixations, id, args.cap, args.seed)?;
                let auc = shuffled_auc(&saliency, &all_fixations[id], &negatives)?;
                eprintln!("{id}: shuffled AUC {auc:.4}");
                Ok(AucEntry {
                    image_id: id.clone(),
                    shuffled_auc: auc,
                })
            })
            .collect()
    });

    let entries: Vec<AucEntry> = scores.into_iter().collect::<Result<_>>()?;
    let mean: f64 = entries.iter().map(|e| e.shuffled_auc).sum::<f64>() / entries.len() as f64;
    let mut file = std::fs::File::create(args.out)
        .with_context(|| format!("writing report {}", args.out.display()))?;
    writeln!(file, "image_id,shuffled_auc")?;
    for entry in &entries {
        writeln!(file, "{},{}", entry.image_id, entry.shuffled_auc)?;
    }
    writeln!(file, "mean,{mean}")?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        Manifest::new("eval-auc", args.seed, args.precision, entries).write(dir)?;
    }
    eprintln!("mean shuffled AUC {mean:.4} over {} images", images.len());
    Ok(())
}
