pub mod auc;
pub mod extract;
pub mod fixtures_cmd;
pub mod reconstruct_cmd;
pub mod saliency_cmd;
pub mod score;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use cnnvlm::container::{self, MAGIC_TENSOR};
use cnnvlm::tensor::{Element, Tensor};

/// Images in a directory (`.png`/`.ppm`), sorted by file stem.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading image directory {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        if ext == "png" || ext == "ppm" {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.push((id, path));
        }
    }
    if out.is_empty() {
        bail!("no images in {}", dir.display());
    }
    out.sort();
    Ok(out)
}

pub fn feature_file_name(image_id: &str, tap: &str) -> String {
    format!("{image_id}.{tap}.vlmt")
}

#[derive(Debug, Deserialize)]
pub struct FeatureFileMeta {
    pub image_id: String,
    pub tap: String,
}

/// Write one extracted feature grid as a raw tensor container.
pub fn write_feature_tensor<T: Element>(
    path: &Path,
    image_id: &str,
    tap: &str,
    tensor: &Tensor<T>,
) -> Result<()> {
    let meta = serde_json::json!({ "image_id": image_id, "tap": tap });
    container::write(path, MAGIC_TENSOR, meta, &[("tensor".to_string(), tensor)])?;
    Ok(())
}

pub fn read_feature_tensor<T: Element>(path: &Path) -> Result<(FeatureFileMeta, Tensor<T>)> {
    let c = container::read(path, MAGIC_TENSOR)
        .with_context(|| format!("reading tensor file {}", path.display()))?;
    let meta: FeatureFileMeta = serde_json::from_value(c.meta.clone())
        .with_context(|| format!("tensor file {} metadata", path.display()))?;
    let tensor = c.tensor::<T>("tensor")?;
    Ok((meta, tensor))
}

/// Write any raw tensor (saliency maps, reconstructed images).
pub fn write_raw_tensor<T: Element>(path: &Path, kind: &str, tensor: &Tensor<T>) -> Result<()> {
    let meta = serde_json::json!({ "kind": kind });
    container::write(path, MAGIC_TENSOR, meta, &[("tensor".to_string(), tensor)])?;
    Ok(())
}

/// Configure the rayon pool for `--jobs`; 0 means all cores.
pub fn install_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if jobs > 0 {
        builder = builder.num_threads(jobs);
    }
    Ok(builder.build()?)
}
