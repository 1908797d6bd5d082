//! `train-vlm`: fit preprocessing on a feature corpus, train the four
//! directional predictors, and write the model file plus a loss CSV.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use cnnvlm::cnn::FeatureGrid;
use cnnvlm::preprocess::{self, FitOptions};
use cnnvlm::tensor::Element;
use cnnvlm::vlm::{train, TrainHyperparams, VlmLayerModel};

use crate::commands::read_feature_tensor;
use crate::manifest::Manifest;

#[derive(Debug, Serialize)]
struct TrainEntry {
    model_file: String,
    loss_csv: String,
    corpus_files: usize,
    final_loss: f64,
}

pub struct TrainArgs<'a> {
    pub features: &'a Path,
    pub layer: &'a str,
    pub out: &'a Path,
    pub hp: TrainHyperparams,
    pub whiten: bool,
    pub corpus_id: String,
    pub precision: &'a str,
}

pub fn run<T: Element>(args: &TrainArgs) -> Result<()> {
    let corpus = load_feature_corpus::<T>(args.features, args.layer)?;
    eprintln!(
        "training '{}' on {} grids ({} iterations, lr {})",
        args.layer,
        corpus.len(),
        args.hp.max_iters,
        args.hp.lr
    );
    let params = preprocess::fit(corpus.iter(), FitOptions { whiten: args.whiten })?;
    let mut model: VlmLayerModel<T> = VlmLayerModel::new(args.layer, params, args.hp.seed);
    model.whitened = args.whiten;
    model.meta.corpus_id = args.corpus_id.clone();

    let record = train(&mut model, &corpus, &args.hp, false)?;
    model
        .save_with_hyperparams(args.out, Some(&args.hp))
        .with_context(|| format!("writing model {}", args.out.display()))?;

    let loss_csv = args.out.with_extension("loss.csv");
    let mut file = std::fs::File::create(&loss_csv)?;
    writeln!(file, "iter,loss")?;
    for (i, loss) in record.loss_history.iter().enumerate() {
        writeln!(file, "{i},{loss}")?;
    }

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        let entry = TrainEntry {
            model_file: args.out.file_name().unwrap().to_string_lossy().into_owned(),
            loss_csv: loss_csv.file_name().unwrap().to_string_lossy().into_owned(),
            corpus_files: corpus.len(),
            final_loss: *record.loss_history.last().unwrap(),
        };
        Manifest::new("train-vlm", args.hp.seed, args.precision, vec![entry]).write(dir)?;
    }
    eprintln!(
        "trained: initial loss {:.6}, final loss {:.6}",
        record.loss_history.first().unwrap(),
        record.loss_history.last().unwrap()
    );
    Ok(())
}

/// Load every `*.<layer>.vlmt` in the directory, sorted by file name.
pub fn load_feature_corpus<T: Element>(dir: &Path, layer: &str) -> Result<Vec<FeatureGrid<T>>> {
    let suffix = format!(".{layer}.vlmt");
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading feature directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(&suffix))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no feature files for layer '{layer}' in {}", dir.display());
    }
    let mut corpus = Vec::with_capacity(paths.len());
    for path in paths {
        let (meta, tensor) = read_feature_tensor::<T>(&path)?;
        if meta.tap != layer {
            bail!(
                "{}: tap '{}' does not match requested layer '{layer}'",
                path.display(),
                meta.tap
            );
        }
        corpus.push(FeatureGrid::new(layer, tensor)?);
    }
    Ok(corpus)
}
