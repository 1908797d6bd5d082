//! `make-fixtures`: generate the deterministic demo data set — a seeded
//! toy CNN, a smooth-image training corpus, and a fixation benchmark
//! dataset with anomaly patches.

use std::path::Path;

use anyhow::Result;

use cnnvlm::fixtures;

pub struct FixturesArgs<'a> {
    pub out: &'a Path,
    pub seed: u64,
    pub corpus_count: usize,
    pub dataset_count: usize,
    pub image_size: usize,
}

pub fn run(args: &FixturesArgs) -> Result<()> {
    std::fs::create_dir_all(args.out)?;
    let cnn = fixtures::toy_cnn::<f32>(args.seed);
    cnn.save(&args.out.join("cnn_random.vlmw"))?;
    eprintln!("wrote cnn_random.vlmw");
    let ids = fixtures::write_corpus(
        &args.out.join("corpus"),
        args.corpus_count,
        args.image_size,
        args.seed,
    )?;
    eprintln!("wrote corpus/ ({} images)", ids.len());
    let entries = fixtures::write_fixation_dataset(
        &args.out.join("dataset"),
        args.dataset_count,
        args.image_size,
        args.seed.wrapping_add(1),
    )?;
    eprintln!("wrote dataset/ ({} images with fixations)", entries.len());

    // a ready-to-use training config for the demo pipeline
    let config = serde_json::json!({
        "seed": args.seed,
        "train": {
            "lr": 0.1,
            "momentum": 0.9,
            "batch": 16,
            "lr_decay_factor": 0.1,
            "lr_decay_every": 200,
            "max_iters": 300,
            "clip_norm": 5.0
        }
    });
    std::fs::write(
        args.out.join("train-config.json"),
        serde_json::to_string_pretty(&config)? + "\n",
    )?;
    eprintln!("wrote train-config.json");
    Ok(())
}
