//! `vodet generate`: write the train/val split of the synthetic dataset.

use crate::runconfig::RunConfig;
use crate::rundir::prepare_out_dir;
use anyhow::Result;
use std::collections::BTreeMap;
use std::path::Path;
use vodet::rng::derive_seed;
use vodet::synthvid::{generate_dataset, save_dataset};

pub fn run(config: &RunConfig, force: bool) -> Result<()> {
    let dir = Path::new(&config.data_dir);
    prepare_out_dir(dir, force)?;

    let spec = config.scene_spec();
    let train = generate_dataset(&spec, derive_seed(config.seed, 1), config.train_clips, "train")?;
    let val = generate_dataset(&spec, derive_seed(config.seed, 2), config.val_clips, "val")?;
    save_dataset(&dir.join("train"), &train, &spec.classes)?;
    save_dataset(&dir.join("val"), &val, &spec.classes)?;

    let mut class_histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, clip) in train.iter().chain(val.iter()) {
        for frame in &clip.annotations {
            for ann in frame {
                *class_histogram.entry(ann.label).or_default() += 1;
            }
        }
    }
    println!(
        "wrote {} train + {} val clips of {} frames at {}x{} to {}",
        train.len(),
        val.len(),
        config.clip_len,
        config.frame_size,
        config.frame_size,
        dir.display()
    );
    println!("class table: {} classes", spec.classes.len());
    for (class, count) in &class_histogram {
        println!("  class {class}: {count} annotations");
    }
    Ok(())
}
