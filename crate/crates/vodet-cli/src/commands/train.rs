//! `vodet train`: train one detector on the dataset's train split and
//! leave a re-executable run directory behind.

use crate::runconfig::RunConfig;
use crate::rundir::{checkpoint_path, loss_log_path, prepare_out_dir, write_run_metadata};
use anyhow::{Context, Result};
use std::io::Write;
use std::path::Path;
use vodet::detector::Detector;
use vodet::synthvid::load_dataset;

pub fn run(config: &RunConfig, force: bool) -> Result<()> {
    let out = Path::new(&config.out).to_path_buf();
    prepare_out_dir(&out, force)?;
    write_run_metadata(&out, config)?;

    let data_dir = Path::new(&config.data_dir);
    let (_, clips) = load_dataset(&data_dir.join("train"))
        .with_context(|| format!("loading train split from {}", data_dir.display()))?;

    let mut det = Detector::new(config.detector_config(), config.seed)?;
    let plan = config.sampling_plan();
    let settings = config.train_settings();

    let mut log = std::io::BufWriter::new(std::fs::File::create(loss_log_path(&out))?);
    writeln!(log, "step,l_rpn_cls,l_rpn_reg,l_cls,l_reg,l_bm,l_total")?;
    let total = settings.epochs * settings.steps_per_epoch;
    vodet::detector::train(&mut det, &clips, &plan, &settings, |step, r| {
        writeln!(
            log,
            "{step},{},{},{},{},{},{}",
            r.l_rpn_cls, r.l_rpn_reg, r.l_cls, r.l_reg, r.l_bm, r.l_total
        )
        .expect("loss log write");
        if step % 50 == 0 || step + 1 == total {
            println!("step {step:5}/{total}  l_total {:.4}", r.l_total);
        }
    })?;
    log.flush()?;

    det.save(&checkpoint_path(&out))?;
    println!("checkpoint written to {}", checkpoint_path(&out).display());
    Ok(())
}
