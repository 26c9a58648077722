//! Run-directory bookkeeping: refusal semantics for existing output,
//! resolved-config snapshots, and the code-version stamp.

use crate::runconfig::RunConfig;
use anyhow::{bail, Context, Result};
use std::path::{Path, PathBuf};

/// Version stamp written into every run directory.
pub fn version_stamp() -> String {
    format!(
        "vodet {} / evaluator {}",
        env!("CARGO_PKG_VERSION"),
        vodet::eval::EVALUATOR_VERSION
    )
}

/// Create `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            );
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Write the resolved config, seed, and version stamp into a run dir.
pub fn write_run_metadata(dir: &Path, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.resolved"), config.to_flat_text())?;
    std::fs::write(dir.join("seed.txt"), format!("{}\n", config.seed))?;
    std::fs::write(dir.join("version.txt"), format!("{}\n", version_stamp()))?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.bin")
}

pub fn loss_log_path(dir: &Path) -> PathBuf {
    dir.join("loss_log.csv")
}
