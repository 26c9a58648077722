//! `vodet eval`: score a checkpoint on the validation split, write text and
//! JSON reports, a per-class AP chart, and (against a second checkpoint) a
//! baseline-vs-mask delta table.

use crate::runconfig::RunConfig;
use crate::svg;
use anyhow::{Context, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use vodet::detector::{evaluate_on_clips, Detector};
use vodet::eval::EvalResult;
use vodet::synthvid::load_dataset;

/// Config resolution for a checkpoint: the `config.resolved` sitting next
/// to it, unless an explicit config path is given.
pub fn config_for_checkpoint(
    checkpoint: &Path,
    explicit: Option<&Path>,
) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let implicit = checkpoint.parent().map(|d| d.join("config.resolved"));
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => implicit.filter(|p| p.exists()),
    };
    if let Some(p) = path {
        config.load_file(&p)?;
    }
    Ok(config)
}

pub fn evaluate_checkpoint(config: &RunConfig, checkpoint: &Path) -> Result<EvalResult> {
    let data_dir = Path::new(&config.data_dir);
    let (_, clips) = load_dataset(&data_dir.join("val"))
        .with_context(|| format!("loading val split from {}", data_dir.display()))?;
    let mut det = Detector::new(config.detector_config(), config.seed)?;
    det.load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(evaluate_on_clips(
        &det,
        &clips,
        &config.sampling_plan(),
        &config.eval_thresholds,
        config.seed,
    )?)
}

#[derive(Serialize)]
struct DeltaRow {
    metric: String,
    baseline: f64,
    with_mask: f64,
    delta: f64,
}

fn delta_table(baseline: &EvalResult, with_mask: &EvalResult) -> Vec<DeltaRow> {
    let mut rows = Vec::new();
    let mut push = |metric: &str, b: Option<f64>, m: Option<f64>| {
        if let (Some(b), Some(m)) = (b, m) {
            rows.push(DeltaRow {
                metric: metric.to_string(),
                baseline: b,
                with_mask: m,
                delta: m - b,
            });
        }
    };
    push("mAP@0.5", baseline.map_at(0.5), with_mask.map_at(0.5));
    push("mAP@0.75", baseline.map_at(0.75), with_mask.map_at(0.75));
    push(
        "mAP@[0.5:0.95]",
        Some(baseline.map_mean),
        Some(with_mask.map_mean),
    );
    rows
}

pub fn format_delta_table(rows: &[DeltaRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<16}{:>12}{:>12}{:>10}\n",
        "metric", "baseline", "with-mask", "delta"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<16}{:>12.4}{:>12.4}{:>+10.4}\n",
            r.metric, r.baseline, r.with_mask, r.delta
        ));
    }
    s
}

pub fn run(
    config: &RunConfig,
    checkpoint: &Path,
    baseline: Option<&Path>,
    baseline_config: Option<RunConfig>,
    out: Option<&Path>,
) -> Result<()> {
    let out: PathBuf = out
        .map(|p| p.to_path_buf())
        .or_else(|| checkpoint.parent().map(|p| p.to_path_buf()))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)?;

    let result = evaluate_checkpoint(config, checkpoint)?;
    std::fs::write(out.join("eval_report.txt"), result.to_text())?;
    serde_json::to_writer_pretty(
        std::fs::File::create(out.join("eval_report.json"))?,
        &result,
    )?;
    print!("{}", result.to_text());

    let plots = out.join("plots");
    std::fs::create_dir_all(&plots)?;
    if let Some(idx) = result
        .thresholds
        .iter()
        .position(|&t| (t - 0.5).abs() < 1e-9)
    {
        let labels: Vec<String> = result.classes.iter().map(|c| format!("class {}", c.class)).collect();
        let values: Vec<f64> = result.classes.iter().map(|c| c.ap[idx]).collect();
        svg::bar_chart("per-class AP@0.5", &labels, &values, &plots.join("ap_per_class.svg"))?;
    }

    if let Some(base_ckpt) = baseline {
        let base_cfg = match baseline_config {
            Some(c) => c,
            None => config_for_checkpoint(base_ckpt, None)?,
        };
        let base_result = evaluate_checkpoint(&base_cfg, base_ckpt)?;
        let rows = delta_table(&base_result, &result);
        let text = format_delta_table(&rows);
        std::fs::write(out.join("delta_table.txt"), &text)?;
        serde_json::to_writer_pretty(
            std::fs::File::create(out.join("delta_table.json"))?,
            &rows,
        )?;
        print!("{text}");
    }
    println!("reports written to {}", out.display());
    Ok(())
}
