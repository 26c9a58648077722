//! Flat `key = value` run configuration with dotted section keys.
//!
//! Precedence: command-line flags override config-file values, which
//! override the built-in defaults. Unknown keys are rejected. The resolved
//! configuration is written into every run directory as
//! `config.resolved`, which is itself a loadable config file.

use anyhow::{bail, Context, Result};
use std::path::Path;
use vodet::detector::{DetectorConfig, ProposalMode, TrainSettings};
use vodet::sampling::{SamplingMode, SamplingPlan};
use vodet::synthvid::{default_classes, SceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub epochs: usize,
    pub steps_per_epoch: usize,

    pub data_dir: String,
    pub train_clips: usize,
    pub val_clips: usize,
    pub clip_len: usize,
    pub frame_size: usize,
    pub classes: usize,
    pub objects: usize,
    pub blur: usize,
    pub occlusion: bool,

    pub lambda: f64,
    pub mask_resolution: usize,
    pub n_conv: usize,
    pub roi_size: usize,
    pub up_size: usize,
    pub proposals: ProposalMode,
    pub boxmask: bool,
    pub lr: f64,
    pub momentum: f64,
    pub decay_epochs: Vec<usize>,
    pub nms_iou: f64,
    pub score_thresh: f64,
    pub proposal_count: usize,
    pub roi_batch: usize,
    pub jitter: f64,
    pub msa_heads: usize,

    pub sampling_mode: SamplingMode,
    pub sampling_t: usize,
    pub sampling_s: usize,
    pub train_support: usize,

    pub eval_thresholds: Vec<f64>,

    pub ablate_lambdas: Vec<f64>,
    pub ablate_n_convs: Vec<usize>,
    pub ablate_roi_sizes: Vec<(usize, usize)>,
    pub ablate_sampling_t: Vec<usize>,
    pub ablate_sampling_s: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: "runs/run".into(),
            epochs: 7,
            steps_per_epoch: 64,
            data_dir: "data/synth".into(),
            train_clips: 40,
            val_clips: 10,
            clip_len: 24,
            frame_size: 64,
            classes: 3,
            objects: 3,
            blur: 3,
            occlusion: true,
            lambda: 0.5,
            mask_resolution: 28,
            n_conv: 1,
            roi_size: 7,
            up_size: 14,
            proposals: ProposalMode::OracleJitter,
            boxmask: true,
            lr: 0.02,
            momentum: 0.9,
            decay_epochs: vec![4, 6],
            nms_iou: 0.5,
            score_thresh: 0.05,
            proposal_count: 32,
            roi_batch: 32,
            jitter: 0.15,
            msa_heads: 2,
            sampling_mode: SamplingMode::Uniform,
            sampling_t: 14,
            sampling_s: 1,
            train_support: 2,
            eval_thresholds: vodet::eval::coco_thresholds(),
            ablate_lambdas: vec![0.0, 0.25, 0.5, 1.0],
            ablate_n_convs: vec![1, 2, 3, 4],
            ablate_roi_sizes: vec![(7, 7), (7, 14), (7, 28), (14, 14)],
            ablate_sampling_t: vec![2, 6, 10, 14],
            ablate_sampling_s: vec![1, 3, 5, 7],
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => bail!("expected a boolean, got {v:?}"),
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("{e}: {s:?}")))
        .collect()
}

fn parse_pairs(v: &str) -> Result<Vec<(usize, usize)>> {
    // "7:7,7:14,7:28,14:14"
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (a, b) = s
                .split_once(':')
                .with_context(|| format!("expected roi:up pair, got {s:?}"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.seed" => self.seed = v.parse()?,
            "run.out" => self.out = v.to_string(),
            "run.epochs" => self.epochs = v.parse()?,
            "run.steps_per_epoch" => self.steps_per_epoch = v.parse()?,
            "data.dir" => self.data_dir = v.to_string(),
            "data.train_clips" => self.train_clips = v.parse()?,
            "data.val_clips" => self.val_clips = v.parse()?,
            "data.clip_len" => self.clip_len = v.parse()?,
            "data.frame_size" => self.frame_size = v.parse()?,
            "data.classes" => self.classes = v.parse()?,
            "data.objects" => self.objects = v.parse()?,
            "data.blur" => self.blur = v.parse()?,
            "data.occlusion" => self.occlusion = parse_bool(v)?,
            "detector.lambda" => self.lambda = v.parse()?,
            "detector.mask_resolution" => self.mask_resolution = v.parse()?,
            "detector.n_conv" => self.n_conv = v.parse()?,
            "detector.roi_size" => self.roi_size = v.parse()?,
            "detector.up_size" => self.up_size = v.parse()?,
            "detector.proposals" => {
                self.proposals = match v {
                    "oracle" => ProposalMode::OracleJitter,
                    "rpn" => ProposalMode::LearnedRpn,
                    _ => bail!("detector.proposals must be oracle or rpn, got {v:?}"),
                }
            }
            "detector.boxmask" => self.boxmask = parse_bool(v)?,
            "detector.lr" => self.lr = v.parse()?,
            "detector.momentum" => self.momentum = v.parse()?,
            "detector.decay_epochs" => self.decay_epochs = parse_list(v)?,
            "detector.nms_iou" => self.nms_iou = v.parse()?,
            "detector.score_thresh" => self.score_thresh = v.parse()?,
            "detector.proposal_count" => self.proposal_count = v.parse()?,
            "detector.roi_batch" => self.roi_batch = v.parse()?,
            "detector.jitter" => self.jitter = v.parse()?,
            "detector.msa_heads" => self.msa_heads = v.parse()?,
            "sampling.mode" => {
                self.sampling_mode = match v {
                    "uniform" => SamplingMode::Uniform,
                    "strided" => SamplingMode::Strided,
                    _ => bail!("sampling.mode must be uniform or strided, got {v:?}"),
                }
            }
            "sampling.t" => self.sampling_t = v.parse()?,
            "sampling.s" => self.sampling_s = v.parse()?,
            "sampling.train_support" => self.train_support = v.parse()?,
            "eval.thresholds" => self.eval_thresholds = parse_list(v)?,
            "ablate.lambdas" => self.ablate_lambdas = parse_list(v)?,
            "ablate.n_convs" => self.ablate_n_convs = parse_list(v)?,
            "ablate.roi_sizes" => self.ablate_roi_sizes = parse_pairs(v)?,
            "ablate.sampling_t" => self.ablate_sampling_t = parse_list(v)?,
            "ablate.sampling_s" => self.ablate_sampling_s = parse_list(v)?,
            _ => bail!("unknown configuration key {key:?}"),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key = value", path.display(), lineno + 1))?;
            self.apply(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    /// The resolved configuration, itself a valid config file.
    pub fn to_flat_text(&self) -> String {
        let pairs = |v: &[(usize, usize)]| {
            v.iter()
                .map(|(a, b)| format!("{a}:{b}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let ulist = |v: &[usize]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "run.seed = {}\nrun.out = {}\nrun.epochs = {}\nrun.steps_per_epoch = {}\n\
             data.dir = {}\ndata.train_clips = {}\ndata.val_clips = {}\ndata.clip_len = {}\n\
             data.frame_size = {}\ndata.classes = {}\ndata.objects = {}\ndata.blur = {}\n\
             data.occlusion = {}\n\
             detector.lambda = {}\ndetector.mask_resolution = {}\ndetector.n_conv = {}\n\
             detector.roi_size = {}\ndetector.up_size = {}\ndetector.proposals = {}\n\
             detector.boxmask = {}\ndetector.lr = {}\ndetector.momentum = {}\n\
             detector.decay_epochs = {}\ndetector.nms_iou = {}\ndetector.score_thresh = {}\n\
             detector.proposal_count = {}\ndetector.roi_batch = {}\ndetector.jitter = {}\n\
             detector.msa_heads = {}\n\
             sampling.mode = {}\nsampling.t = {}\nsampling.s = {}\nsampling.train_support = {}\n\
             eval.thresholds = {}\n\
             ablate.lambdas = {}\nablate.n_convs = {}\nablate.roi_sizes = {}\n\
             ablate.sampling_t = {}\nablate.sampling_s = {}\n",
            self.seed,
            self.out,
            self.epochs,
            self.steps_per_epoch,
            self.data_dir,
            self.train_clips,
            self.val_clips,
            self.clip_len,
            self.frame_size,
            self.classes,
            self.objects,
            self.blur,
            self.occlusion,
            self.lambda,
            self.mask_resolution,
            self.n_conv,
            self.roi_size,
            self.up_size,
            match self.proposals {
                ProposalMode::OracleJitter => "oracle",
                ProposalMode::LearnedRpn => "rpn",
            },
            if self.boxmask { "on" } else { "off" },
            self.lr,
            self.momentum,
            ulist(&self.decay_epochs),
            self.nms_iou,
            self.score_thresh,
            self.proposal_count,
            self.roi_batch,
            self.jitter,
            self.msa_heads,
            match self.sampling_mode {
                SamplingMode::Uniform => "uniform",
                SamplingMode::Strided => "strided",
            },
            self.sampling_t,
            self.sampling_s,
            self.train_support,
            list(&self.eval_thresholds),
            list(&self.ablate_lambdas),
            ulist(&self.ablate_n_convs),
            pairs(&self.ablate_roi_sizes),
            ulist(&self.ablate_sampling_t),
            ulist(&self.ablate_sampling_s),
        )
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            num_classes: self.classes,
            lambda_bm: self.lambda,
            mask_resolution: self.mask_resolution,
            n_conv: self.n_conv,
            roi_size: self.roi_size,
            up_size: self.up_size,
            proposal_mode: self.proposals,
            boxmask_enabled: self.boxmask,
            boxmask_positives_only: false,
            learning_rate: self.lr,
            momentum: self.momentum,
            decay_epochs: self.decay_epochs.clone(),
            nms_iou: self.nms_iou,
            score_thresh: self.score_thresh,
            proposal_count: self.proposal_count,
            roi_batch: self.roi_batch,
            jitter: self.jitter,
            msa_heads: self.msa_heads,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.frame_size,
            width: self.frame_size,
            clip_len: self.clip_len,
            object_count: self.objects,
            classes: default_classes(self.classes),
            blur_window: self.blur,
            occlusion: self.occlusion,
            seed: self.seed,
        }
    }

    pub fn sampling_plan(&self) -> SamplingPlan {
        SamplingPlan {
            mode: self.sampling_mode,
            support_count: self.sampling_t,
            stride: self.sampling_s,
            train_support: self.train_support,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_flat_text() {
        let base = RunConfig::default();
        let text = base.to_flat_text();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, &text).unwrap();
        let mut loaded = RunConfig::default();
        loaded.seed = 999; // will be overwritten by the file
        loaded.load_file(&path).unwrap();
        assert_eq!(loaded, base);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply("run.nope", "1").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "# comment\n\nrun.seed = 42 # trailing\n").unwrap();
        let mut c = RunConfig::default();
        c.load_file(&path).unwrap();
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn roi_pair_parsing() {
        let mut c = RunConfig::default();
        c.apply("ablate.roi_sizes", "7:7, 14:14").unwrap();
        assert_eq!(c.ablate_roi_sizes, vec![(7, 7), (14, 14)]);
        assert!(c.apply("ablate.roi_sizes", "7x7").is_err());
    }
}
