//! Support-frame selection for a target frame: uniform spacing over the
//! whole video, or a strided neighborhood around the target. Indices that
//! land outside the video are clamped to the first/last frame, which
//! realizes boundary replication; duplicates produced by clamping are kept.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Uniform,
    Strided,
}

/// Support-frame selection parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub mode: SamplingMode,
    /// Number of support frames at inference.
    pub support_count: usize,
    /// Frame stride in strided mode.
    pub stride: usize,
    /// Number of random support frames drawn per step during training.
    pub train_support: usize,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            mode: SamplingMode::Uniform,
            support_count: 14,
            stride: 1,
            train_support: 2,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidSamplingPlan("stride must be >= 1".into()));
        }
        if self.mode == SamplingMode::Strided && self.support_count % 2 != 0 {
            return Err(Error::InvalidSamplingPlan(format!(
                "strided mode pairs frames on both sides; support count {} is odd",
                self.support_count
            )));
        }
        Ok(())
    }
}

/// Support-frame indices for `target` under `plan`.
///
/// Uniform mode spans the whole video with `round(k * (len-1) / (T-1))`
/// and is independent of the target; strided mode takes `target +- k*S`
/// for `k = 1..=T/2`, each clamped into range.
pub fn sample_support(video_len: usize, target: usize, plan: &SamplingPlan) -> Result<Vec<usize>> {
    plan.validate()?;
    if target >= video_len {
        return Err(Error::TargetOutOfRange { target, video_len });
    }
    let t = plan.support_count;
    if t == 0 {
        return Ok(vec![]);
    }
    let last = (video_len - 1) as f64;
    let indices = match plan.mode {
        SamplingMode::Uniform => {
            if t == 1 {
                vec![0]
            } else {
                (0..t)
                    .map(|k| (k as f64 * last / (t - 1) as f64).round() as usize)
                    .collect()
            }
        }
        SamplingMode::Strided => {
            let half = t / 2;
            let s = plan.stride as isize;
            let clamp = |i: isize| i.clamp(0, video_len as isize - 1) as usize;
            let mut out = Vec::with_capacity(t);
            for k in (1..=half).rev() {
                out.push(clamp(target as isize - k as isize * s));
            }
            for k in 1..=half {
                out.push(clamp(target as isize + k as isize * s));
            }
            out
        }
    };
    debug_assert_eq!(indices.len(), t);
    Ok(indices)
}

/// Random support indices drawn for one training step.
pub fn sample_train_support<R: Rng>(
    video_len: usize,
    target: usize,
    plan: &SamplingPlan,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if target >= video_len {
        return Err(Error::TargetOutOfRange { target, video_len });
    }
    Ok((0..plan.train_support)
        .map(|_| rng.gen_range(0..video_len))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(mode: SamplingMode, t: usize, s: usize) -> SamplingPlan {
        SamplingPlan {
            mode,
            support_count: t,
            stride: s,
            train_support: 2,
        }
    }

    #[test]
    fn single_frame_video_replicates_frame_zero() {
        for mode in [SamplingMode::Uniform, SamplingMode::Strided] {
            let got = sample_support(1, 0, &plan(mode, 4, 2)).unwrap();
            assert_eq!(got, vec![0, 0, 0, 0]);
        }
    }

    #[test]
    fn uniform_rounding_formula() {
        let got = sample_support(8, 3, &plan(SamplingMode::Uniform, 4, 1)).unwrap();
        assert_eq!(got, vec![0, 2, 5, 7]);
    }

    #[test]
    fn strided_clamps_to_bounds() {
        let got = sample_support(10, 1, &plan(SamplingMode::Strided, 4, 2)).unwrap();
        assert_eq!(got, vec![0, 0, 3, 5]);
    }

    #[test]
    fn uniform_is_target_independent() {
        let p = plan(SamplingMode::Uniform, 6, 1);
        let a = sample_support(20, 0, &p).unwrap();
        let b = sample_support(20, 19, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_length_and_range() {
        for len in [1usize, 2, 5, 9, 30] {
            for t in [0usize, 2, 4, 8] {
                for mode in [SamplingMode::Uniform, SamplingMode::Strided] {
                    let got = sample_support(len, len / 2, &plan(mode, t, 3)).unwrap();
                    assert_eq!(got.len(), t);
                    assert!(got.iter().all(|&i| i < len));
                }
            }
        }
    }

    #[test]
    fn uniform_t1_is_frame_zero() {
        let got = sample_support(9, 4, &plan(SamplingMode::Uniform, 1, 1)).unwrap();
        assert_eq!(got, vec![0]);
    }

    #[test]
    fn target_out_of_range_is_error() {
        assert!(sample_support(5, 5, &plan(SamplingMode::Uniform, 2, 1)).is_err());
    }

    #[test]
    fn strided_odd_count_rejected() {
        assert!(sample_support(10, 3, &plan(SamplingMode::Strided, 3, 1)).is_err());
    }

    #[test]
    fn train_sampling_deterministic_for_seed() {
        let p = plan(SamplingMode::Uniform, 2, 1);
        let mut r1 = crate::rng::stream_rng(3, 40);
        let mut r2 = crate::rng::stream_rng(3, 40);
        let a = sample_train_support(12, 5, &p, &mut r1).unwrap();
        let b = sample_train_support(12, 5, &p, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|&i| i < 12));
    }
}
