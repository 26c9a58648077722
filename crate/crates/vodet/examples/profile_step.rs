//! Rough per-phase timing of one training step. Run with
//! `cargo run -p vodet --example profile_step`.

use std::time::Instant;
use vodet::detector::{Detector, DetectorConfig};
use vodet::rng::{stream_rng, streams};
use vodet::synthvid::{generate_clip, SceneSpec};

fn main() {
    let spec = SceneSpec {
        clip_len: 6,
        seed: 1,
        ..Default::default()
    };
    let clip = generate_clip(&spec).unwrap();
    let mut det = Detector::new(DetectorConfig::default(), 2).unwrap();
    let mut rng = stream_rng(2, streams::PROPOSALS);

    // warm-up
    det.train_step(&clip.frames, &clip.annotations, 1, &[0, 3], 0.01, &mut rng)
        .unwrap();

    let t = Instant::now();
    let n = 5;
    for _ in 0..n {
        det.train_step(&clip.frames, &clip.annotations, 1, &[0, 3], 0.01, &mut rng)
            .unwrap();
    }
    println!("train_step: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t = Instant::now();
    for _ in 0..n {
        det.compute_feature_maps(&clip.frames[..3]).unwrap();
    }
    println!("backbone x3 frames: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let mut det_off = Detector::new(
        DetectorConfig {
            boxmask_enabled: false,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let t = Instant::now();
    for _ in 0..n {
        det_off
            .train_step(&clip.frames, &clip.annotations, 1, &[0, 3], 0.01, &mut rng)
            .unwrap();
    }
    println!("train_step no mask: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t = Instant::now();
    for _ in 0..n {
        let mut erng = stream_rng(3, streams::EVAL);
        let fmaps = det.compute_feature_maps(&clip.frames[..5]).unwrap();
        det.infer_with_feature_maps(&fmaps, &clip.annotations[0], &mut erng)
            .unwrap();
    }
    println!("infer (4 supports): {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
