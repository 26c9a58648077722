//! Overfit calibration: train on one fixed scene and watch mAP climb.
//! `cargo run -p vodet --example overfit_probe [steps] [lr] [boxmask]`

use vodet::detector::{evaluate_on_clips, Detector, DetectorConfig};
use vodet::sampling::{SamplingMode, SamplingPlan};
use vodet::synthvid::{generate_clip, SceneSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let boxmask: bool = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(true);

    let spec = SceneSpec {
        clip_len: 8,
        seed: 7,
        occlusion: false,
        ..Default::default()
    };
    let clip = generate_clip(&spec).unwrap();
    let clips = [clip];
    let plan = SamplingPlan {
        mode: SamplingMode::Uniform,
        support_count: 4,
        stride: 1,
        train_support: 2,
    };
    let config = DetectorConfig {
        boxmask_enabled: boxmask,
        learning_rate: lr,
        ..Default::default()
    };
    let mut det = Detector::new(config, 11).unwrap();
    let settings = vodet::detector::TrainSettings {
        epochs: 7,
        steps_per_epoch: steps / 7,
        seed: 11,
    };
    let t0 = std::time::Instant::now();
    vodet::detector::train(&mut det, &clips, &plan, &settings, |step, r| {
        if step % 50 == 0 {
            println!(
                "step {step:4}  l_total {:.4}  l_cls {:.4}  l_reg {:.4}  l_bm {:.4}",
                r.l_total, r.l_cls, r.l_reg, r.l_bm
            );
        }
    })
    .unwrap();
    println!("train time: {:.1} s", t0.elapsed().as_secs_f64());

    let t1 = std::time::Instant::now();
    let result = evaluate_on_clips(&det, &clips, &plan, &[0.5, 0.75], 99).unwrap();
    println!("eval time: {:.1} s", t1.elapsed().as_secs_f64());
    println!(
        "mAP@0.5 = {:.4}   mAP@0.75 = {:.4}",
        result.map_at(0.5).unwrap(),
        result.map_at(0.75).unwrap()
    );
}
