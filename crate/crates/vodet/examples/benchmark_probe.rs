//! One seed of the baseline vs +mask benchmark.
//! `cargo run -p vodet --example benchmark_probe [seed] [steps_per_epoch] [train_clips]`

use vodet::detector::{evaluate_on_clips, train, Detector, DetectorConfig, TrainSettings};
use vodet::eval::coco_thresholds;
use vodet::sampling::{SamplingMode, SamplingPlan};
use vodet::synthvid::{generate_dataset, SceneSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let spe: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let n_train: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);

    let spec = SceneSpec::default();
    let train_clips: Vec<_> = generate_dataset(&spec, seed, n_train, "tr")
        .unwrap()
        .into_iter()
        .map(|(_, c)| c)
        .collect();
    let val_clips: Vec<_> = generate_dataset(&spec, seed.wrapping_add(500_000), 10, "va")
        .unwrap()
        .into_iter()
        .map(|(_, c)| c)
        .collect();
    let plan = SamplingPlan {
        mode: SamplingMode::Uniform,
        support_count: 14,
        stride: 1,
        train_support: 2,
    };

    let mut run = |boxmask: bool| {
        let config = DetectorConfig {
            boxmask_enabled: boxmask,
            ..Default::default()
        };
        let mut det = Detector::new(config, seed).unwrap();
        let settings = TrainSettings {
            epochs: 7,
            steps_per_epoch: spe,
            seed,
        };
        let t0 = std::time::Instant::now();
        train(&mut det, &train_clips, &plan, &settings, |_, _| {}).unwrap();
        let t_train = t0.elapsed().as_secs_f64();
        let t1 = std::time::Instant::now();
        let res = evaluate_on_clips(&det, &val_clips, &plan, &coco_thresholds(), seed).unwrap();
        println!(
            "boxmask={boxmask}  mAP@0.5 {:.4}  mAP@0.75 {:.4}  mAP@[.5:.95] {:.4}  (train {t_train:.0}s eval {:.0}s)",
            res.map_at(0.5).unwrap(),
            res.map_at(0.75).unwrap(),
            res.map_mean,
            t1.elapsed().as_secs_f64()
        );
        (res.map_at(0.5).unwrap(), res.map_at(0.75).unwrap())
    };

    let (b50, b75) = run(false);
    let (m50, m75) = run(true);
    println!(
        "delta@0.5 {:+.4}   delta@0.75 {:+.4}   pattern(d75>=d50): {}",
        m50 - b50,
        m75 - b75,
        m75 - b75 >= m50 - b50
    );
}
