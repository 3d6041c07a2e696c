//! Quick end-to-end training probe used during development.

use mvsr_core::pipeline::{
    prepare_scene, run_iter_study, run_train, ModelNets, PipelineConfig, SceneData,
};
use mvsr_core::synthdata::{generate_scene, render_depth, render_image, sample_gt_surface, LoadedScene};
use std::time::Instant;

fn scene_data(seed: u64, frames: usize, boxes: usize, cfg: &PipelineConfig) -> SceneData {
    let spec = generate_scene(seed, boxes, frames);
    let loaded = LoadedScene {
        cameras: spec.cameras(),
        images: (0..frames).map(|f| render_image(&spec, f)).collect(),
        gt_depths: (0..frames).map(|f| render_depth(&spec, f)).collect(),
    };
    prepare_scene(loaded, cfg).unwrap()
}

fn main() {
    let mut cfg = PipelineConfig::default();
    let args: Vec<String> = std::env::args().collect();
    let frames: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let n_train: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    cfg.train_phase_a = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    cfg.train_phase_b = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
    cfg.train_phase_c = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(4);

    let t0 = Instant::now();
    let train: Vec<SceneData> =
        (0..n_train).map(|i| scene_data(100 + i as u64, frames, 3, &cfg)).collect();
    let val: Vec<SceneData> = (0..2).map(|i| scene_data(200 + i as u64, frames, 3, &cfg)).collect();
    eprintln!("scene prep: {:?}", t0.elapsed());

    let t1 = Instant::now();
    let (store, report) = run_train(&train, &val, &cfg, None).unwrap();
    eprintln!("train: {:?}", t1.elapsed());
    for l in &report.log {
        eprintln!("{l}");
    }
    for (pi, losses) in report.phase_losses.iter().enumerate() {
        eprintln!(
            "phase {pi}: first {:?} last {:?}",
            &losses[..2.min(losses.len())],
            &losses[losses.len().saturating_sub(2)..]
        );
    }

    // held-out iteration study
    let nets = ModelNets::attach(&store, &cfg).unwrap();
    let gt_clouds: Vec<_> = (0..2)
        .map(|i| {
            let spec = generate_scene(200 + i as u64, 3, frames);
            sample_gt_surface(&spec, 200.0)
        })
        .collect();
    let t2 = Instant::now();
    let rows = run_iter_study(&val, &gt_clouds, &cfg, &store, &nets).unwrap();
    eprintln!("iter study: {:?}", t2.elapsed());
    for r in &rows {
        println!("{}", r.json());
    }
}
