use mvsr_core::pipeline::{prepare_scene, run_train, PipelineConfig, SceneData};
use mvsr_core::synthdata::{generate_scene, render_depth, render_image, LoadedScene};
use std::time::Instant;

fn scene_data(seed: u64, frames: usize, cfg: &PipelineConfig) -> SceneData {
    let spec = generate_scene(seed, 3, frames);
    let loaded = LoadedScene {
        cameras: spec.cameras(),
        images: (0..frames).map(|f| render_image(&spec, f)).collect(),
        gt_depths: (0..frames).map(|f| render_depth(&spec, f)).collect(),
    };
    prepare_scene(loaded, cfg).unwrap()
}

fn main() {
    let mut cfg = PipelineConfig::default();
    let train: Vec<SceneData> = (0..2).map(|i| scene_data(100 + i, 8, &cfg)).collect();
    let val: Vec<SceneData> = (0..1).map(|i| scene_data(200 + i, 8, &cfg)).collect();
    for (a, b, c, label) in [(4, 0, 0, "A"), (0, 2, 0, "B"), (0, 0, 2, "C")] {
        cfg.train_phase_a = a;
        cfg.train_phase_b = b;
        cfg.train_phase_c = c;
        cfg.train_epoch_iters = 1000; // suppress val/checkpoint cost
        let t = Instant::now();
        let _ = run_train(&train, &val, &cfg, None).unwrap();
        let iters = (a + b + c) as f64;
        println!("phase {label}: {:?} total, {:.2} s/iter", t.elapsed(), t.elapsed().as_secs_f64() / iters);
    }
}
