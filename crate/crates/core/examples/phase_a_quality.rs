use mvsr_core::evalmetrics::depth_metrics;
use mvsr_core::pipeline::{prepare_scene, run_train, ModelNets, PipelineConfig, SceneData};
use mvsr_core::synthdata::{generate_scene, render_depth, render_image, LoadedScene};
use mvsr_core::upsample::nn_resample;

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
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let mut cfg = PipelineConfig::default();
    cfg.train_phase_a = iters;
    cfg.train_phase_b = 0;
    cfg.train_phase_c = 0;
    cfg.train_lr = lr;
    cfg.train_subset_pixels = 320;
    cfg.train_epoch_iters = 10;
    let train: Vec<SceneData> = (0..3).map(|i| scene_data(100 + i, 24, &cfg)).collect();
    let val: Vec<SceneData> = (0..1).map(|i| scene_data(200 + i, 24, &cfg)).collect();
    let t = std::time::Instant::now();
    let (store, report) = run_train(&train, &val, &cfg, None).unwrap();
    eprintln!("train {:?}", t.elapsed());
    let losses = &report.phase_losses[0];
    eprintln!("loss first 3 {:?} last 3 {:?}", &losses[..3], &losses[losses.len()-3..]);
    // D0 quality on the val scene
    let nets = ModelNets::attach(&store, &cfg).unwrap();
    for (label, scene) in [("train", &train[0]), ("val", &val[0])] {
        let window = scene.window(8, 7);
        let coarse = mvsr_core::pipeline::predict_coarse(&window, &cfg, &store, &nets).unwrap();
        let mut reports = Vec::new();
        for (p, g) in coarse.iter().zip(&window.gt_depths) {
            reports.push(depth_metrics(p, &nn_resample(g, 56, 56), 0.5).unwrap());
        }
        let agg = mvsr_core::evalmetrics::aggregate_depth_reports(&reports);
        println!("{label} D0 abs_rel {:.4} abs_diff {:.4} d125 {:.4}", agg.abs_rel, agg.abs_diff, agg.delta_125);
    }
}
