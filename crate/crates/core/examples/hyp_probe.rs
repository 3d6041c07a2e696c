use mvsr_core::features::{variance_feature, FEAT_CHANNELS};
use mvsr_core::geometry::back_project;
use mvsr_core::pipeline::{prepare_scene, PipelineConfig};
use mvsr_core::synthdata::{generate_scene, render_depth, render_image, LoadedScene};
use mvsr_core::upsample::nn_resample;
use nalgebra::Vector2;

fn main() {
    let cfg = PipelineConfig::default();
    let frames = 24;
    let spec = generate_scene(100, 3, frames);
    let loaded = LoadedScene {
        cameras: spec.cameras(),
        images: (0..frames).map(|f| render_image(&spec, f)).collect(),
        gt_depths: (0..frames).map(|f| render_depth(&spec, f)).collect(),
    };
    let scene = prepare_scene(loaded, &cfg).unwrap();
    let window = scene.window(5, 7);
    let maps = window.coarse_maps();
    // hypotheses at gt + k*s around the true surface; the variance of the
    // center hypothesis should be the minimum
    for s in [0.05f64, 0.025] {
        let mut exact = 0;
        let mut near = 0;
        let mut total = 0;
        let n = 3;
        let intr = window.cams[n].intrinsics.rescaled(56, 56);
        let gt56 = nn_resample(&window.gt_depths[n], 56, 56);
        for y in (0..56).step_by(2) {
            for x in (0..56).step_by(2) {
                let g = gt56.depth[y * 56 + x];
                if !(0.6..=5.0).contains(&g) {
                    continue;
                }
                let px = Vector2::new(x as f64, y as f64);
                let mut best = (f64::INFINITY, 0i64);
                for k in -3i64..=3 {
                    let d = g + k as f64 * s;
                    let p = back_project(&intr, &window.cams[n].pose, &px, d).unwrap();
                    let var = variance_feature(&p, &window.viewsets[n], &window.cams, &maps).unwrap();
                    let mean: f64 = var.iter().sum::<f64>() / FEAT_CHANNELS as f64;
                    if mean < best.0 {
                        best = (mean, k);
                    }
                }
                total += 1;
                if best.1 == 0 {
                    exact += 1;
                }
                if best.1.abs() <= 1 {
                    near += 1;
                }
            }
        }
        println!(
            "step {s}: argmin at truth {:.3}, within one step {:.3} ({total} px)",
            exact as f64 / total as f64,
            near as f64 / total as f64
        );
    }
}
