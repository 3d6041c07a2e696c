use mvsr_core::costvolume::build_cost_volume;
use mvsr_core::pipeline::{prepare_scene, PipelineConfig};
use mvsr_core::synthdata::{generate_scene, render_depth, render_image, LoadedScene};
use mvsr_core::upsample::nn_resample;

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
    let window = scene.window(0, 7);
    let maps = window.coarse_maps();
    let grid = cfg.hypothesis_grid();
    for n in [0usize, 3] {
        let vol = build_cost_volume(&window.viewsets[n], &window.cams, &maps, &grid).unwrap();
        let gt56 = nn_resample(&window.gt_depths[n], 56, 56);
        let (l, c) = (grid.count, vol.channels);
        let mut exact = 0;
        let mut near = 0;
        let mut total = 0;
        let mut err_sum = 0.0;
        for i in 0..56 * 56 {
            let g = gt56.depth[i];
            if !(0.5..=5.25).contains(&g) {
                continue;
            }
            let gt_bin = ((g - grid.start) / grid.step).round() as i64;
            let mut best = (f64::INFINITY, 0i64);
            for li in 0..l {
                let mean: f64 = vol.cost.data()[(i * l + li) * c..(i * l + li + 1) * c]
                    .iter()
                    .sum::<f64>()
                    / c as f64;
                if mean < best.0 {
                    best = (mean, li as i64);
                }
            }
            total += 1;
            err_sum += (best.1 - gt_bin).abs() as f64;
            if best.1 == gt_bin {
                exact += 1;
            }
            if (best.1 - gt_bin).abs() <= 1 {
                near += 1;
            }
        }
        println!(
            "frame {n}: argmin exact {:.3} near1 {:.3} mean|bin err| {:.2} over {total}",
            exact as f64 / total as f64,
            near as f64 / total as f64,
            err_sum / total as f64
        );
    }
}
