use mvsr_core::evalmetrics::point_metrics;
use mvsr_core::fusion::{fuse, FusionParams};
use mvsr_core::synthdata::{generate_scene, render_depth, sample_gt_surface};
fn main() {
    for (seed, boxes) in [(601u64, 0usize), (602, 0), (603, 0), (604, 0), (605, 0), (606, 0), (607, 0), (608, 0), (601, 1), (603, 1)] {
        let spec = generate_scene(seed, boxes, 12);
        let depths: Vec<_> = (0..12).map(|f| render_depth(&spec, f)).collect();
        let params = FusionParams { rel_tol: 0.01, min_consistent: 1, average_positions: false };
        let cloud = fuse(&depths, &spec.cameras(), &params).unwrap();
        let gt = sample_gt_surface(&spec, 2000.0);
        let pm = point_metrics(&cloud.positions, &gt, 0.05).unwrap();
        println!("seed {seed} boxes={boxes}: prec {:.4} rec {:.4} f {:.4} (pred {} gt {})", pm.prec, pm.rec, pm.fscore, cloud.len(), gt.len());
    }
}
