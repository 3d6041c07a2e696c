use mvsr_core::costvolume::{cost_tensor, regularize_tape};
use mvsr_core::diffkern::{adam_step, AdamParams, AdamState, ParameterStore, Tape};
use mvsr_core::pipeline::{prepare_scene, ModelNets, PipelineConfig};
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
    let window = scene.window(5, 7);
    let maps = window.coarse_maps();
    let grid = cfg.hypothesis_grid();
    let n = 3usize;
    let gt56 = nn_resample(&window.gt_depths[n], 56, 56);
    // fixed 400-pixel subset
    let subset: Vec<(u32, u32)> = (0..56u32 * 56)
        .filter(|i| i % 8 == 3)
        .map(|i| (i % 56, i / 56))
        .collect();
    let cost = cost_tensor(&window.viewsets[n], &window.cams, &maps, &grid, &subset).unwrap();
    let target: Vec<f64> =
        subset.iter().map(|&(x, y)| gt56.depth[y as usize * 56 + x as usize]).collect();
    let bins: Vec<i64> = target
        .iter()
        .map(|g| (((g - grid.start) / grid.step).round() as i64).clamp(0, 95))
        .collect();
    let mask = vec![true; subset.len()];

    let mut store = ParameterStore::new(1);
    let nets = ModelNets::register(&mut store, &cfg);
    let mut adam = AdamState::new();
    for it in 0..300 {
        let mut tape = Tape::new(&store);
        let (depth, probs) = regularize_tape(&mut tape, cost.clone(), &grid, &nets.costreg).unwrap();
        let l1 = tape.masked_l1_mean(depth, target.clone(), mask.clone()).unwrap();
        let ce = tape.nll_mean(probs, bins.clone()).unwrap();
        let loss = tape.add(l1, ce);
        let v_l1 = tape.value(l1).item();
        let v_ce = tape.value(ce).item();
        let grads = tape.backward(loss).unwrap();
        adam_step(&mut store, &mut adam, &grads, AdamParams::with_lr(3e-3)).unwrap();
        if it % 30 == 0 || it == 299 {
            println!("it {it}: l1 {v_l1:.4} ce {v_ce:.4}");
        }
    }
}
