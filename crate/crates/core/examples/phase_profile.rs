//! Timing probe for the trainer's inner pieces.

use mvsr_core::costvolume::{build_cost_volume, cost_tensor, regularize_tape};
use mvsr_core::diffkern::{ParameterStore, Tape};
use mvsr_core::pipeline::{prepare_scene, ModelNets, PipelineConfig, SceneData};
use mvsr_core::synthdata::{generate_scene, render_depth, render_image, LoadedScene};
use std::time::Instant;

fn main() {
    let cfg = PipelineConfig::default();
    let frames = 8;
    let spec = generate_scene(100, 3, frames);
    let loaded = LoadedScene {
        cameras: spec.cameras(),
        images: (0..frames).map(|f| render_image(&spec, f)).collect(),
        gt_depths: (0..frames).map(|f| render_depth(&spec, f)).collect(),
    };
    let scene: SceneData = prepare_scene(loaded, &cfg).unwrap();
    let mut store = ParameterStore::new(1);
    let nets = ModelNets::register(&mut store, &cfg);
    let window = scene.window(0, 7);
    let maps = window.coarse_maps();
    let grid = cfg.hypothesis_grid();

    let subset: Vec<(u32, u32)> = (0..640u32).map(|i| (i % 56, (i * 7 % 56 + i / 56) % 56)).collect();
    let t = Instant::now();
    let cost = cost_tensor(&window.viewsets[3], &window.cams, &maps, &grid, &subset).unwrap();
    eprintln!("cost_tensor 640px: {:?}", t.elapsed());

    let t = Instant::now();
    let mut tape = Tape::new(&store);
    let (depth, _probs) = regularize_tape(&mut tape, cost.clone(), &grid, &nets.costreg).unwrap();
    eprintln!("reg taped fwd 640px: {:?}", t.elapsed());
    let t = Instant::now();
    let loss = tape.dot_const(depth, vec![1.0; 640]);
    let _g = tape.backward(loss).unwrap();
    eprintln!("reg bwd 640px: {:?}", t.elapsed());

    let t = Instant::now();
    let vol = build_cost_volume(&window.viewsets[3], &window.cams, &maps, &grid).unwrap();
    eprintln!("full cost volume 3136px: {:?}", t.elapsed());
    let t = Instant::now();
    let pred = mvsr_core::costvolume::regularize_and_predict(&vol, &store, &nets.costreg).unwrap();
    eprintln!("full regularize fwd: {:?}", t.elapsed());

    // one full inner pass
    let depths: Vec<_> = (0..7).map(|_| pred.depth.clone()).collect();
    let t = Instant::now();
    let cloud = mvsr_core::scenemodel::form_point_cloud(
        &depths,
        &window.cams,
        &window.viewsets,
        &maps,
        mvsr_core::features::Aggregation::Variance,
    )
    .unwrap();
    eprintln!("form_point_cloud ({} pts): {:?}", cloud.len(), t.elapsed());
    let t = Instant::now();
    let vols = mvsr_core::scenemodel::encode_scene(&store, &nets.scene, &cloud).unwrap();
    eprintln!("encode_scene ({} cells): {:?}", vols.v3.len(), t.elapsed());
    let t = Instant::now();
    let _updated = mvsr_core::pointflow::inner_pass(
        &depths,
        &vols,
        &window.cams,
        &window.viewsets,
        &maps,
        &store,
        &nets.head,
        0.05,
        3,
        mvsr_core::pointflow::AblationMode::Full,
        mvsr_core::pointflow::DirectionMode::PerPixelRay,
    )
    .unwrap();
    eprintln!("inner_pass full (7 frames): {:?}", t.elapsed());
}
