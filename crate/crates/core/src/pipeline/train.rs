//! Desk-scale trainer.
//!
//! Training runs in three phases over the same parameter store, each with
//! Adam at the configured initial rate and plateau-based halving on
//! validation loss:
//!
//!   A. the cost-volume regularizer, supervised by the L1 error of the
//!      soft-argmin depth on seeded pixel subsets;
//!   B. the scene encoding (PointNet + sparse U-Net) and the offset head,
//!      supervised by the L1 error of every refinement stage, unrolled
//!      through both outer loops; depth-to-position chains between stages
//!      are treated as constants, so each stage receives direct
//!      supervision;
//!   C. the three smoothing nets, supervised on refined depths produced by
//!      the frozen earlier stages.
//!
//! Every random choice (scene, window, augmentation, pixel subsets) comes
//! from streams keyed by the training seed, so two runs with the same
//! configuration are bit-identical.

use super::config::PipelineConfig;
use super::{ModelNets, SceneData};
use crate::costvolume::{cost_tensor, regularize_tape};
use crate::diffkern::{
    adam_step, save_weights, AdamParams, AdamState, GradMap, ParameterStore, Tape, Tensor,
};
use crate::error::{Error, Result};
use crate::features::FEAT_CHANNELS;
use crate::geometry::{back_project, ray_z, viewing_ray, DepthMap};
use crate::pointflow::{inner_pass, AblationMode, DirectionMode};
use crate::rng::Stream;
use crate::scenemodel::{
    encode_scene_tape, form_point_cloud, EncodedSceneTape, SceneVolumes, SparseFeatureVolume,
};
use crate::upsample::{nn_resample, nn_upsample, propagation_smooth_tape, smoothed_validity};
use nalgebra::Vector2;
use std::path::Path;
use std::rc::Rc;

#[derive(Debug, Default)]
pub struct TrainReport {
    /// One JSON line per logged event.
    pub log: Vec<String>,
    /// Per-iteration training loss for each phase.
    pub phase_losses: [Vec<f64>; 3],
}

struct PhaseOptimizer {
    adam: AdamState,
    lr: f64,
    best_val: f64,
    patience: usize,
}

impl PhaseOptimizer {
    fn new(lr: f64) -> Self {
        PhaseOptimizer { adam: AdamState::new(), lr, best_val: f64::INFINITY, patience: 0 }
    }

    fn observe_val(&mut self, val: f64, cfg: &PipelineConfig) {
        if val < self.best_val * (1.0 - 1e-3) {
            self.best_val = val;
            self.patience = 0;
        } else {
            self.patience += 1;
            if self.patience >= cfg.train_plateau_patience {
                self.lr *= cfg.train_lr_decay;
                self.patience = 0;
            }
        }
    }
}

fn merge_grads(total: &mut GradMap, part: GradMap) {
    for (path, g) in part {
        match total.get_mut(&path) {
            Some(t) => {
                let td = t.data_mut();
                for (a, b) in td.iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                total.insert(path, g);
            }
        }
    }
}

fn scale_grads(total: &mut GradMap, s: f64) {
    for g in total.values_mut() {
        for v in g.data_mut() {
            *v *= s;
        }
    }
}

/// Draw `count` distinct valid pixels of a depth map.
fn pixel_subset(map: &DepthMap, count: usize, rng: &mut Stream) -> Vec<(u32, u32)> {
    let mut valid: Vec<(u32, u32)> = (0..map.height as u32)
        .flat_map(|y| (0..map.width as u32).map(move |x| (x, y)))
        .filter(|&(x, y)| map.valid[y as usize * map.width + x as usize])
        .collect();
    let take = count.min(valid.len());
    let mut out = Vec::with_capacity(take);
    for _ in 0..take {
        let i = rng.below(valid.len());
        out.push(valid.swap_remove(i));
    }
    out
}

struct SampleDraw {
    scene: usize,
    window_start: usize,
    aug: super::Augmentation,
}

fn draw_sample(
    scenes: &[SceneData],
    cfg: &PipelineConfig,
    rng: &mut Stream,
    augment: bool,
) -> SampleDraw {
    let scene = rng.below(scenes.len());
    let frames = scenes[scene].n_frames();
    let len = cfg.train_frames_per_sample.min(frames);
    let window_start = rng.below(frames - len + 1);
    let aug =
        if augment { super::Augmentation::sample(rng) } else { super::Augmentation::identity() };
    SampleDraw { scene, window_start, aug }
}

/// Phase A loss for one window sample; gradients accumulate into `grads`
/// when provided.
fn phase_a_sample(
    scenes: &[SceneData],
    draw: &SampleDraw,
    cfg: &PipelineConfig,
    store: &ParameterStore,
    nets: &ModelNets,
    rng: &mut Stream,
    mut grads: Option<&mut GradMap>,
) -> Result<f64> {
    let window = scenes[draw.scene].window(draw.window_start, cfg.train_frames_per_sample);
    let cams = draw.aug.apply_cameras(&window.cams);
    let gts = draw.aug.apply_depths(&window.gt_depths);
    let maps = window.coarse_maps();
    let grid = cfg.hypothesis_grid();
    let mut total = 0.0;
    let frames = supervised_frames(window.n_frames(), cfg.train_frames_supervised, rng);
    for &n in &frames {
        let gt56 = nn_resample(&gts[n], 56, 56);
        let subset = pixel_subset(&gt56, cfg.train_subset_pixels, rng);
        if subset.is_empty() {
            continue;
        }
        let cost = cost_tensor(&window.viewsets[n], &cams, &maps, &grid, &subset)?;
        let mut tape = Tape::new(store);
        let (depth, probs) = regularize_tape(&mut tape, cost, &grid, &nets.costreg)?;
        let target: Vec<f64> =
            subset.iter().map(|&(x, y)| gt56.depth[y as usize * 56 + x as usize]).collect();
        let mask: Vec<bool> =
            subset.iter().map(|&(x, y)| gt56.valid[y as usize * 56 + x as usize]).collect();
        // auxiliary cross-entropy on the hypothesis bin nearest the ground
        // truth speeds up convergence; the depth L1 remains the principal
        // objective
        let bins: Vec<i64> = target
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| {
                if m {
                    (((g - grid.start) / grid.step).round() as i64).clamp(0, grid.count as i64 - 1)
                } else {
                    -1
                }
            })
            .collect();
        let l1 = tape.masked_l1_mean(depth, target, mask)?;
        let ce = tape.nll_mean(probs, bins)?;
        let loss = tape.add(l1, ce);
        total += tape.value(loss).item();
        if let Some(acc) = grads.as_deref_mut() {
            merge_grads(acc, tape.backward(loss)?);
        }
    }
    Ok(total / frames.len() as f64)
}

/// Seeded choice of `count` distinct frames to supervise.
fn supervised_frames(n_frames: usize, count: usize, rng: &mut Stream) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n_frames).collect();
    let take = count.min(n_frames);
    let mut out = Vec::with_capacity(take);
    for _ in 0..take {
        out.push(all.swap_remove(rng.below(all.len())));
    }
    out.sort_unstable();
    out
}

fn volumes_from_tape(tape: &Tape, enc: &EncodedSceneTape) -> Result<SceneVolumes> {
    let take = |i: usize| -> Result<SparseFeatureVolume> {
        SparseFeatureVolume::from_parts(
            enc.layouts[i].resolution,
            enc.layouts[i].origin,
            enc.channels[i],
            enc.layouts[i].indices().to_vec(),
            tape.value(enc.feats[i]).data().to_vec(),
        )
    };
    Ok(SceneVolumes { v1: take(0)?, v2: take(1)?, v3: take(2)? })
}

/// Phase B loss for one window sample: unrolls the nested refinement,
/// supervising a pixel subset at every stage on the tape while the
/// canonical full-resolution update advances stage inputs.
fn phase_b_sample(
    scenes: &[SceneData],
    draw: &SampleDraw,
    cfg: &PipelineConfig,
    store: &ParameterStore,
    nets: &ModelNets,
    rng: &mut Stream,
    mut grads: Option<&mut GradMap>,
) -> Result<f64> {
    let window = scenes[draw.scene].window(draw.window_start, cfg.train_frames_per_sample);
    let cams = draw.aug.apply_cameras(&window.cams);
    let gts = draw.aug.apply_depths(&window.gt_depths);
    let maps = window.coarse_maps();
    let gt56: Vec<DepthMap> = gts.iter().map(|g| nn_resample(g, 56, 56)).collect();
    let schedule = cfg.schedule();
    let direction = cfg.direction_mode_unchecked();
    let k = schedule.hypothesis_count();

    // initial depth from the (frozen in this phase) plane-sweep path
    let mut current = {
        let grid = cfg.hypothesis_grid();
        let mut out = Vec::with_capacity(window.n_frames());
        for n in 0..window.n_frames() {
            let vol =
                crate::costvolume::build_cost_volume(&window.viewsets[n], &cams, &maps, &grid)?;
            out.push(crate::costvolume::regularize_and_predict(&vol, store, &nets.costreg)?.depth);
        }
        out
    };

    let mut total = 0.0;
    for _lo in 1..=schedule.outer_loops {
        let cloud = form_point_cloud(
            &current,
            &cams,
            &window.viewsets,
            &maps,
            AblationMode::Full.cloud_aggregation(),
        )?;
        let mut tape = Tape::new(store);
        let enc = encode_scene_tape(&mut tape, &nets.scene, &cloud)?;
        let vols = volumes_from_tape(&tape, &enc)?;
        let mut loop_loss = None;
        for &step in &schedule.steps_m {
            // canonical update first: its validity masks the supervision
            let updated = inner_pass(
                &current,
                &vols,
                &cams,
                &window.viewsets,
                &maps,
                store,
                &nets.head,
                step,
                schedule.half_count,
                AblationMode::Full,
                direction,
            )?;
            let frames = supervised_frames(window.n_frames(), cfg.train_frames_supervised, rng);
            for &n in &frames {
                let subset = pixel_subset(&current[n], cfg.train_subset_pixels, rng);
                if subset.is_empty() {
                    continue;
                }
                let s_count = subset.len();
                let intr = cams[n].intrinsics.rescaled(56, 56);
                // per-volume gather taps plus the constant variance block
                let mut idxs: Vec<Vec<i64>> = vec![Vec::with_capacity(s_count * k * 8); 3];
                let mut ws: Vec<Vec<f64>> = vec![Vec::with_capacity(s_count * k * 8); 3];
                let mut sigma = Tensor::zeros(&[s_count * k, FEAT_CHANNELS]);
                let mut old_depth = Vec::with_capacity(s_count);
                let mut dz = Vec::with_capacity(s_count);
                let mut scratch = crate::features::VarianceScratch::default();
                for (si, &(x, y)) in subset.iter().enumerate() {
                    let d = current[n].depth[y as usize * 56 + x as usize];
                    let px = Vector2::new(x as f64, y as f64);
                    let p = back_project(&intr, &cams[n].pose, &px, d)?;
                    let t = match direction {
                        DirectionMode::PerPixelRay => viewing_ray(&intr, &cams[n].pose, &px),
                        DirectionMode::PrincipalAxis => cams[n].pose.principal_axis(),
                    };
                    old_depth.push(d);
                    dz.push(match direction {
                        DirectionMode::PerPixelRay => ray_z(&intr, &px),
                        DirectionMode::PrincipalAxis => 1.0,
                    });
                    for ki in 0..k {
                        let q = p + t * ((ki as f64 - schedule.half_count as f64) * step);
                        let mut ti = [0i64; 8];
                        let mut tw = [0f64; 8];
                        for (vi, layout) in enc.layouts.iter().enumerate() {
                            layout.trilinear_taps(&q, &mut ti, &mut tw);
                            idxs[vi].extend_from_slice(&ti);
                            ws[vi].extend_from_slice(&tw);
                        }
                        let row = si * k + ki;
                        let _ = crate::features::multiview_feature_into(
                            &q,
                            &window.viewsets[n],
                            &cams,
                            &maps,
                            crate::features::Aggregation::Variance,
                            crate::features::ViewInclusion::ExcludeOutside,
                            &mut scratch,
                            &mut sigma.data_mut()[row * FEAT_CHANNELS..(row + 1) * FEAT_CHANNELS],
                        );
                    }
                }
                let rows = s_count * k;
                let mut blocks = Vec::with_capacity(4);
                for vi in 0..3 {
                    blocks.push(tape.gather_weighted(
                        enc.feats[vi],
                        Rc::new(std::mem::take(&mut idxs[vi])),
                        Rc::new(std::mem::take(&mut ws[vi])),
                        rows,
                        8,
                    )?);
                }
                blocks.push(tape.constant(sigma));
                let cat = tape.concat_last(&blocks)?;
                let c = tape.value(cat).shape()[1];
                let h_matrix = tape.reshape(cat, &[s_count, k, c])?;
                let scores = nets.head.forward_tape(&mut tape, h_matrix)?;
                let flat = tape.reshape(scores, &[s_count, k])?;
                let probs = tape.softmax_rows(flat)?;
                let delta = tape.paired_expectation(probs, step)?;
                let depth_new = tape.axpy_const(delta, dz.clone(), old_depth.clone());
                let target: Vec<f64> = subset
                    .iter()
                    .map(|&(x, y)| gt56[n].depth[y as usize * 56 + x as usize])
                    .collect();
                let mask: Vec<bool> = subset
                    .iter()
                    .map(|&(x, y)| {
                        let i = y as usize * 56 + x as usize;
                        gt56[n].valid[i] && updated[n].valid[i]
                    })
                    .collect();
                if !mask.iter().any(|m| *m) {
                    continue;
                }
                // hypothesis bin closest to the ground-truth depth along
                // this pixel's direction (clamped to the support)
                let h = schedule.half_count as i64;
                let bins: Vec<i64> = (0..s_count)
                    .map(|si| {
                        if !mask[si] {
                            return -1;
                        }
                        let want = (target[si] - old_depth[si]) / (step * dz[si]);
                        (want.round() as i64).clamp(-h, h) + h
                    })
                    .collect();
                let l1 = tape.masked_l1_mean(depth_new, target, mask)?;
                let ce = tape.nll_mean(probs, bins)?;
                let stage_loss = tape.add(l1, ce);
                loop_loss = Some(match loop_loss {
                    None => stage_loss,
                    Some(prev) => tape.add(prev, stage_loss),
                });
            }
            current = updated;
        }
        if let Some(loss) = loop_loss {
            let v = tape.value(loss).item();
            total += v;
            if let Some(acc) = grads.as_deref_mut() {
                merge_grads(acc, tape.backward(loss)?);
            }
        }
    }
    Ok(total)
}

/// Fixed refined-depth inputs for phase C, produced once with the weights
/// trained in phases A and B.
struct SmoothSample {
    scene: usize,
    frame_in_window: usize,
    window_start: usize,
    refined: DepthMap,
}

fn phase_c_inputs(
    scenes: &[SceneData],
    cfg: &PipelineConfig,
    store: &ParameterStore,
    nets: &ModelNets,
) -> Result<Vec<SmoothSample>> {
    let mut rng = Stream::new(cfg.train_seed, "phase_c_inputs");
    let mut out = Vec::new();
    for scene in 0..scenes.len() {
        let frames = scenes[scene].n_frames();
        let len = cfg.train_frames_per_sample.min(frames);
        let window_start = rng.below(frames - len + 1);
        let window = scenes[scene].window(window_start, len);
        let pred = super::run_predict(&window, cfg, store, nets, AblationMode::Full)?;
        for (fi, refined) in pred.refine.final_depths().iter().enumerate() {
            out.push(SmoothSample {
                scene,
                frame_in_window: fi,
                window_start,
                refined: refined.clone(),
            });
        }
    }
    Ok(out)
}

fn phase_c_sample(
    scenes: &[SceneData],
    samples: &[SmoothSample],
    pick: usize,
    cfg: &PipelineConfig,
    store: &ParameterStore,
    nets: &ModelNets,
    grads: Option<&mut GradMap>,
) -> Result<f64> {
    let s = &samples[pick];
    let window = scenes[s.scene].window(s.window_start, cfg.train_frames_per_sample);
    let n = s.frame_in_window;
    let gt = &window.gt_depths[n];
    let fmaps = &window.fmaps[n];
    let image = &window.images[n];
    let mut tape = Tape::new(store);
    let mut total_var = None;
    let mut current = s.refined.clone();
    let stages: [(&crate::geometry::FeatureMap, &crate::diffkern::Conv2dNet); 3] = [
        (&fmaps.coarse, &nets.upsample.stage1),
        (&fmaps.fine, &nets.upsample.stage2),
        (image, &nets.upsample.stage3),
    ];
    for (guide, net) in stages {
        let up = nn_upsample(&current, guide.width, guide.height)?;
        let out = propagation_smooth_tape(&mut tape, &up, guide, net)?;
        let gt_s = nn_resample(gt, guide.width, guide.height);
        let out_valid = smoothed_validity(&up.valid, up.width, up.height);
        let mask: Vec<bool> = out_valid.iter().zip(&gt_s.valid).map(|(a, b)| *a && *b).collect();
        let flat = tape.reshape(out, &[guide.width * guide.height])?;
        let loss = tape.masked_l1_mean(flat, gt_s.depth.clone(), mask)?;
        total_var = Some(match total_var {
            None => loss,
            Some(prev) => tape.add(prev, loss),
        });
        // stage output (tape values) feeds the next stage as a constant
        let vals = tape.value(flat).data().to_vec();
        let mut next = DepthMap::new_invalid(guide.width, guide.height);
        for i in 0..vals.len() {
            if out_valid[i] {
                next.depth[i] = vals[i];
                next.valid[i] = true;
            }
        }
        current = next;
    }
    let loss = total_var.expect("three stages");
    let v = tape.value(loss).item();
    if let Some(acc) = grads {
        merge_grads(acc, tape.backward(loss)?);
    }
    Ok(v)
}

pub fn run_train(
    train: &[SceneData],
    val: &[SceneData],
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<(ParameterStore, TrainReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training needs train and validation scenes".into()));
    }
    for (i, s) in train.iter().chain(val.iter()).enumerate() {
        if s.gt_depths.len() != s.n_frames() {
            return Err(Error::Config(format!("scene {i} lacks ground-truth depths")));
        }
    }
    let mut store = ParameterStore::new(cfg.model_seed);
    let nets = ModelNets::register(&mut store, cfg);
    let mut report = TrainReport::default();

    let phases: [(usize, &str); 3] =
        [(cfg.train_phase_a, "a"), (cfg.train_phase_b, "b"), (cfg.train_phase_c, "c")];
    let mut smooth_inputs: Vec<SmoothSample> = Vec::new();

    for (phase_idx, (iters, tag)) in phases.iter().enumerate() {
        let mut opt = PhaseOptimizer::new(cfg.train_lr);
        if phase_idx == 2 && *iters > 0 {
            smooth_inputs = phase_c_inputs(train, cfg, &store, &nets)?;
        }
        for iter in 0..*iters {
            let mut grads = GradMap::new();
            let mut loss_sum = 0.0;
            for slot in 0..cfg.train_batch {
                let mut rng = Stream::new(cfg.train_seed, &format!("p{tag}/iter{iter}/slot{slot}"));
                let loss = match phase_idx {
                    0 => {
                        let draw = draw_sample(train, cfg, &mut rng, true);
                        phase_a_sample(train, &draw, cfg, &store, &nets, &mut rng, Some(&mut grads))?
                    }
                    1 => {
                        let draw = draw_sample(train, cfg, &mut rng, true);
                        phase_b_sample(train, &draw, cfg, &store, &nets, &mut rng, Some(&mut grads))?
                    }
                    _ => {
                        let pick = rng.below(smooth_inputs.len());
                        phase_c_sample(train, &smooth_inputs, pick, cfg, &store, &nets, Some(&mut grads))?
                    }
                };
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        batch: iter,
                        detail: format!("phase {tag} slot {slot}"),
                    });
                }
                loss_sum += loss;
            }
            scale_grads(&mut grads, 1.0 / cfg.train_batch as f64);
            adam_step(&mut store, &mut opt.adam, &grads, AdamParams::with_lr(opt.lr))?;
            let train_loss = loss_sum / cfg.train_batch as f64;
            report.phase_losses[phase_idx].push(train_loss);

            let epoch_end = (iter + 1) % cfg.train_epoch_iters == 0 || iter + 1 == *iters;
            if epoch_end {
                let epoch = iter / cfg.train_epoch_iters;
                let mut val_loss = 0.0;
                for vi in 0..val.len() {
                    let mut rng = Stream::new(cfg.train_seed, &format!("p{tag}/val{vi}"));
                    val_loss += match phase_idx {
                        0 => {
                            let draw = draw_sample(&val[vi..=vi], cfg, &mut rng, false);
                            phase_a_sample(&val[vi..=vi], &draw, cfg, &store, &nets, &mut rng, None)?
                        }
                        1 => {
                            let draw = draw_sample(&val[vi..=vi], cfg, &mut rng, false);
                            phase_b_sample(&val[vi..=vi], &draw, cfg, &store, &nets, &mut rng, None)?
                        }
                        _ => {
                            let pick = rng.below(smooth_inputs.len());
                            phase_c_sample(train, &smooth_inputs, pick, cfg, &store, &nets, None)?
                        }
                    };
                }
                val_loss /= val.len() as f64;
                opt.observe_val(val_loss, cfg);
                report.log.push(format!(
                    "{{\"phase\":\"{tag}\",\"iter\":{},\"train_loss\":{train_loss:.6},\"val_loss\":{val_loss:.6},\"lr\":{:.6e}}}",
                    iter + 1,
                    opt.lr
                ));
                if let Some(dir) = out_dir {
                    save_weights(&store, &dir.join(format!("checkpoint_{tag}_{epoch:03}.3dvw")))?;
                }
            }
        }
    }
    Ok((store, report))
}

/// Exponential moving average used by the smoke benchmarks.
pub fn smoothed(losses: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut ema = match losses.first() {
        Some(v) => *v,
        None => return out,
    };
    for &l in losses {
        ema = alpha * ema + (1.0 - alpha) * l;
        out.push(ema);
    }
    out
}
