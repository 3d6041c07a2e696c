//! Refinement-iteration study and the ablation runs.

use super::config::PipelineConfig;
use super::{predict_coarse, upsample_frames, ModelNets, SceneData};
use crate::diffkern::ParameterStore;
use crate::error::Result;
use crate::evalmetrics::{
    aggregate_depth_reports, aggregate_point_reports, depth_metrics, point_metrics,
    DepthMetricsReport, PointMetricsReport,
};
use crate::fusion::fuse;
use crate::geometry::DepthMap;
use crate::pointflow::{refine_all, AblationMode};
use crate::upsample::nn_resample;
use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct IterStudyRow {
    pub outer: usize,
    pub inner: usize,
    pub depth: DepthMetricsReport,
    pub points: PointMetricsReport,
}

impl IterStudyRow {
    pub fn json(&self) -> String {
        format!(
            "{{\"kind\":\"iter_study\",\"outer\":{},\"inner\":{},\"abs_rel\":{:.6},\"abs_diff\":{:.6},\"delta_125\":{:.6},\"fscore\":{:.6}}}",
            self.outer, self.inner, self.depth.abs_rel, self.depth.abs_diff, self.depth.delta_125, self.points.fscore
        )
    }
}

fn depth_vs_gt_at(pred: &[DepthMap], gts: &[DepthMap], min_gt: f64) -> Result<DepthMetricsReport> {
    let mut reports = Vec::new();
    for (p, g) in pred.iter().zip(gts) {
        let gt_s = nn_resample(g, p.width, p.height);
        reports.push(depth_metrics(p, &gt_s, min_gt)?);
    }
    Ok(aggregate_depth_reports(&reports))
}

/// One row of metrics per refinement stage: (0,0) plus every
/// (outer, inner) of the schedule. Depth metrics are per-scene averages at
/// the coarse prediction resolution; the F-score fuses the upsampled maps
/// of that stage against the per-scene reference clouds.
pub fn run_iter_study(
    scenes: &[SceneData],
    gt_clouds: &[Vec<Vector3<f64>>],
    cfg: &PipelineConfig,
    store: &ParameterStore,
    nets: &ModelNets,
) -> Result<Vec<IterStudyRow>> {
    assert_eq!(scenes.len(), gt_clouds.len());
    let schedule = cfg.schedule();
    // stage list mirrors the snapshot order of the nested loop
    let mut stages = vec![(0usize, 0usize)];
    for lo in 1..=schedule.outer_loops {
        for li in 1..=schedule.steps_m.len() {
            stages.push((lo, li));
        }
    }
    let mut per_stage_depth: Vec<Vec<DepthMetricsReport>> = vec![Vec::new(); stages.len()];
    let mut per_stage_points: Vec<Vec<PointMetricsReport>> = vec![Vec::new(); stages.len()];
    for (scene, gt_cloud) in scenes.iter().zip(gt_clouds) {
        let coarse = predict_coarse(scene, cfg, store, nets)?;
        let maps = scene.coarse_maps();
        let refined = refine_all(
            &coarse,
            &scene.cams,
            &scene.viewsets,
            &maps,
            &schedule,
            store,
            &nets.scene,
            &nets.head,
            AblationMode::Full,
            cfg.direction_mode()?,
        )?;
        for (si, &(lo, li)) in stages.iter().enumerate() {
            let stage_maps = refined.stage(lo, li).expect("snapshot for every stage");
            // depth metrics at the coarse resolution
            let mut reports = Vec::new();
            for (p, g) in stage_maps.iter().zip(&scene.gt_depths) {
                let gt_s = nn_resample(g, p.width, p.height);
                reports.push(depth_metrics(p, &gt_s, cfg.eval_min_gt)?);
            }
            per_stage_depth[si].push(aggregate_depth_reports(&reports));
            // 3D metrics from the fused upsampled maps
            let full = upsample_frames(scene, stage_maps, store, nets)?;
            let cloud = fuse(&full, &scene.cams, &cfg.fusion_params())?;
            let pm = if cloud.is_empty() {
                PointMetricsReport { tau: cfg.eval_tau, ..Default::default() }
            } else {
                point_metrics(&cloud.positions, gt_cloud, cfg.eval_tau)?
            };
            per_stage_points[si].push(pm);
        }
    }
    Ok(stages
        .iter()
        .enumerate()
        .map(|(si, &(lo, li))| IterStudyRow {
            outer: lo,
            inner: li,
            depth: aggregate_depth_reports(&per_stage_depth[si]),
            points: aggregate_point_reports(&per_stage_points[si]),
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub depth: DepthMetricsReport,
    pub points: PointMetricsReport,
}

impl AblationReport {
    pub fn json(&self) -> String {
        format!(
            "{{\"kind\":\"ablation\",\"mode\":\"{:?}\",\"abs_rel\":{:.6},\"abs_diff\":{:.6},\"delta_125\":{:.6},\"fscore\":{:.6}}}",
            self.mode, self.depth.abs_rel, self.depth.abs_diff, self.depth.delta_125, self.points.fscore
        )
    }
}

/// Full pipeline in one ablation mode, evaluated on every scene.
pub fn run_ablation(
    scenes: &[SceneData],
    gt_clouds: &[Vec<Vector3<f64>>],
    cfg: &PipelineConfig,
    store: &ParameterStore,
    nets: &ModelNets,
    mode: AblationMode,
) -> Result<AblationReport> {
    assert_eq!(scenes.len(), gt_clouds.len());
    let mut depth_reports = Vec::new();
    let mut point_reports = Vec::new();
    for (scene, gt_cloud) in scenes.iter().zip(gt_clouds) {
        let pred = super::run_predict(scene, cfg, store, nets, mode)?;
        depth_reports.push(depth_vs_gt_at(&pred.final_depths, &scene.gt_depths, cfg.eval_min_gt)?);
        let cloud = fuse(&pred.final_depths, &scene.cams, &cfg.fusion_params())?;
        let pm = if cloud.is_empty() {
            PointMetricsReport { tau: cfg.eval_tau, ..Default::default() }
        } else {
            point_metrics(&cloud.positions, gt_cloud, cfg.eval_tau)?
        };
        point_reports.push(pm);
    }
    Ok(AblationReport {
        mode,
        depth: aggregate_depth_reports(&depth_reports),
        points: aggregate_point_reports(&point_reports),
    })
}
