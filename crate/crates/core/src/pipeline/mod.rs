//! End-to-end orchestration: configuration, the model bundle, the predict
//! path, the multi-stage training loss, geometric augmentation, the desk
//! trainer, and the iteration/ablation studies.

mod config;
mod studies;
mod train;

pub use config::PipelineConfig;
pub use studies::{run_ablation, run_iter_study, AblationReport, IterStudyRow};
pub use train::{run_train, smoothed, TrainReport};

use crate::costvolume::{build_cost_volume, regularize_and_predict};
use crate::diffkern::{Conv1dNet, ParameterStore};
use crate::error::{Error, Result};
use crate::features::{
    extract_features, select_source_views, FeatureMapPair, Image, ViewIndexSet, FEAT_CHANNELS,
};
use crate::geometry::{Camera, DepthMap, FeatureMap, Pose};
use crate::pointflow::{refine_all, AblationMode, RefineOutput};
use crate::scenemodel::SceneNets;
use crate::synthdata::LoadedScene;
use crate::upsample::{coarse_to_fine, nn_resample, UpsampleNets};
use nalgebra::{Matrix3, Vector3};
use std::path::Path;

/// Every learned block of the pipeline, registered on one parameter store.
#[derive(Debug, Clone)]
pub struct ModelNets {
    pub costreg: Conv1dNet,
    pub scene: SceneNets,
    pub head: Conv1dNet,
    pub upsample: UpsampleNets,
}

impl ModelNets {
    pub fn register(store: &mut ParameterStore, cfg: &PipelineConfig) -> Self {
        let scene = SceneNets::register(store, cfg.unet_widths());
        let head_in = scene.widths.hypothesis_channels() + FEAT_CHANNELS;
        let mut head_widths = vec![head_in];
        head_widths.extend_from_slice(&cfg.model_head);
        head_widths.push(1);
        let head = Conv1dNet::register(store, "head", &head_widths);
        let mut reg_widths = vec![FEAT_CHANNELS];
        reg_widths.extend_from_slice(&cfg.model_costreg);
        reg_widths.push(1);
        let costreg = Conv1dNet::register(store, "costreg", &reg_widths);
        let upsample = UpsampleNets::register(store, &cfg.model_smooth);
        ModelNets { costreg, scene, head, upsample }
    }

    /// Rebuild the net wiring against an existing store (e.g. loaded
    /// weights), verifying that every expected parameter is present with a
    /// compatible shape.
    pub fn attach(store: &ParameterStore, cfg: &PipelineConfig) -> Result<Self> {
        let mut probe = ParameterStore::new(store.seed());
        let nets = ModelNets::register(&mut probe, cfg);
        for (path, t) in probe.iter() {
            match store.get(path) {
                None => {
                    return Err(Error::Config(format!(
                        "weights missing parameter `{path}` (incompatible model config?)"
                    )))
                }
                Some(s) if s.shape() != t.shape() => {
                    return Err(Error::Config(format!(
                        "weights parameter `{path}` has shape {:?}, config wants {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(nets)
    }
}

/// A scene prepared for the pipeline: cameras, images, optional ground
/// truth, extracted features, and per-frame view index sets.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub cams: Vec<Camera>,
    pub images: Vec<Image>,
    pub gt_depths: Vec<DepthMap>,
    pub fmaps: Vec<FeatureMapPair>,
    pub viewsets: Vec<ViewIndexSet>,
}

impl SceneData {
    pub fn n_frames(&self) -> usize {
        self.cams.len()
    }

    pub fn coarse_maps(&self) -> Vec<&FeatureMap> {
        self.fmaps.iter().map(|f| &f.coarse).collect()
    }

    /// Restrict to a contiguous frame window (view sets are rebuilt inside
    /// the window).
    pub fn window(&self, start: usize, len: usize) -> SceneData {
        let end = (start + len).min(self.n_frames());
        let kf: Vec<usize> = (0..end - start).collect();
        SceneData {
            cams: self.cams[start..end].to_vec(),
            images: self.images[start..end].to_vec(),
            gt_depths: if self.gt_depths.is_empty() {
                Vec::new()
            } else {
                self.gt_depths[start..end].to_vec()
            },
            fmaps: self.fmaps[start..end].to_vec(),
            viewsets: (0..end - start).map(|n| select_source_views(&kf, n, 4)).collect(),
        }
    }
}

/// Extract features and build view sets for a loaded scene; every frame is
/// a keyframe.
pub fn prepare_scene(loaded: LoadedScene, cfg: &PipelineConfig) -> Result<SceneData> {
    let extractor = cfg.extractor()?;
    let n = loaded.cameras.len();
    let fmaps: Result<Vec<FeatureMapPair>> =
        loaded.images.iter().map(|img| extract_features(img, &extractor)).collect();
    let kf: Vec<usize> = (0..n).collect();
    let viewsets = (0..n).map(|i| select_source_views(&kf, i, 4)).collect();
    Ok(SceneData {
        cams: loaded.cameras,
        images: loaded.images,
        gt_depths: loaded.gt_depths,
        fmaps: fmaps?,
        viewsets,
    })
}

pub fn load_scene_dir(dir: &Path, cfg: &PipelineConfig) -> Result<SceneData> {
    prepare_scene(crate::synthdata::read_scene_dir(dir)?, cfg)
}

/// Everything the predict path produces.
pub struct PredictOutput {
    pub coarse: Vec<DepthMap>,
    pub refine: RefineOutput,
    pub final_depths: Vec<DepthMap>,
}

/// Initial plane-sweep depth for every frame.
pub fn predict_coarse(
    scene: &SceneData,
    cfg: &PipelineConfig,
    store: &ParameterStore,
    nets: &ModelNets,
) -> Result<Vec<DepthMap>> {
    let grid = cfg.hypothesis_grid();
    let maps = scene.coarse_maps();
    let mut out = Vec::with_capacity(scene.n_frames());
    for n in 0..scene.n_frames() {
        let vol = build_cost_volume(&scene.viewsets[n], &scene.cams, &maps, &grid)?;
        let pred = regularize_and_predict(&vol, store, &nets.costreg)?;
        out.push(pred.depth);
    }
    Ok(out)
}

/// Full predict: plane sweep, nested refinement, coarse-to-fine upsample.
pub fn run_predict(
    scene: &SceneData,
    cfg: &PipelineConfig,
    store: &ParameterStore,
    nets: &ModelNets,
    mode: AblationMode,
) -> Result<PredictOutput> {
    let coarse = predict_coarse(scene, cfg, store, nets)?;
    let maps = scene.coarse_maps();
    let refine = refine_all(
        &coarse,
        &scene.cams,
        &scene.viewsets,
        &maps,
        &cfg.schedule(),
        store,
        &nets.scene,
        &nets.head,
        mode,
        cfg.direction_mode()?,
    )?;
    let final_depths = upsample_frames(scene, refine.final_depths(), store, nets)?;
    Ok(PredictOutput { coarse, refine, final_depths })
}

/// Upsample a set of refined frame depths to image resolution.
pub fn upsample_frames(
    scene: &SceneData,
    refined: &[DepthMap],
    store: &ParameterStore,
    nets: &ModelNets,
) -> Result<Vec<DepthMap>> {
    refined
        .iter()
        .enumerate()
        .map(|(n, d)| coarse_to_fine(d, &scene.fmaps[n], &scene.images[n], store, &nets.upsample))
        .collect()
}

/// Sum over stages of the mean absolute depth error against nearest-
/// neighbor downsampled ground truth.
pub fn multi_stage_l1_loss(stages: &[&DepthMap], gt_full: &DepthMap) -> Result<f64> {
    if stages.is_empty() {
        return Err(Error::Config("loss needs at least one stage".into()));
    }
    let mut total = 0.0;
    for pred in stages {
        let gt = nn_resample(gt_full, pred.width, pred.height);
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..pred.depth.len() {
            if pred.valid[i] && gt.valid[i] {
                acc += (pred.depth[i] - gt.depth[i]).abs();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::NoValidPixels);
        }
        total += acc / count as f64;
    }
    Ok(total)
}

/// Random geometric augmentation: a global scale in [0.9, 1.1] applied to
/// positions, translations and depths jointly, and a rotation about the
/// world up axis (+y). Images are untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub scale: f64,
    pub yaw: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation { scale: 1.0, yaw: 0.0 }
    }

    pub fn sample(rng: &mut crate::rng::Stream) -> Self {
        Augmentation { scale: rng.uniform(0.9, 1.1), yaw: rng.uniform(0.0, std::f64::consts::TAU) }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        let r = self.rotation();
        Pose { rotation: r * pose.rotation, translation: r * pose.translation * self.scale }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p * self.scale
    }

    pub fn apply_cameras(&self, cams: &[Camera]) -> Vec<Camera> {
        cams.iter()
            .map(|c| Camera { intrinsics: c.intrinsics, pose: self.apply_pose(&c.pose) })
            .collect()
    }

    pub fn apply_depths(&self, depths: &[DepthMap]) -> Vec<DepthMap> {
        depths
            .iter()
            .map(|d| {
                let mut out = d.clone();
                for v in out.depth.iter_mut() {
                    *v *= self.scale;
                }
                out
            })
            .collect()
    }
}
