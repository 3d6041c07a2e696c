//! Iterative depth refinement against the volumetric scene encoding.
//!
//! Each valid depth pixel is lifted to a world point, 2h+1 hypothesis
//! points are placed along its refinement direction, and every hypothesis
//! is scored from the concatenation of trilinearly interpolated scene
//! features (all three scales) and its own multi-view variance feature. A
//! small 1D conv head turns scores into probabilities; the expected
//! displacement moves the depth. The whole procedure runs in a nested loop:
//! the scene encoding is rebuilt from current depths in the outer loop and
//! consumed immutably by the inner refinement passes.

use crate::diffkern::{softmax_rows_pure, Conv1dNet, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::features::{
    multiview_feature_into, Aggregation, ViewIndexSet, ViewInclusion, FEAT_CHANNELS,
};
use crate::geometry::{back_project, ray_z, viewing_ray, Camera, DepthMap, FeatureMap, MIN_DEPTH};
use crate::parallel::par_fill_rows;
use crate::scenemodel::{encode_scene, form_point_cloud, SceneNets, SceneVolumes};
use nalgebra::{Vector2, Vector3};

/// 2h+1 sample points along a refinement direction, centered on the anchor.
#[derive(Debug, Clone)]
pub struct HypothesisSet {
    pub anchor: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub step: f64,
    pub half_count: usize,
    pub points: Vec<Vector3<f64>>,
}

pub fn build_hypotheses(
    anchor: Vector3<f64>,
    direction: Vector3<f64>,
    step: f64,
    half_count: usize,
) -> Result<HypothesisSet> {
    let norm = direction.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::BadDirection(norm));
    }
    if step <= 0.0 {
        return Err(Error::Config(format!("hypothesis step must be positive, got {step}")));
    }
    let h = half_count as isize;
    let points = (-h..=h)
        .map(|k| anchor + direction * (k as f64 * step))
        .collect();
    Ok(HypothesisSet { anchor, direction, step, half_count, points })
}

/// Refinement direction choice; the per-pixel viewing ray is the default,
/// the camera principal axis is kept as a variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DirectionMode {
    #[default]
    PerPixelRay,
    PrincipalAxis,
}

/// Which feature blocks feed the offset head. Disabled blocks are zeroed,
/// so one trained head serves every mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AblationMode {
    #[default]
    Full,
    /// no volumetric features, variance only
    No3d,
    /// only the finest volume
    SingleScale,
    /// point-cloud features aggregated by mean instead of variance
    AvgFeats,
}

impl AblationMode {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(AblationMode::Full),
            "no3d" => Ok(AblationMode::No3d),
            "single_scale" => Ok(AblationMode::SingleScale),
            "avg_feats" => Ok(AblationMode::AvgFeats),
            other => Err(Error::Config(format!("unknown ablation mode `{other}`"))),
        }
    }

    pub fn cloud_aggregation(&self) -> Aggregation {
        match self {
            AblationMode::AvgFeats => Aggregation::Mean,
            _ => Aggregation::Variance,
        }
    }

    fn keep_block(&self, block: usize) -> bool {
        match self {
            AblationMode::Full | AblationMode::AvgFeats => true,
            AblationMode::No3d => block == 3,
            AblationMode::SingleScale => block >= 2,
        }
    }
}

/// Nested-loop schedule: inner displacement steps per outer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementSchedule {
    pub outer_loops: usize,
    pub steps_m: Vec<f64>,
    pub half_count: usize,
}

impl Default for RefinementSchedule {
    fn default() -> Self {
        RefinementSchedule { outer_loops: 2, steps_m: vec![0.05, 0.05, 0.025], half_count: 3 }
    }
}

impl RefinementSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps_m.is_empty() || self.steps_m.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("refinement steps must be positive".into()));
        }
        Ok(())
    }

    pub fn hypothesis_count(&self) -> usize {
        2 * self.half_count + 1
    }
}

/// Fill one hypothesis-feature row block layout `[f1 | f2 | f3 | variance]`.
/// Returns the total channel count for the given volume widths.
pub fn hypothesis_channels(vols: &SceneVolumes) -> usize {
    vols.v1.channels + vols.v2.channels + vols.v3.channels + FEAT_CHANNELS
}

/// Reference single-set feature builder (row per hypothesis point) used by
/// tests and the batched pass alike.
#[allow(clippy::too_many_arguments)]
pub fn hypothesis_features(
    hs: &HypothesisSet,
    vols: &SceneVolumes,
    views: &ViewIndexSet,
    cams: &[Camera],
    coarse_maps: &[&FeatureMap],
    mode: AblationMode,
) -> Result<Tensor> {
    let c = hypothesis_channels(vols);
    let k = hs.points.len();
    let mut out = Tensor::zeros(&[k, c]);
    let mut scratch = crate::features::VarianceScratch::default();
    for (ki, q) in hs.points.iter().enumerate() {
        let row = &mut out.data_mut()[ki * c..(ki + 1) * c];
        fill_hypothesis_row(q, vols, views, cams, coarse_maps, mode, &mut scratch, row);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn fill_hypothesis_row(
    q: &Vector3<f64>,
    vols: &SceneVolumes,
    views: &ViewIndexSet,
    cams: &[Camera],
    coarse_maps: &[&FeatureMap],
    mode: AblationMode,
    scratch: &mut crate::features::VarianceScratch,
    row: &mut [f64],
) {
    let mut off = 0;
    for (block, vol) in vols.by_scale().iter().enumerate() {
        if mode.keep_block(block) {
            crate::scenemodel::sparse_interp_into(vol, q, &mut row[off..off + vol.channels]);
        }
        off += vol.channels;
    }
    // variance recomputed at the hypothesis point itself; views that fail
    // projection drop out, and a hypothesis no view sees reads zeros
    let _ = multiview_feature_into(
        q,
        views,
        cams,
        coarse_maps,
        Aggregation::Variance,
        ViewInclusion::ExcludeOutside,
        scratch,
        &mut row[off..off + FEAT_CHANNELS],
    );
}

/// Expected displacement from hypothesis scores: probabilities via softmax,
/// then the symmetric-paired expectation of `k * step`, which is exactly
/// zero for uniform scores and bounded by `h * step`.
pub fn predict_offset(
    scores: &[f64],
    step: f64,
    half_count: usize,
    prob_out: &mut [f64],
) -> f64 {
    let k = 2 * half_count + 1;
    debug_assert_eq!(scores.len(), k);
    softmax_rows_pure(scores, 1, k, prob_out);
    let mut acc = 0.0;
    for j in 1..=half_count {
        acc += (j as f64) * step * (prob_out[half_count + j] - prob_out[half_count - j]);
    }
    debug_assert!(acc.abs() <= half_count as f64 * step + 1e-12);
    acc
}

/// Offset head applied to one hypothesis matrix: returns the displacement.
pub fn predict_offset_with_head(
    h_matrix: &Tensor,
    store: &ParameterStore,
    head: &Conv1dNet,
    step: f64,
    half_count: usize,
) -> Result<f64> {
    let k = 2 * half_count + 1;
    let c = h_matrix.shape()[1];
    if head.widths[0] != c {
        return Err(Error::ShapeMismatch(format!(
            "offset head expects {} channels, hypothesis matrix has {c}",
            head.widths[0]
        )));
    }
    let x = h_matrix.reshaped(&[1, k, c])?;
    let scores = head.forward(store, &x)?;
    let mut prob = vec![0.0; k];
    Ok(predict_offset(scores.data(), step, half_count, &mut prob))
}

/// Depth update along the refinement direction: the new depth is the
/// camera-frame z of `p + delta * t`. For the per-pixel ray this is
/// `z + delta * ray_z`; for the principal axis `z + delta`. A zero delta
/// leaves the stored value bit-identical.
pub fn apply_offset(depth: f64, delta: f64, direction_z: f64) -> f64 {
    depth + delta * direction_z
}

/// Result of the nested refinement: per-stage snapshots (including the
/// input as stage (0,0)) and the content hashes of each outer loop's scene
/// encoding.
#[derive(Debug)]
pub struct RefineOutput {
    pub snapshots: Vec<(usize, usize, Vec<DepthMap>)>,
    pub volume_hashes: Vec<u64>,
}

impl RefineOutput {
    pub fn final_depths(&self) -> &[DepthMap] {
        &self.snapshots.last().expect("at least the input snapshot").2
    }

    pub fn stage(&self, lo: usize, li: usize) -> Option<&[DepthMap]> {
        self.snapshots
            .iter()
            .find(|(o, i, _)| *o == lo && *i == li)
            .map(|(_, _, d)| d.as_slice())
    }
}

/// One inner PointFlow pass over every frame against an immutable encoding.
#[allow(clippy::too_many_arguments)]
pub fn inner_pass(
    depths: &[DepthMap],
    vols: &SceneVolumes,
    cams: &[Camera],
    viewsets: &[ViewIndexSet],
    coarse_maps: &[&FeatureMap],
    store: &ParameterStore,
    head: &Conv1dNet,
    step: f64,
    half_count: usize,
    mode: AblationMode,
    direction: DirectionMode,
) -> Result<Vec<DepthMap>> {
    let k = 2 * half_count + 1;
    let c = hypothesis_channels(vols);
    if head.widths[0] != c {
        return Err(Error::ShapeMismatch(format!(
            "offset head expects {} channels, scene provides {c}",
            head.widths[0]
        )));
    }
    let mut out = Vec::with_capacity(depths.len());
    for (n, dm) in depths.iter().enumerate() {
        let pixels: Vec<(u32, u32)> = (0..dm.height as u32)
            .flat_map(|y| (0..dm.width as u32).map(move |x| (x, y)))
            .filter(|&(x, y)| dm.valid[y as usize * dm.width + x as usize])
            .collect();
        let p_count = pixels.len();
        if p_count == 0 {
            out.push(dm.clone());
            continue;
        }
        let intr = cams[n].intrinsics.rescaled(dm.width, dm.height);
        let pose = cams[n].pose;
        // assemble the hypothesis feature matrix for all pixels
        let mut h_matrix = Tensor::zeros(&[p_count, k, c]);
        {
            let depth_ref = dm;
            let pixels_ref = &pixels;
            par_fill_rows(h_matrix.data_mut(), p_count, k * c, 64, |row, rowbuf| {
                let (x, y) = pixels_ref[row];
                let d = depth_ref.depth[y as usize * depth_ref.width + x as usize];
                let px = Vector2::new(x as f64, y as f64);
                let p = back_project(&intr, &pose, &px, d).expect("valid depth is positive");
                let t = match direction {
                    DirectionMode::PerPixelRay => viewing_ray(&intr, &pose, &px),
                    DirectionMode::PrincipalAxis => pose.principal_axis(),
                };
                let mut scratch = crate::features::VarianceScratch::default();
                for ki in 0..k {
                    let q = p + t * ((ki as f64 - half_count as f64) * step);
                    fill_hypothesis_row(
                        &q,
                        vols,
                        &viewsets[n],
                        cams,
                        coarse_maps,
                        mode,
                        &mut scratch,
                        &mut rowbuf[ki * c..(ki + 1) * c],
                    );
                }
            });
        }
        let scores = head.forward(store, &h_matrix)?; // [P, K, 1]
        drop(h_matrix);
        let mut new_map = dm.clone();
        let mut prob = vec![0.0; k];
        let bound = half_count as f64 * step + 1e-12;
        for (row, &(x, y)) in pixels.iter().enumerate() {
            let delta =
                predict_offset(&scores.data()[row * k..(row + 1) * k], step, half_count, &mut prob);
            if delta.abs() > bound {
                return Err(Error::NumericFailure {
                    stage: "inner_pass".into(),
                    detail: format!("|delta| {} exceeds bound {}", delta.abs(), bound),
                });
            }
            let px = Vector2::new(x as f64, y as f64);
            let dz = match direction {
                DirectionMode::PerPixelRay => ray_z(&intr, &px),
                DirectionMode::PrincipalAxis => 1.0,
            };
            let i = y as usize * dm.width + x as usize;
            let z_new = apply_offset(dm.depth[i], delta, dz);
            if z_new <= MIN_DEPTH {
                new_map.invalidate(x as usize, y as usize);
            } else {
                new_map.depth[i] = z_new;
            }
        }
        new_map.assert_finite("inner_pass")?;
        out.push(new_map);
    }
    Ok(out)
}

/// The full nested refinement. The scene is re-encoded from current depths
/// at every outer loop; all inner passes of that loop consume the same
/// immutable volumes (checked by content hash).
#[allow(clippy::too_many_arguments)]
pub fn refine_all(
    depths: &[DepthMap],
    cams: &[Camera],
    viewsets: &[ViewIndexSet],
    coarse_maps: &[&FeatureMap],
    schedule: &RefinementSchedule,
    store: &ParameterStore,
    scene_nets: &SceneNets,
    head: &Conv1dNet,
    mode: AblationMode,
    direction: DirectionMode,
) -> Result<RefineOutput> {
    schedule.validate()?;
    let mut current = depths.to_vec();
    let mut snapshots = vec![(0usize, 0usize, current.clone())];
    let mut volume_hashes = Vec::new();
    for lo in 1..=schedule.outer_loops {
        let cloud =
            form_point_cloud(&current, cams, viewsets, coarse_maps, mode.cloud_aggregation())?;
        let vols = encode_scene(store, scene_nets, &cloud)?;
        let hash_before = vols.content_hash();
        volume_hashes.push(hash_before);
        for (li, &step) in schedule.steps_m.iter().enumerate() {
            current = inner_pass(
                &current,
                &vols,
                cams,
                viewsets,
                coarse_maps,
                store,
                head,
                step,
                schedule.half_count,
                mode,
                direction,
            )?;
            snapshots.push((lo, li + 1, current.clone()));
        }
        debug_assert_eq!(vols.content_hash(), hash_before, "encoding mutated inside an outer loop");
    }
    Ok(RefineOutput { snapshots, volume_hashes })
}
