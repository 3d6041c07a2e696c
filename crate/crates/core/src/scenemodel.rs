//! Volumetric scene encoding from a feature-augmented point cloud.
//!
//! Depth pixels from all frames are back-projected into a joint cloud, each
//! point carrying its multi-view matching feature. The cloud is voxelized
//! at 8 cm with a per-voxel PointNet (offset-to-center plus feature through
//! an MLP, channel-wise max pool), and a sparse 3D U-Net produces feature
//! volumes at 32, 16 and 8 cm that later stages read by trilinear
//! interpolation with zero fill outside occupancy.

use crate::diffkern::{group_count, MlpNet, ParameterStore, SparseConvPlan, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{multiview_feature_into, Aggregation, ViewIndexSet, ViewInclusion, FEAT_CHANNELS};
use crate::geometry::{back_project, Camera, DepthMap, FeatureMap};
use crate::parallel::par_chunk_map;
use nalgebra::{Vector2, Vector3};
use std::collections::HashMap;
use std::rc::Rc;

/// Voxel edge of the finest volume (meters).
pub const VOXEL_EDGE: f64 = 0.08;

/// Back-projected depth pixel with its matching feature and provenance.
#[derive(Debug, Clone)]
pub struct FeaturePoint {
    pub position: Vector3<f64>,
    pub feature: Vec<f64>,
    pub frame: usize,
    pub pixel: (usize, usize),
}

/// Occupied-cell index structure of one sparse grid level.
#[derive(Debug, Clone)]
pub struct VoxelGridLayout {
    pub resolution: f64,
    pub origin: Vector3<f64>,
    indices: Vec<[i32; 3]>,
    lookup: HashMap<[i32; 3], u32>,
}

impl VoxelGridLayout {
    fn from_sorted_indices(resolution: f64, origin: Vector3<f64>, indices: Vec<[i32; 3]>) -> Self {
        let lookup = indices.iter().enumerate().map(|(i, idx)| (*idx, i as u32)).collect();
        VoxelGridLayout { resolution, origin, indices, lookup }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[[i32; 3]] {
        &self.indices
    }

    pub fn row_of(&self, idx: &[i32; 3]) -> Option<usize> {
        self.lookup.get(idx).map(|v| *v as usize)
    }

    pub fn cell_center(&self, row: usize) -> Vector3<f64> {
        let idx = self.indices[row];
        Vector3::new(
            self.origin.x + (idx[0] as f64 + 0.5) * self.resolution,
            self.origin.y + (idx[1] as f64 + 0.5) * self.resolution,
            self.origin.z + (idx[2] as f64 + 0.5) * self.resolution,
        )
    }

    /// Eight trilinear taps around a world point: dense rows (or -1 when the
    /// corner cell is absent) and blend weights. Near-integer lattice
    /// positions are snapped so stored cell centers read back exactly.
    pub fn trilinear_taps(&self, q: &Vector3<f64>, idx_out: &mut [i64; 8], w_out: &mut [f64; 8]) {
        let mut base = [0i32; 3];
        let mut frac = [0.0f64; 3];
        for c in 0..3 {
            let rel = (q[c] - self.origin[c]) / self.resolution - 0.5;
            let mut b = rel.floor();
            let mut f = rel - b;
            if f < 1e-9 {
                f = 0.0;
            } else if f > 1.0 - 1e-9 {
                b += 1.0;
                f = 0.0;
            }
            base[c] = b as i32;
            frac[c] = f;
        }
        let mut k = 0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = [base[0] + dx, base[1] + dy, base[2] + dz];
                    let w = (if dx == 0 { 1.0 - frac[0] } else { frac[0] })
                        * (if dy == 0 { 1.0 - frac[1] } else { frac[1] })
                        * (if dz == 0 { 1.0 - frac[2] } else { frac[2] });
                    idx_out[k] = self.row_of(&idx).map(|r| r as i64).unwrap_or(-1);
                    w_out[k] = w;
                    k += 1;
                }
            }
        }
    }
}

/// Hash-indexed sparse voxel grid of per-cell features.
#[derive(Debug, Clone)]
pub struct SparseFeatureVolume {
    pub layout: VoxelGridLayout,
    pub channels: usize,
    features: Vec<f64>,
}

impl SparseFeatureVolume {
    pub fn from_parts(
        resolution: f64,
        origin: Vector3<f64>,
        channels: usize,
        indices: Vec<[i32; 3]>,
        features: Vec<f64>,
    ) -> Result<Self> {
        if features.len() != indices.len() * channels {
            return Err(Error::ShapeMismatch(format!(
                "volume features {} != {} cells x {} channels",
                features.len(),
                indices.len(),
                channels
            )));
        }
        Ok(SparseFeatureVolume {
            layout: VoxelGridLayout::from_sorted_indices(resolution, origin, indices),
            channels,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn indices(&self) -> &[[i32; 3]] {
        self.layout.indices()
    }

    pub fn feature_row(&self, row: usize) -> &[f64] {
        &self.features[row * self.channels..(row + 1) * self.channels]
    }

    pub fn feature_of(&self, idx: &[i32; 3]) -> Option<&[f64]> {
        self.layout.row_of(idx).map(|r| self.feature_row(r))
    }

    /// Content hash for immutability assertions.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        mix(self.layout.len() as u64);
        for idx in self.layout.indices() {
            for &c in idx {
                mix(c as u32 as u64);
            }
        }
        for &f in &self.features {
            mix(f.to_bits());
        }
        h
    }

    pub fn resolution(&self) -> f64 {
        self.layout.resolution
    }
}

// accessors used by the volume dump format
impl SparseFeatureVolume {
    pub fn origin_vec(&self) -> Vector3<f64> {
        self.layout.origin
    }
}

/// Trilinear interpolation with zero fill where cells are absent.
pub fn sparse_interp_into(v: &SparseFeatureVolume, q: &Vector3<f64>, out: &mut [f64]) {
    debug_assert_eq!(out.len(), v.channels);
    let mut idx = [0i64; 8];
    let mut w = [0.0f64; 8];
    v.layout.trilinear_taps(q, &mut idx, &mut w);
    out.fill(0.0);
    for k in 0..8 {
        if idx[k] >= 0 && w[k] != 0.0 {
            let row = v.feature_row(idx[k] as usize);
            for c in 0..v.channels {
                out[c] += w[k] * row[c];
            }
        }
    }
}

pub fn sparse_interp(v: &SparseFeatureVolume, q: &Vector3<f64>) -> Vec<f64> {
    let mut out = vec![0.0; v.channels];
    sparse_interp_into(v, q, &mut out);
    out
}

/// Back-project every valid depth pixel of every frame into a joint cloud.
/// Depth maps may be any resolution; rays follow the correspondingly
/// rescaled intrinsics. Feature maps are sampled at their own scale.
pub fn form_point_cloud(
    depths: &[DepthMap],
    cams: &[Camera],
    viewsets: &[ViewIndexSet],
    coarse_maps: &[&FeatureMap],
    agg: Aggregation,
) -> Result<Vec<FeaturePoint>> {
    assert_eq!(depths.len(), cams.len());
    assert_eq!(depths.len(), viewsets.len());
    let per_frame: Vec<Result<Vec<FeaturePoint>>> = par_chunk_map(depths.len(), 1, |range| {
        let n = range.start;
        let dm = &depths[n];
        let intr = cams[n].intrinsics.rescaled(dm.width, dm.height);
        let mut scratch = crate::features::VarianceScratch::default();
        let mut pts = Vec::with_capacity(dm.valid_count());
        for y in 0..dm.height {
            for x in 0..dm.width {
                let Some(d) = dm.at(x, y) else { continue };
                let p = back_project(&intr, &cams[n].pose, &Vector2::new(x as f64, y as f64), d)?;
                let mut feature = vec![0.0; FEAT_CHANNELS];
                multiview_feature_into(
                    &p,
                    &viewsets[n],
                    cams,
                    coarse_maps,
                    agg,
                    ViewInclusion::ExcludeOutside,
                    &mut scratch,
                    &mut feature,
                )?;
                pts.push(FeaturePoint { position: p, feature, frame: n, pixel: (x, y) });
            }
        }
        Ok(pts)
    });
    let mut cloud = Vec::new();
    for r in per_frame {
        cloud.extend(r?);
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(cloud)
}

/// Half-open voxel partition of a cloud: every point belongs to exactly one
/// cell via `floor((p - origin)/r)`; the origin is the bounding-box minimum
/// snapped down to a multiple of `r`.
#[derive(Debug)]
pub struct VoxelPartition {
    pub layout: VoxelGridLayout,
    /// Point indices ordered by cell; `segments[c]` is the range of
    /// `point_order` belonging to cell row `c`.
    pub point_order: Vec<u32>,
    pub segments: Vec<(u32, u32)>,
}

pub fn partition_points(cloud: &[FeaturePoint], r: f64) -> Result<VoxelPartition> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut bb_min = cloud[0].position;
    for p in cloud {
        for c in 0..3 {
            bb_min[c] = bb_min[c].min(p.position[c]);
        }
    }
    let origin = Vector3::new(
        (bb_min.x / r).floor() * r,
        (bb_min.y / r).floor() * r,
        (bb_min.z / r).floor() * r,
    );
    let cell_of = |p: &Vector3<f64>| -> [i32; 3] {
        [
            ((p.x - origin.x) / r).floor() as i32,
            ((p.y - origin.y) / r).floor() as i32,
            ((p.z - origin.z) / r).floor() as i32,
        ]
    };
    let mut keyed: Vec<([i32; 3], u32)> =
        cloud.iter().enumerate().map(|(i, p)| (cell_of(&p.position), i as u32)).collect();
    keyed.sort_unstable();
    let mut indices: Vec<[i32; 3]> = Vec::new();
    let mut segments: Vec<(u32, u32)> = Vec::new();
    let mut point_order = Vec::with_capacity(cloud.len());
    for (pos, (cell, pi)) in keyed.iter().enumerate() {
        if indices.last() != Some(cell) {
            if let Some(last) = segments.last_mut() {
                last.1 = pos as u32;
            }
            indices.push(*cell);
            segments.push((pos as u32, pos as u32));
        }
        point_order.push(*pi);
    }
    if let Some(last) = segments.last_mut() {
        last.1 = cloud.len() as u32;
    }
    Ok(VoxelPartition {
        layout: VoxelGridLayout::from_sorted_indices(r, origin, indices),
        point_order,
        segments,
    })
}

/// PointNet inputs in partition order: `[p - cell_center, feature]` rows.
pub fn pointnet_inputs(cloud: &[FeaturePoint], part: &VoxelPartition) -> Tensor {
    let c_in = 3 + FEAT_CHANNELS;
    let n = cloud.len();
    let mut data = vec![0.0; n * c_in];
    for (row, &pi) in part.point_order.iter().enumerate() {
        let p = &cloud[pi as usize];
        // the owning cell is found by position in the segments
        let cell_row = part
            .segments
            .binary_search_by(|&(s, e)| {
                if (row as u32) < s {
                    std::cmp::Ordering::Greater
                } else if (row as u32) >= e {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .expect("row belongs to a segment");
        let center = part.layout.cell_center(cell_row);
        let out = &mut data[row * c_in..(row + 1) * c_in];
        out[0] = p.position.x - center.x;
        out[1] = p.position.y - center.y;
        out[2] = p.position.z - center.z;
        out[3..].copy_from_slice(&p.feature);
    }
    Tensor::new(vec![n, c_in], data)
}

/// U-Net channel widths; encoder 32 -> e0 -> e1 -> e2, decoder back through
/// d1 -> d0. The three output volumes carry e2 (32 cm), d1 (16 cm) and d0
/// (8 cm) channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnetWidths {
    pub e0: usize,
    pub e1: usize,
    pub e2: usize,
    pub d1: usize,
    pub d0: usize,
}

impl Default for UnetWidths {
    fn default() -> Self {
        // sized for CPU training; pass wider channels through the config
        // for higher-capacity runs
        UnetWidths { e0: 16, e1: 24, e2: 32, d1: 24, d0: 16 }
    }
}

impl UnetWidths {
    pub fn hypothesis_channels(&self) -> usize {
        self.e2 + self.d1 + self.d0
    }
}

/// Learned scene-encoding blocks: per-voxel PointNet MLP plus the sparse
/// U-Net convolutions.
#[derive(Debug, Clone)]
pub struct SceneNets {
    pub mlp: MlpNet,
    pub widths: UnetWidths,
    base: String,
}

const GN_EPS: f64 = 1e-5;

impl SceneNets {
    pub fn register(store: &mut ParameterStore, widths: UnetWidths) -> Self {
        let mlp = MlpNet::register(store, "pointnet", &[3 + FEAT_CHANNELS, FEAT_CHANNELS, FEAT_CHANNELS]);
        let base = "unet".to_string();
        let reg_conv = |store: &mut ParameterStore, name: &str, taps: usize, cin: usize, cout: usize| {
            store.init_uniform(&format!("{base}.{name}.w"), &[taps, cin, cout], taps * cin, taps * cout);
            store.init_uniform(&format!("{base}.{name}.b"), &[cout], taps * cin, taps * cout);
            store.init_const(&format!("{base}.{name}.gamma"), &[cout], 1.0);
            store.init_const(&format!("{base}.{name}.beta"), &[cout], 0.0);
        };
        reg_conv(store, "enc0", 27, FEAT_CHANNELS, widths.e0);
        reg_conv(store, "down1", 8, widths.e0, widths.e1);
        reg_conv(store, "down2", 8, widths.e1, widths.e2);
        reg_conv(store, "dec1", 27, widths.e2 + widths.e1, widths.d1);
        reg_conv(store, "dec0", 27, widths.d1 + widths.e0, widths.d0);
        SceneNets { mlp, widths, base }
    }

    fn conv_block(
        &self,
        tape: &mut Tape,
        name: &str,
        x: Var,
        plan: Rc<SparseConvPlan>,
        cout: usize,
    ) -> Result<Var> {
        let w = tape.param(&format!("{}.{name}.w", self.base))?;
        let b = tape.param(&format!("{}.{name}.b", self.base))?;
        let y = tape.sparse_conv(x, w, b, plan)?;
        let gamma = tape.param(&format!("{}.{name}.gamma", self.base))?;
        let beta = tape.param(&format!("{}.{name}.beta", self.base))?;
        let n = tape.value(y).shape()[0];
        let flat = tape.reshape(y, &[1, n, cout])?;
        let gn = tape.group_norm(flat, gamma, beta, group_count(cout), GN_EPS)?;
        let back = tape.reshape(gn, &[n, cout])?;
        Ok(tape.relu(back))
    }
}

/// Everything the refinement stages need from one scene encoding pass on a
/// tape: grid layouts and the feature tensors still attached to the graph.
pub struct EncodedSceneTape {
    /// coarse-to-fine: 32 cm, 16 cm, 8 cm
    pub layouts: [VoxelGridLayout; 3],
    pub feats: [Var; 3],
    pub channels: [usize; 3],
    pub partition: VoxelPartition,
}

/// Pure-value scene encoding.
#[derive(Debug, Clone)]
pub struct SceneVolumes {
    pub v1: SparseFeatureVolume,
    pub v2: SparseFeatureVolume,
    pub v3: SparseFeatureVolume,
}

impl SceneVolumes {
    pub fn by_scale(&self) -> [&SparseFeatureVolume; 3] {
        [&self.v1, &self.v2, &self.v3]
    }

    pub fn content_hash(&self) -> u64 {
        self.v1
            .content_hash()
            .rotate_left(21)
            .wrapping_add(self.v2.content_hash().rotate_left(11))
            .wrapping_add(self.v3.content_hash())
    }
}

fn parent_indices(children: &[[i32; 3]]) -> Vec<[i32; 3]> {
    let mut parents: Vec<[i32; 3]> = children
        .iter()
        .map(|c| [c[0].div_euclid(2), c[1].div_euclid(2), c[2].div_euclid(2)])
        .collect();
    parents.sort_unstable();
    parents.dedup();
    parents
}

fn conv27_plan(layout: &VoxelGridLayout) -> SparseConvPlan {
    let n = layout.len();
    let mut pairs = Vec::with_capacity(n * 27);
    for (o, idx) in layout.indices().iter().enumerate() {
        let mut tap = 0u16;
        for dz in -1i32..=1 {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let nb = [idx[0] + dx, idx[1] + dy, idx[2] + dz];
                    if let Some(row) = layout.row_of(&nb) {
                        pairs.push((o as u32, row as u32, tap));
                    }
                    tap += 1;
                }
            }
        }
    }
    SparseConvPlan::from_pairs(n, n, 27, pairs)
}

fn down_plan(fine: &VoxelGridLayout, coarse: &VoxelGridLayout) -> SparseConvPlan {
    // tap = child offset within the parent, 2x2x2
    let mut pairs = Vec::with_capacity(fine.len());
    for (row, idx) in fine.indices().iter().enumerate() {
        let parent = [idx[0].div_euclid(2), idx[1].div_euclid(2), idx[2].div_euclid(2)];
        let o = coarse.row_of(&parent).expect("parent occupancy covers children");
        let tap = ((idx[2].rem_euclid(2) * 2 + idx[1].rem_euclid(2)) * 2 + idx[0].rem_euclid(2)) as u16;
        pairs.push((o as u32, row as u32, tap));
    }
    SparseConvPlan::from_pairs(coarse.len(), fine.len(), 8, pairs)
}

fn unpool_taps(fine: &VoxelGridLayout, coarse: &VoxelGridLayout) -> (Rc<Vec<i64>>, Rc<Vec<f64>>) {
    let idx: Vec<i64> = fine
        .indices()
        .iter()
        .map(|i| {
            let parent = [i[0].div_euclid(2), i[1].div_euclid(2), i[2].div_euclid(2)];
            coarse.row_of(&parent).expect("parent exists") as i64
        })
        .collect();
    let w = vec![1.0; idx.len()];
    (Rc::new(idx), Rc::new(w))
}

/// Voxelize the cloud (PointNet pooling) and run the sparse U-Net on a
/// tape. The input grid is at [`VOXEL_EDGE`]; outputs sit at 4r, 2r and r.
pub fn encode_scene_tape(
    tape: &mut Tape,
    nets: &SceneNets,
    cloud: &[FeaturePoint],
) -> Result<EncodedSceneTape> {
    let part = partition_points(cloud, VOXEL_EDGE)?;
    let inputs = pointnet_inputs(cloud, &part);
    let x = tape.constant(inputs);
    let per_point = nets.mlp.forward_tape(tape, x)?;
    let v0 = tape.segment_max(per_point, &part.segments)?;

    let l0 = part.layout.clone();
    let l1_indices = parent_indices(l0.indices());
    let l1 = VoxelGridLayout::from_sorted_indices(
        l0.resolution * 2.0,
        // parent cell (0,0,0) spans child cells 0..2 from the same origin
        l0.origin,
        l1_indices,
    );
    let l2 = VoxelGridLayout::from_sorted_indices(
        l1.resolution * 2.0,
        l1.origin,
        parent_indices(l1.indices()),
    );

    let w = nets.widths;
    let e0 = nets.conv_block(tape, "enc0", v0, Rc::new(conv27_plan(&l0)), w.e0)?;
    let e1 = nets.conv_block(tape, "down1", e0, Rc::new(down_plan(&l0, &l1)), w.e1)?;
    let e2 = nets.conv_block(tape, "down2", e1, Rc::new(down_plan(&l1, &l2)), w.e2)?;
    let (up1_idx, up1_w) = unpool_taps(&l1, &l2);
    let up1 = tape.gather_weighted(e2, up1_idx, up1_w, l1.len(), 1)?;
    let cat1 = tape.concat_last(&[up1, e1])?;
    let d1 = nets.conv_block(tape, "dec1", cat1, Rc::new(conv27_plan(&l1)), w.d1)?;
    let (up0_idx, up0_w) = unpool_taps(&l0, &l1);
    let up0 = tape.gather_weighted(d1, up0_idx, up0_w, l0.len(), 1)?;
    let cat0 = tape.concat_last(&[up0, e0])?;
    let d0 = nets.conv_block(tape, "dec0", cat0, Rc::new(conv27_plan(&l0)), w.d0)?;

    Ok(EncodedSceneTape {
        layouts: [l2, l1, l0],
        feats: [e2, d1, d0],
        channels: [w.e2, w.d1, w.d0],
        partition: part,
    })
}

/// Pure-value scene encoding: run the taped pass and detach the outputs.
pub fn encode_scene(
    store: &ParameterStore,
    nets: &SceneNets,
    cloud: &[FeaturePoint],
) -> Result<SceneVolumes> {
    let mut tape = Tape::new(store);
    let enc = encode_scene_tape(&mut tape, nets, cloud)?;
    let take = |layout: &VoxelGridLayout, var: Var, ch: usize| -> Result<SparseFeatureVolume> {
        SparseFeatureVolume::from_parts(
            layout.resolution,
            layout.origin,
            ch,
            layout.indices().to_vec(),
            tape.value(var).data().to_vec(),
        )
    };
    let v1 = take(&enc.layouts[0], enc.feats[0], enc.channels[0])?;
    let v2 = take(&enc.layouts[1], enc.feats[1], enc.channels[1])?;
    let v3 = take(&enc.layouts[2], enc.feats[2], enc.channels[2])?;
    for (v, name) in [(&v1, "V1"), (&v2, "V2"), (&v3, "V3")] {
        if !v.features.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericFailure {
                stage: "encode_scene".into(),
                detail: format!("non-finite features in {name}"),
            });
        }
    }
    Ok(SceneVolumes { v1, v2, v3 })
}

/// Standalone voxelization (the sparse PointNet volume at the input grid).
pub fn voxelize(
    store: &ParameterStore,
    mlp: &MlpNet,
    cloud: &[FeaturePoint],
    r: f64,
) -> Result<SparseFeatureVolume> {
    let part = partition_points(cloud, r)?;
    let inputs = pointnet_inputs(cloud, &part);
    let per_point = mlp.forward(store, &inputs)?;
    let cout = per_point.shape()[1];
    let mut tape = Tape::new(store);
    let pp = tape.constant(per_point);
    let pooled = tape.segment_max(pp, &part.segments)?;
    SparseFeatureVolume::from_parts(
        r,
        part.layout.origin,
        cout,
        part.layout.indices().to_vec(),
        tape.value(pooled).data().to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkern::{finite_diff_max_rel_err, GradMap};
    use crate::rng::Stream;

    fn point_at(p: [f64; 3], f: Vec<f64>) -> FeaturePoint {
        FeaturePoint { position: Vector3::new(p[0], p[1], p[2]), feature: f, frame: 0, pixel: (0, 0) }
    }

    fn random_cloud(n: usize, seed: u64) -> Vec<FeaturePoint> {
        let mut rng = Stream::new(seed, "cloud");
        (0..n)
            .map(|i| FeaturePoint {
                position: Vector3::new(
                    rng.uniform(-1.5, 1.5),
                    rng.uniform(0.0, 2.0),
                    rng.uniform(-1.5, 1.5),
                ),
                feature: (0..FEAT_CHANNELS).map(|_| rng.uniform(0.0, 1.0)).collect(),
                frame: i % 3,
                pixel: (i % 56, i / 56 % 56),
            })
            .collect()
    }

    #[test]
    fn point_at_cell_center_has_zero_offset() {
        // p = k*r + r/2 puts the point exactly at its cell center
        let r = VOXEL_EDGE;
        let p = [r * 3.0 + r / 2.0, r / 2.0, r * 10.0 + r / 2.0];
        let cloud = vec![point_at(p, vec![0.5; FEAT_CHANNELS])];
        let part = partition_points(&cloud, r).unwrap();
        let inputs = pointnet_inputs(&cloud, &part);
        for c in 0..3 {
            assert!(
                inputs.data()[c].abs() < 1e-12,
                "offset channel {c} = {}",
                inputs.data()[c]
            );
        }
        assert_eq!(&inputs.data()[3..], &[0.5; FEAT_CHANNELS]);
    }

    #[test]
    fn two_points_one_cell_pool_to_elementwise_max() {
        // identity MLP (single linear layer with identity weights) exposes
        // the raw pooled inputs
        let r = VOXEL_EDGE;
        let c_in = 3 + FEAT_CHANNELS;
        let mut store = ParameterStore::new(0);
        let mlp = MlpNet::register(&mut store, "id", &[c_in, c_in]);
        let mut eye = Tensor::zeros(&[c_in, c_in]);
        for i in 0..c_in {
            eye.data_mut()[i * c_in + i] = 1.0;
        }
        store.insert("id.fc0.w", eye);
        store.init_const("id.fc0.b", &[c_in], 0.0);

        let mut fa = vec![0.1; FEAT_CHANNELS];
        let mut fb = vec![0.9; FEAT_CHANNELS];
        fa[3] = 0.95;
        fb[3] = 0.2;
        let cloud = vec![
            point_at([0.01, 0.01, 0.01], fa.clone()),
            point_at([0.02, 0.02, 0.02], fb.clone()),
        ];
        let vol = voxelize(&store, &mlp, &cloud, r).unwrap();
        assert_eq!(vol.len(), 1);
        let f = vol.feature_row(0);
        for c in 0..FEAT_CHANNELS {
            assert_eq!(f[3 + c], fa[c].max(fb[c]));
        }
    }

    #[test]
    fn partition_is_exact_and_counts_balance() {
        for seed in 0..50u64 {
            let cloud = random_cloud(400, seed);
            let part = partition_points(&cloud, VOXEL_EDGE).unwrap();
            // counts balance
            let total: u32 = part.segments.iter().map(|(s, e)| e - s).sum();
            assert_eq!(total as usize, cloud.len());
            // no empty cells
            assert!(part.segments.iter().all(|(s, e)| e > s));
            assert_eq!(part.segments.len(), part.layout.len());
            // each point maps to exactly one retained cell
            let mut seen = vec![false; cloud.len()];
            for &pi in &part.point_order {
                assert!(!seen[pi as usize]);
                seen[pi as usize] = true;
            }
            assert!(seen.iter().all(|s| *s));
            // recompute membership independently
            for (row, (s, e)) in part.segments.iter().enumerate() {
                let idx = part.layout.indices()[row];
                for k in *s..*e {
                    let p = &cloud[part.point_order[k as usize] as usize].position;
                    let o = part.layout.origin;
                    let r = part.layout.resolution;
                    let expect = [
                        ((p.x - o.x) / r).floor() as i32,
                        ((p.y - o.y) / r).floor() as i32,
                        ((p.z - o.z) / r).floor() as i32,
                    ];
                    assert_eq!(idx, expect);
                }
            }
        }
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let mut store = ParameterStore::new(5);
        let nets = SceneNets::register(&mut store, UnetWidths::default());
        let cloud = random_cloud(300, 7);
        let mut permuted = cloud.clone();
        permuted.reverse();
        let a = voxelize(&store, &nets.mlp, &cloud, VOXEL_EDGE).unwrap();
        let b = voxelize(&store, &nets.mlp, &permuted, VOXEL_EDGE).unwrap();
        assert_eq!(a.indices(), b.indices());
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn grid_equivariance_under_exact_r_multiple_translation() {
        let mut store = ParameterStore::new(5);
        let nets = SceneNets::register(&mut store, UnetWidths::default());
        let cloud = random_cloud(200, 11);
        let shift = VOXEL_EDGE * 16.0;
        let shifted: Vec<FeaturePoint> = cloud
            .iter()
            .map(|p| FeaturePoint {
                position: p.position + Vector3::new(shift, shift, shift),
                ..p.clone()
            })
            .collect();
        let a = voxelize(&store, &nets.mlp, &cloud, VOXEL_EDGE).unwrap();
        let b = voxelize(&store, &nets.mlp, &shifted, VOXEL_EDGE).unwrap();
        assert_eq!(a.len(), b.len());
        for (fa, fb) in a.features.iter().zip(&b.features) {
            assert!((fa - fb).abs() < 1e-9, "{fa} vs {fb}");
        }
    }

    #[test]
    fn single_voxel_propagates_through_all_scales() {
        let mut store = ParameterStore::new(9);
        let nets = SceneNets::register(&mut store, UnetWidths::default());
        let cloud = vec![point_at([0.01, 0.02, 0.03], vec![0.4; FEAT_CHANNELS])];
        let vols = encode_scene(&store, &nets, &cloud).unwrap();
        assert_eq!(vols.v3.len(), 1);
        assert_eq!(vols.v2.len(), 1);
        assert_eq!(vols.v1.len(), 1);
        assert_eq!(vols.v1.resolution(), VOXEL_EDGE * 4.0);
        assert_eq!(vols.v2.resolution(), VOXEL_EDGE * 2.0);
        assert_eq!(vols.v3.resolution(), VOXEL_EDGE);
    }

    #[test]
    fn v3_occupies_exactly_the_input_cells() {
        let mut store = ParameterStore::new(9);
        let nets = SceneNets::register(&mut store, UnetWidths::default());
        let cloud = random_cloud(500, 13);
        let part = partition_points(&cloud, VOXEL_EDGE).unwrap();
        let vols = encode_scene(&store, &nets, &cloud).unwrap();
        assert_eq!(vols.v3.indices(), part.layout.indices());
        // parents cover children
        for idx in vols.v3.indices() {
            let p1 = [idx[0].div_euclid(2), idx[1].div_euclid(2), idx[2].div_euclid(2)];
            assert!(vols.v2.layout.row_of(&p1).is_some());
            let p2 = [p1[0].div_euclid(2), p1[1].div_euclid(2), p1[2].div_euclid(2)];
            assert!(vols.v1.layout.row_of(&p2).is_some());
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut store = ParameterStore::new(21);
        let nets = SceneNets::register(&mut store, UnetWidths::default());
        let cloud = random_cloud(400, 17);
        let a = encode_scene(&store, &nets, &cloud).unwrap();
        let b = encode_scene(&store, &nets, &cloud).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.v1.features, b.v1.features);
        assert_eq!(a.v2.features, b.v2.features);
        assert_eq!(a.v3.features, b.v3.features);
    }

    #[test]
    fn unet_gradient_check_on_toy_volume() {
        let mut store = ParameterStore::new(33);
        let nets = SceneNets::register(&mut store, UnetWidths { e0: 8, e1: 8, e2: 8, d1: 8, d0: 8 });
        let cloud = vec![
            point_at([0.01, 0.01, 0.01], vec![0.3; FEAT_CHANNELS]),
            point_at([0.09, 0.01, 0.01], vec![0.6; FEAT_CHANNELS]),
            point_at([0.01, 0.09, 0.01], vec![0.2; FEAT_CHANNELS]),
            point_at([0.17, 0.17, 0.17], vec![0.8; FEAT_CHANNELS]),
            point_at([0.33, 0.01, 0.25], vec![0.5; FEAT_CHANNELS]),
        ];
        let mut rng = Stream::new(32, "ro");
        let eval = |store: &ParameterStore| -> (f64, Option<GradMap>) {
            let mut tape = Tape::new(store);
            let enc = encode_scene_tape(&mut tape, &nets, &cloud).unwrap();
            // scalar readout over all three volumes
            let mut loss = None;
            for (i, &feat) in enc.feats.iter().enumerate() {
                let n = tape.value(feat).len();
                let mut r = Stream::new(100 + i as u64, "w");
                let coeffs: Vec<f64> = (0..n).map(|_| r.uniform(-1.0, 1.0)).collect();
                let l = tape.dot_const(feat, coeffs);
                loss = Some(match loss {
                    None => l,
                    Some(prev) => tape.add(prev, l),
                });
            }
            let loss = loss.unwrap();
            (tape.value(loss).item(), Some(tape.backward(loss).unwrap()))
        };
        let _ = &mut rng;
        let (_, grads) = eval(&store);
        let grads = grads.unwrap();
        // restrict the check to a few parameters to keep runtime low; the
        // graph couples all of them through the same loss
        let mut subset = GradMap::new();
        for key in ["unet.enc0.w", "unet.down2.w", "unet.dec0.w", "unet.dec1.gamma", "pointnet.fc0.w"] {
            subset.insert(key.to_string(), grads.get(key).unwrap().clone());
        }
        // central differences on this depth of graph are noise-limited
        // below eps ~ 1e-5 (scalar loss magnitude ~ 50)
        let err = finite_diff_max_rel_err(&store, &subset, 1e-5, |s| eval(s).0);
        assert!(err < 1e-5, "unet grad err {err}");
    }

    #[test]
    fn interp_exact_at_stored_center_and_zero_outside() {
        let mut store = ParameterStore::new(5);
        let nets = SceneNets::register(&mut store, UnetWidths::default());
        let cloud = random_cloud(100, 19);
        let vol = voxelize(&store, &nets.mlp, &cloud, VOXEL_EDGE).unwrap();
        let row = vol.len() / 2;
        let center = vol.layout.cell_center(row);
        let got = sparse_interp(&vol, &center);
        assert_eq!(got.as_slice(), vol.feature_row(row));
        // far outside occupancy: zero fill
        let far = sparse_interp(&vol, &Vector3::new(100.0, 100.0, 100.0));
        assert!(far.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn interp_matches_dense_trilinear_oracle() {
        // densify a 6x6x6 block so no taps are absent, then compare against
        // a plain dense trilinear implementation
        let mut rng = Stream::new(41, "dense");
        let ch = 3;
        let mut indices = Vec::new();
        let mut features = Vec::new();
        for z in 0..6i32 {
            for y in 0..6i32 {
                for x in 0..6i32 {
                    indices.push([x, y, z]);
                    for _ in 0..ch {
                        features.push(rng.uniform(-1.0, 1.0));
                    }
                }
            }
        }
        indices.sort_unstable();
        // rebuild features in sorted order (they were generated in z-major
        // order; sort keys are x-major) — regenerate instead
        let mut dense = vec![0.0; 6 * 6 * 6 * ch];
        let mut rng = Stream::new(41, "dense2");
        for i in &indices {
            let lin = ((i[2] * 36 + i[1] * 6 + i[0]) as usize) * ch;
            for c in 0..ch {
                dense[lin + c] = rng.uniform(-1.0, 1.0);
            }
        }
        let features: Vec<f64> = indices
            .iter()
            .flat_map(|i| {
                let lin = ((i[2] * 36 + i[1] * 6 + i[0]) as usize) * ch;
                dense[lin..lin + ch].to_vec()
            })
            .collect();
        let r = 0.25;
        let vol = SparseFeatureVolume::from_parts(r, Vector3::zeros(), ch, indices, features).unwrap();

        let dense_oracle = |q: &Vector3<f64>| -> Vec<f64> {
            let gx = q.x / r - 0.5;
            let gy = q.y / r - 0.5;
            let gz = q.z / r - 0.5;
            let (x0, y0, z0) = (gx.floor() as i32, gy.floor() as i32, gz.floor() as i32);
            let (fx, fy, fz) = (gx - x0 as f64, gy - y0 as f64, gz - z0 as f64);
            let mut out = vec![0.0; ch];
            for dz in 0..2i32 {
                for dy in 0..2i32 {
                    for dx in 0..2i32 {
                        let (xi, yi, zi) = (x0 + dx, y0 + dy, z0 + dz);
                        let w = (if dx == 0 { 1.0 - fx } else { fx })
                            * (if dy == 0 { 1.0 - fy } else { fy })
                            * (if dz == 0 { 1.0 - fz } else { fz });
                        if (0..6).contains(&xi) && (0..6).contains(&yi) && (0..6).contains(&zi) {
                            let lin = ((zi * 36 + yi * 6 + xi) as usize) * ch;
                            for c in 0..ch {
                                out[c] += w * dense[lin + c];
                            }
                        }
                    }
                }
            }
            out
        };

        let mut rng = Stream::new(43, "q");
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let q = Vector3::new(rng.uniform(0.2, 1.3), rng.uniform(0.2, 1.3), rng.uniform(0.2, 1.3));
            let got = sparse_interp(&vol, &q);
            let want = dense_oracle(&q);
            for c in 0..ch {
                max_err = max_err.max((got[c] - want[c]).abs());
            }
        }
        assert!(max_err < 1e-12, "interp err {max_err}");
    }

    #[test]
    fn interp_is_continuous_across_cell_boundaries() {
        let mut store = ParameterStore::new(5);
        let nets = SceneNets::register(&mut store, UnetWidths::default());
        let cloud = random_cloud(200, 23);
        let vol = voxelize(&store, &nets.mlp, &cloud, VOXEL_EDGE).unwrap();
        let mut rng = Stream::new(44, "cont");
        for _ in 0..200 {
            let row = rng.below(vol.len());
            let center = vol.layout.cell_center(row);
            // boundary along x between this cell center and the next
            let bx = center.x + VOXEL_EDGE / 2.0;
            let a = sparse_interp(&vol, &Vector3::new(bx - 1e-9, center.y, center.z));
            let b = sparse_interp(&vol, &Vector3::new(bx + 1e-9, center.y, center.z));
            for c in 0..vol.channels {
                assert!((a[c] - b[c]).abs() < 1e-6, "discontinuity {}", (a[c] - b[c]).abs());
            }
        }
    }

    #[test]
    fn volume_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParameterStore::new(5);
        let nets = SceneNets::register(&mut store, UnetWidths::default());
        let cloud = random_cloud(150, 29);
        let vol = voxelize(&store, &nets.mlp, &cloud, VOXEL_EDGE).unwrap();
        let path = dir.path().join("v.3dvv");
        crate::io::voldump::write(&path, &vol).unwrap();
        let back = crate::io::voldump::read(&path).unwrap();
        assert_eq!(back.indices(), vol.indices());
        assert_eq!(back.resolution(), vol.resolution());
        for i in 0..vol.len() {
            for c in 0..vol.channels {
                assert_eq!(back.feature_row(i)[c], vol.feature_row(i)[c] as f32 as f64);
            }
        }
    }
}
