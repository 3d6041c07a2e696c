//! Initial coarse depth by plane-sweep stereo.
//!
//! For every pixel of a sparse 56x56 lattice over the reference image, the
//! multi-view variance feature is evaluated at each depth hypothesis along
//! the pixel ray, a small 1D conv stack over the hypothesis axis scores the
//! candidates, and the depth is the softmax-weighted expectation of the
//! hypothesis grid (soft-argmin), so predictions always stay inside the
//! sweep range.

use crate::diffkern::{Conv1dNet, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{multiview_feature_into, Aggregation, ViewIndexSet, ViewInclusion, FEAT_CHANNELS};
use crate::geometry::{back_project, Camera, DepthMap, FeatureMap};
use crate::parallel::par_fill_rows;
use nalgebra::Vector2;

/// Side length of the coarse depth prediction.
pub const COARSE_DEPTH_SIZE: usize = 56;

/// Cost written into cells whose hypothesis point is seen by fewer than two
/// views. Above the realistic variance range so degenerate cells never win
/// the regression, yet small enough not to dominate the group-norm
/// statistics inside the regularizer.
pub const DEGENERATE_COST: f64 = 4.0;

/// Uniform depth hypothesis grid along each viewing ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthHypothesisGrid {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Default for DepthHypothesisGrid {
    fn default() -> Self {
        DepthHypothesisGrid { start: 0.5, step: 0.05, count: 96 }
    }
}

impl DepthHypothesisGrid {
    pub fn value(&self, l: usize) -> f64 {
        self.start + l as f64 * self.step
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|l| self.value(l)).collect()
    }

    pub fn last(&self) -> f64 {
        self.value(self.count - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.start <= 0.0 || self.step <= 0.0 || self.count < 2 {
            return Err(Error::Config(format!(
                "bad hypothesis grid: start {}, step {}, count {}",
                self.start, self.step, self.count
            )));
        }
        Ok(())
    }
}

/// Variance matching costs for a set of reference pixels: `[N, L, C]`.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub grid: DepthHypothesisGrid,
    pub channels: usize,
    pub cost: Tensor,
}

/// Coarse prediction: the depth map plus the per-pixel probability volume
/// over hypotheses (`[N, L]`, rows sum to one).
#[derive(Debug, Clone)]
pub struct CoarsePrediction {
    pub depth: DepthMap,
    pub prob: Tensor,
}

/// The sub-pixel lattice positions of the coarse prediction inside the
/// full-resolution image are exactly the pixel centers of the rescaled
/// intrinsics, so depth rays come from `intrinsics.rescaled(56, 56)`.
pub fn cost_tensor(
    views: &ViewIndexSet,
    cams: &[Camera],
    coarse_maps: &[&FeatureMap],
    grid: &DepthHypothesisGrid,
    pixels: &[(u32, u32)],
) -> Result<Tensor> {
    grid.validate()?;
    let n = pixels.len();
    let l = grid.count;
    let c = FEAT_CHANNELS;
    let refcam = &cams[views.reference];
    let small = refcam.intrinsics.rescaled(COARSE_DEPTH_SIZE, COARSE_DEPTH_SIZE);
    let mut cost = Tensor::zeros(&[n, l, c]);
    let dvals = grid.values();
    let views_ref = &views;
    par_fill_rows(cost.data_mut(), n, l * c, 16, |row, out| {
        let (px, py) = pixels[row];
        let pixel = Vector2::new(px as f64, py as f64);
        let mut scratch = crate::features::VarianceScratch::default();
        for (li, &d) in dvals.iter().enumerate() {
            let p = back_project(&small, &refcam.pose, &pixel, d).expect("positive hypothesis depth");
            // views that fail projection are dropped inside, shrinking the set
            let survivors = multiview_feature_into(
                &p,
                views_ref,
                cams,
                coarse_maps,
                Aggregation::Variance,
                ViewInclusion::ExcludeOutside,
                &mut scratch,
                &mut out[li * c..(li + 1) * c],
            )
            .unwrap_or(0);
            if survivors < 2 {
                out[li * c..(li + 1) * c].fill(DEGENERATE_COST);
            }
        }
    });
    Ok(cost)
}

fn full_lattice() -> Vec<(u32, u32)> {
    let mut px = Vec::with_capacity(COARSE_DEPTH_SIZE * COARSE_DEPTH_SIZE);
    for y in 0..COARSE_DEPTH_SIZE as u32 {
        for x in 0..COARSE_DEPTH_SIZE as u32 {
            px.push((x, y));
        }
    }
    px
}

/// Full 56x56 plane-sweep cost volume for one reference view.
pub fn build_cost_volume(
    views: &ViewIndexSet,
    cams: &[Camera],
    coarse_maps: &[&FeatureMap],
    grid: &DepthHypothesisGrid,
) -> Result<CostVolume> {
    let cost = cost_tensor(views, cams, coarse_maps, grid, &full_lattice())?;
    Ok(CostVolume {
        width: COARSE_DEPTH_SIZE,
        height: COARSE_DEPTH_SIZE,
        grid: *grid,
        channels: FEAT_CHANNELS,
        cost,
    })
}

/// Softmax-expectation depth from per-pixel hypothesis probabilities.
pub fn soft_argmin(grid: &DepthHypothesisGrid, prob_row: &[f64]) -> f64 {
    debug_assert_eq!(prob_row.len(), grid.count);
    let mut acc = 0.0;
    for (l, &p) in prob_row.iter().enumerate() {
        acc += grid.value(l) * p;
    }
    acc
}

/// Score, normalize and regress the coarse depth map.
pub fn regularize_and_predict(
    vol: &CostVolume,
    store: &ParameterStore,
    net: &Conv1dNet,
) -> Result<CoarsePrediction> {
    if net.widths[0] != vol.channels || *net.widths.last().unwrap() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "regularizer widths {:?} incompatible with {} cost channels",
            net.widths, vol.channels
        )));
    }
    let n = vol.width * vol.height;
    let l = vol.grid.count;
    let scores = net.forward(store, &vol.cost)?; // [N, L, 1]
    let mut prob = Tensor::zeros(&[n, l]);
    crate::diffkern::softmax_rows_pure(scores.data(), n, l, prob.data_mut());
    let mut depth = vec![0.0; n];
    for (i, d) in depth.iter_mut().enumerate() {
        *d = soft_argmin(&vol.grid, &prob.data()[i * l..(i + 1) * l]);
        debug_assert!(*d >= vol.grid.start - 1e-9 && *d <= vol.grid.last() + 1e-9);
    }
    let map = DepthMap::from_depths(vol.width, vol.height, depth);
    map.assert_finite("regularize_and_predict")?;
    Ok(CoarsePrediction { depth: map, prob })
}

/// Taped variant over an arbitrary pixel subset of a cost tensor; returns
/// the per-pixel depth and the probability rows as graph values for loss
/// construction.
pub fn regularize_tape(
    tape: &mut Tape,
    cost: Tensor,
    grid: &DepthHypothesisGrid,
    net: &Conv1dNet,
) -> Result<(Var, Var)> {
    let n = cost.shape()[0];
    let l = cost.shape()[1];
    let x = tape.constant(cost);
    let scores = net.forward_tape(tape, x)?;
    let flat = tape.reshape(scores, &[n, l])?;
    let prob = tape.softmax_rows(flat)?;
    let depth = tape.expect_dot(prob, grid.values())?;
    Ok((depth, prob))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkern::{finite_diff_max_rel_err, GradMap};
    use crate::features::{extract_features, Extractor, COARSE_H, COARSE_W};
    use crate::geometry::{CameraIntrinsics, Pose};
    use crate::rng::Stream;
    use crate::synthdata::{generate_scene, render_image, Box3, SceneSpec, TexturedBox};
    use nalgebra::Vector3;

    fn reg_net(store: &mut ParameterStore) -> Conv1dNet {
        Conv1dNet::register(store, "costreg", &[FEAT_CHANNELS, 16, 8, 1])
    }

    #[test]
    fn default_grid_matches_sweep_bounds() {
        let g = DepthHypothesisGrid::default();
        assert_eq!(g.count, 96);
        assert_eq!(g.value(0), 0.5);
        assert!((g.last() - 5.25).abs() < 1e-12);
        let v = g.values();
        assert!(v.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn identical_colocated_views_give_zero_cost() {
        let intr = CameraIntrinsics::new(277.0, 277.0, 159.5, 127.5, 320, 256).unwrap();
        let cam = Camera { intrinsics: intr, pose: Pose::identity() };
        let cams = vec![cam, cam];
        let mut map = FeatureMap::zeros(COARSE_W, COARSE_H, FEAT_CHANNELS);
        let mut rng = Stream::new(3, "map");
        for v in map.data.iter_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let maps: Vec<&FeatureMap> = vec![&map, &map];
        let views = ViewIndexSet { reference: 0, sources: vec![1] };
        let grid = DepthHypothesisGrid { start: 0.5, step: 0.05, count: 8 };
        let vol = build_cost_volume(&views, &cams, &maps, &grid).unwrap();
        assert!(vol.cost.data().iter().all(|&v| v.abs() < 1e-18));
    }

    #[test]
    fn cost_is_nonnegative_everywhere() {
        let spec = generate_scene(51, 2, 8);
        let cams = spec.cameras();
        let ex = Extractor::Handcrafted32 { seed: 1 };
        let pairs: Vec<_> = (0..8).map(|f| extract_features(&render_image(&spec, f), &ex).unwrap()).collect();
        let maps: Vec<&FeatureMap> = pairs.iter().map(|p| &p.coarse).collect();
        let kf: Vec<usize> = (0..8).collect();
        let views = crate::features::select_source_views(&kf, 4, 4);
        let grid = DepthHypothesisGrid { start: 0.5, step: 0.25, count: 16 };
        let vol = build_cost_volume(&views, &cams, &maps, &grid).unwrap();
        assert!(vol.cost.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn textured_plane_argmin_at_true_depth() {
        // fronto-parallel textured wall at z = 2.0 seen by three cameras
        // with +-0.4 m baseline
        let intr = CameraIntrinsics::new(277.0, 277.0, 159.5, 127.5, 320, 256).unwrap();
        let spec = SceneSpec {
            seed: 99,
            room: TexturedBox {
                shape: Box3 {
                    min: Vector3::new(-8.0, -8.0, -1.0),
                    max: Vector3::new(8.0, 8.0, 2.0),
                },
                face_textures: [1, 2, 3, 4, 5, 6],
            },
            boxes: vec![],
            trajectory: vec![
                Pose::identity(),
                Pose { rotation: nalgebra::Matrix3::identity(), translation: Vector3::new(-0.8, 0.0, 0.0) },
                Pose { rotation: nalgebra::Matrix3::identity(), translation: Vector3::new(0.8, 0.0, 0.0) },
                Pose { rotation: nalgebra::Matrix3::identity(), translation: Vector3::new(0.0, -0.6, 0.0) },
                Pose { rotation: nalgebra::Matrix3::identity(), translation: Vector3::new(0.0, 0.6, 0.0) },
            ],
            intrinsics: intr,
            textured: true,
        };
        let cams = spec.cameras();
        let ex = Extractor::Handcrafted32 { seed: 5 };
        let pairs: Vec<_> = (0..5).map(|f| extract_features(&render_image(&spec, f), &ex).unwrap()).collect();
        let maps: Vec<&FeatureMap> = pairs.iter().map(|p| &p.coarse).collect();
        let views = ViewIndexSet { reference: 0, sources: vec![1, 2, 3, 4] };
        let grid = DepthHypothesisGrid::default();
        let vol = build_cost_volume(&views, &cams, &maps, &grid).unwrap();
        // argmin over hypotheses of the mean channel cost; the true surface
        // depth 2.0 m sits exactly at hypothesis 30
        let n = vol.width * vol.height;
        let l = grid.count;
        let c = vol.channels;
        let mut hits = 0;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for li in 0..l {
                let row = &vol.cost.data()[(i * l + li) * c..(i * l + li + 1) * c];
                let mean: f64 = row.iter().sum::<f64>() / c as f64;
                if mean < best.0 {
                    best = (mean, li);
                }
            }
            if best.1 == 30 {
                hits += 1;
            }
        }
        assert!(
            hits as f64 >= 0.95 * n as f64,
            "argmin at true depth for only {hits}/{n} pixels"
        );
    }

    #[test]
    fn one_hot_and_uniform_probability_regression() {
        let grid = DepthHypothesisGrid::default();
        let mut one_hot = vec![0.0; grid.count];
        one_hot[10] = 1.0;
        assert_eq!(soft_argmin(&grid, &one_hot), 1.0);
        let uniform = vec![1.0 / grid.count as f64; grid.count];
        assert!((soft_argmin(&grid, &uniform) - 2.875).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_regularizer_predicts_uniform_mean() {
        let mut store = ParameterStore::new(7);
        let net = reg_net(&mut store);
        // zero every conv weight and bias: scores constant, softmax uniform
        for path in ["costreg.conv0.w", "costreg.conv0.b", "costreg.conv1.w", "costreg.conv1.b", "costreg.conv2.w", "costreg.conv2.b"] {
            let t = store.get(path).unwrap().clone();
            store.insert(path, Tensor::zeros(t.shape()));
        }
        let grid = DepthHypothesisGrid::default();
        let mut rng = Stream::new(9, "cv");
        let n = COARSE_DEPTH_SIZE * COARSE_DEPTH_SIZE;
        let mut cost = Tensor::zeros(&[n, grid.count, FEAT_CHANNELS]);
        for v in cost.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        let vol = CostVolume {
            width: COARSE_DEPTH_SIZE,
            height: COARSE_DEPTH_SIZE,
            grid,
            channels: FEAT_CHANNELS,
            cost,
        };
        let pred = regularize_and_predict(&vol, &store, &net).unwrap();
        for i in 0..n {
            assert!((pred.depth.depth[i] - 2.875).abs() < 1e-9);
            let row = &pred.prob.data()[i * grid.count..(i + 1) * grid.count];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn predictions_stay_inside_sweep_range() {
        let mut store = ParameterStore::new(17);
        let net = reg_net(&mut store);
        let grid = DepthHypothesisGrid { start: 0.5, step: 0.05, count: 24 };
        let mut rng = Stream::new(19, "cv2");
        let n = 64;
        let mut cost = Tensor::zeros(&[n, grid.count, FEAT_CHANNELS]);
        for v in cost.data_mut() {
            *v = rng.uniform(0.0, 2.0);
        }
        let vol = CostVolume { width: 8, height: 8, grid, channels: FEAT_CHANNELS, cost };
        let pred = regularize_and_predict(&vol, &store, &net).unwrap();
        for &d in &pred.depth.depth {
            assert!(d >= grid.start && d <= grid.last());
        }
    }

    #[test]
    fn regularizer_gradient_check_through_l1_loss() {
        let mut store = ParameterStore::new(23);
        let net = reg_net(&mut store);
        let grid = DepthHypothesisGrid { start: 0.5, step: 0.05, count: 12 };
        let mut rng = Stream::new(29, "gc");
        let n = 6;
        let mut cost = Tensor::zeros(&[n, grid.count, FEAT_CHANNELS]);
        for v in cost.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        let target: Vec<f64> = (0..n).map(|_| rng.uniform(0.6, 1.0)).collect();
        let eval = |store: &ParameterStore| -> (f64, Option<GradMap>) {
            let mut tape = Tape::new(store);
            let (depth, _probs) = regularize_tape(&mut tape, cost.clone(), &grid, &net).unwrap();
            let loss = tape
                .masked_l1_mean(depth, target.clone(), vec![true; n])
                .unwrap();
            let v = tape.value(loss).item();
            (v, Some(tape.backward(loss).unwrap()))
        };
        let (_, grads) = eval(&store);
        let err = finite_diff_max_rel_err(&store, &grads.unwrap(), 1e-5, |s| eval(s).0);
        assert!(err < 1e-5, "regularizer grad err {err}");
    }
}
