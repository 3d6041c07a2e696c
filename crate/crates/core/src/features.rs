//! Per-image two-scale feature maps and multi-view matching features.
//!
//! The matching feature of a 3D point is the per-channel population
//! variance (or mean, for the ablation) of the features bilinearly sampled
//! at the point's projection into every view of its index set. Low variance
//! across views signals a photo-consistent surface point.

use crate::diffkern::{Conv2dNet, PadMode, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample, project, Camera, FeatureMap};
use crate::rng::Stream;
use nalgebra::Vector3;

pub const IMG_W: usize = 320;
pub const IMG_H: usize = 256;
pub const COARSE_W: usize = 80;
pub const COARSE_H: usize = 64;
pub const FINE_W: usize = 160;
pub const FINE_H: usize = 128;
pub const FEAT_CHANNELS: usize = 32;

/// RGB image; 3 channels in [0, 1].
pub type Image = FeatureMap;

/// Coarse (80x64) and fine (160x128) 32-channel maps for one image.
#[derive(Debug, Clone)]
pub struct FeatureMapPair {
    pub coarse: FeatureMap,
    pub fine: FeatureMap,
}

/// Reference frame id plus its source frame ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewIndexSet {
    pub reference: usize,
    pub sources: Vec<usize>,
}

impl ViewIndexSet {
    /// Reference first, then sources: the full index set.
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.reference).chain(self.sources.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.sources.len() + 1
    }
}

/// Pick up to `m` source views for the keyframe at position `n`: the two
/// previous and two next keyframes, with any deficit near the sequence ends
/// filled from the available side.
pub fn select_source_views(keyframes: &[usize], n: usize, m: usize) -> ViewIndexSet {
    assert!(!keyframes.is_empty(), "keyframe list must be non-empty");
    assert!(n < keyframes.len());
    let count = keyframes.len();
    let want_prev = m / 2;
    let want_next = m - want_prev;
    let avail_prev = n;
    let avail_next = count - 1 - n;
    let mut take_prev = want_prev.min(avail_prev);
    let mut take_next = want_next.min(avail_next);
    let deficit = m.saturating_sub(take_prev + take_next);
    if deficit > 0 {
        let extra_prev = (avail_prev - take_prev).min(deficit);
        take_prev += extra_prev;
        take_next += (deficit - extra_prev).min(avail_next - take_next);
    }
    let mut sources: Vec<usize> = (n - take_prev..n).map(|i| keyframes[i]).collect();
    sources.extend((n + 1..=n + take_next).map(|i| keyframes[i]));
    ViewIndexSet { reference: keyframes[n], sources }
}

/// Feature extractor choice.
#[derive(Debug, Clone)]
pub enum Extractor {
    /// Fixed filter bank: luma, Sobel pair, gradient magnitude and four
    /// oriented line responses per scale, lifted to 32 channels by a seeded
    /// orthogonal mixing matrix.
    Handcrafted32 { seed: u64 },
    /// Four-layer strided conv stack with randomly initialized (untrained)
    /// weights.
    Learned { seed: u64 },
}

impl Extractor {
    pub fn from_config(name: &str, seed: u64) -> Result<Extractor> {
        match name {
            "handcrafted32" => Ok(Extractor::Handcrafted32 { seed }),
            "learned" => Ok(Extractor::Learned { seed }),
            other => Err(Error::Config(format!("unknown extractor `{other}`"))),
        }
    }
}

/// Extract both feature scales for a 320x256 image.
pub fn extract_features(image: &Image, extractor: &Extractor) -> Result<FeatureMapPair> {
    if image.width != IMG_W || image.height != IMG_H || image.channels != 3 {
        return Err(Error::BadImageSize {
            expected_w: IMG_W,
            expected_h: IMG_H,
            got_w: image.width,
            got_h: image.height,
        });
    }
    match extractor {
        Extractor::Handcrafted32 { seed } => Ok(FeatureMapPair {
            coarse: handcrafted_scale(image, COARSE_W, COARSE_H, *seed),
            fine: handcrafted_scale(image, FINE_W, FINE_H, *seed),
        }),
        Extractor::Learned { seed } => learned_features(image, *seed),
    }
}

fn luma_downsampled(image: &Image, w: usize, h: usize) -> Vec<f64> {
    let bx = image.width / w;
    let by = image.height / h;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for sy in 0..by {
                for sx in 0..bx {
                    let p = image.pixel(x * bx + sx, y * by + sy);
                    acc += 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                }
            }
            out[y * w + x] = acc / (bx * by) as f64;
        }
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
const LINE_0: [[f64; 3]; 3] = [[-1.0, -1.0, -1.0], [2.0, 2.0, 2.0], [-1.0, -1.0, -1.0]];
const LINE_90: [[f64; 3]; 3] = [[-1.0, 2.0, -1.0], [-1.0, 2.0, -1.0], [-1.0, 2.0, -1.0]];
const LINE_45: [[f64; 3]; 3] = [[-1.0, -1.0, 2.0], [-1.0, 2.0, -1.0], [2.0, -1.0, -1.0]];
const LINE_135: [[f64; 3]; 3] = [[2.0, -1.0, -1.0], [-1.0, 2.0, -1.0], [-1.0, -1.0, 2.0]];

fn filter3(luma: &[f64], w: usize, h: usize, k: &[[f64; 3]; 3], x: usize, y: usize) -> f64 {
    let mut acc = 0.0;
    for (ky, row) in k.iter().enumerate() {
        let sy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
        for (kx, &kv) in row.iter().enumerate() {
            let sx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
            acc += kv * luma[sy * w + sx];
        }
    }
    acc
}

const BASE_CHANNELS: usize = 8;

/// Orthonormal columns of a seeded random 32x8 matrix (Gram-Schmidt on
/// Gaussian draws).
fn mixing_matrix(seed: u64) -> Vec<f64> {
    let mut rng = Stream::new(seed, "features.mixing");
    let mut cols: Vec<Vec<f64>> = (0..BASE_CHANNELS)
        .map(|_| (0..FEAT_CHANNELS).map(|_| rng.normal()).collect())
        .collect();
    for i in 0..BASE_CHANNELS {
        for j in 0..i {
            let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            for k in 0..FEAT_CHANNELS {
                let v = cols[j][k];
                cols[i][k] -= dot * v;
            }
        }
        let norm: f64 = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in cols[i].iter_mut() {
            *v /= norm;
        }
    }
    // row-major [FEAT_CHANNELS x BASE_CHANNELS]
    let mut m = vec![0.0; FEAT_CHANNELS * BASE_CHANNELS];
    for c in 0..FEAT_CHANNELS {
        for (b, col) in cols.iter().enumerate() {
            m[c * BASE_CHANNELS + b] = col[c];
        }
    }
    m
}

fn handcrafted_scale(image: &Image, w: usize, h: usize, seed: u64) -> FeatureMap {
    let luma = luma_downsampled(image, w, h);
    let mix = mixing_matrix(seed);
    let mut out = FeatureMap::zeros(w, h, FEAT_CHANNELS);
    let mut base = [0.0; BASE_CHANNELS];
    for y in 0..h {
        for x in 0..w {
            let gx = filter3(&luma, w, h, &SOBEL_X, x, y);
            let gy = filter3(&luma, w, h, &SOBEL_Y, x, y);
            base[0] = luma[y * w + x];
            base[1] = gx;
            base[2] = gy;
            base[3] = (gx * gx + gy * gy).sqrt();
            base[4] = filter3(&luma, w, h, &LINE_0, x, y);
            base[5] = filter3(&luma, w, h, &LINE_90, x, y);
            base[6] = filter3(&luma, w, h, &LINE_45, x, y);
            base[7] = filter3(&luma, w, h, &LINE_135, x, y);
            let px = out.pixel_mut(x, y);
            for c in 0..FEAT_CHANNELS {
                let mut acc = 0.0;
                for b in 0..BASE_CHANNELS {
                    acc += mix[c * BASE_CHANNELS + b] * base[b];
                }
                px[c] = acc;
            }
        }
    }
    out
}

fn learned_features(image: &Image, seed: u64) -> Result<FeatureMapPair> {
    // the extractor owns its weights; they are seeded, never trained
    let mut store = ParameterStore::new(seed ^ 0x6665_6174);
    let trunk_fine = Conv2dNet::register(
        &mut store,
        "extract.fine",
        &[3, 16, FEAT_CHANNELS],
        &[2, 1],
        PadMode::Replicate,
    );
    let trunk_coarse = Conv2dNet::register(
        &mut store,
        "extract.coarse",
        &[FEAT_CHANNELS, FEAT_CHANNELS, FEAT_CHANNELS],
        &[2, 1],
        PadMode::Replicate,
    );
    let x = Tensor::new(vec![IMG_H, IMG_W, 3], image.data.clone());
    let fine_t = trunk_fine.forward(&store, &x)?;
    let coarse_t = trunk_coarse.forward(&store, &fine_t)?;
    let fine = FeatureMap {
        width: FINE_W,
        height: FINE_H,
        channels: FEAT_CHANNELS,
        data: fine_t.into_data(),
    };
    let coarse = FeatureMap {
        width: COARSE_W,
        height: COARSE_H,
        channels: FEAT_CHANNELS,
        data: coarse_t.into_data(),
    };
    Ok(FeatureMapPair { coarse, fine })
}

/// Per-point multi-view aggregation mode; `Mean` is the ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Variance,
    Mean,
}

/// What to do with views whose projection leaves the sampling domain.
/// Point-cloud and hypothesis features drop them (the index set shrinks);
/// plane-sweep costs keep every view in front of the camera and sample with
/// border clamping so the variance stays defined across the whole
/// hypothesis range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewInclusion {
    ExcludeOutside,
    ClampAlways,
}

/// Reusable buffers for multi-view feature aggregation.
#[derive(Debug, Default)]
pub struct VarianceScratch {
    samples: Vec<f64>,
    sample_count: usize,
}

/// How far outside the sampling domain a projection may fall while still
/// contributing (clamped); beyond one pixel the view is excluded.
const BORDER_SLACK: f64 = 1.0;

/// Per-channel population variance (or mean) of the features sampled at
/// `p`'s projection into every view of the set. Views behind the camera or
/// projecting more than one pixel outside the map are excluded and the
/// denominator shrinks accordingly; a single surviving view yields zeros
/// under `Variance`.
pub fn multiview_feature_into(
    p: &Vector3<f64>,
    views: &ViewIndexSet,
    cams: &[Camera],
    maps: &[&FeatureMap],
    agg: Aggregation,
    inclusion: ViewInclusion,
    scratch: &mut VarianceScratch,
    out: &mut [f64],
) -> Result<usize> {
    let channels = out.len();
    scratch.samples.clear();
    scratch.sample_count = 0;
    for id in views.all() {
        let cam = &cams[id];
        let map = maps[id];
        debug_assert_eq!(map.channels, channels);
        let px = match project(&cam.intrinsics, &cam.pose, p) {
            Ok((px, _z)) => px,
            Err(_) => continue,
        };
        // full-resolution pixel to map coordinates
        let sx = map.width as f64 / cam.intrinsics.width as f64;
        let sy = map.height as f64 / cam.intrinsics.height as f64;
        let mx = (px.x + 0.5) * sx - 0.5;
        let my = (px.y + 0.5) * sy - 0.5;
        if inclusion == ViewInclusion::ExcludeOutside
            && (mx < -BORDER_SLACK
                || mx > map.width as f64 - 1.0 + BORDER_SLACK
                || my < -BORDER_SLACK
                || my > map.height as f64 - 1.0 + BORDER_SLACK)
        {
            continue;
        }
        let start = scratch.samples.len();
        scratch.samples.resize(start + channels, 0.0);
        bilinear_sample(map, &nalgebra::Vector2::new(mx, my), &mut scratch.samples[start..]);
        scratch.sample_count += 1;
    }
    let n = scratch.sample_count;
    if n == 0 {
        return Err(Error::NoValidView);
    }
    let survivors = n;
    let inv = 1.0 / n as f64;
    // two-pass: mean, then centered second moment (non-negative by form)
    for c in 0..channels {
        let mut mean = 0.0;
        for s in 0..n {
            mean += scratch.samples[s * channels + c];
        }
        mean *= inv;
        match agg {
            Aggregation::Mean => out[c] = mean,
            Aggregation::Variance => {
                let mut acc = 0.0;
                for s in 0..n {
                    let d = scratch.samples[s * channels + c] - mean;
                    acc += d * d;
                }
                out[c] = acc * inv;
            }
        }
    }
    Ok(survivors)
}

/// Owned-result convenience wrapper for the variance feature.
pub fn variance_feature(
    p: &Vector3<f64>,
    views: &ViewIndexSet,
    cams: &[Camera],
    maps: &[&FeatureMap],
) -> Result<Vec<f64>> {
    let channels = maps[views.reference].channels;
    let mut out = vec![0.0; channels];
    let mut scratch = VarianceScratch::default();
    multiview_feature_into(
        p,
        views,
        cams,
        maps,
        Aggregation::Variance,
        ViewInclusion::ExcludeOutside,
        &mut scratch,
        &mut out,
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Pose};

    fn gray_image(v: f64) -> Image {
        let mut img = FeatureMap::zeros(IMG_W, IMG_H, 3);
        img.data.fill(v);
        img
    }

    fn test_cam() -> Camera {
        Camera {
            intrinsics: CameraIntrinsics::new(277.0, 277.0, 159.5, 127.5, IMG_W, IMG_H).unwrap(),
            pose: Pose::identity(),
        }
    }

    #[test]
    fn source_selection_middle_of_sequence() {
        let kf: Vec<usize> = (0..7).collect();
        let vs = select_source_views(&kf, 3, 4);
        assert_eq!(vs.reference, 3);
        assert_eq!(vs.sources, vec![1, 2, 4, 5]);
    }

    #[test]
    fn source_selection_at_sequence_ends() {
        let kf: Vec<usize> = (0..7).collect();
        let vs = select_source_views(&kf, 0, 4);
        assert_eq!(vs.sources, vec![1, 2, 3, 4]);
        let vs = select_source_views(&kf, 6, 4);
        assert_eq!(vs.sources, vec![2, 3, 4, 5]);
        let vs = select_source_views(&kf, 1, 4);
        assert_eq!(vs.sources, vec![0, 2, 3, 4]);
    }

    #[test]
    fn source_selection_degenerate_single_frame() {
        let vs = select_source_views(&[0], 0, 4);
        assert!(vs.sources.is_empty());
        assert_eq!(vs.len(), 1);
    }

    #[test]
    fn handcrafted_features_constant_on_constant_image() {
        let pair = extract_features(&gray_image(0.5), &Extractor::Handcrafted32 { seed: 7 }).unwrap();
        // constant luma: every filter response is zero, so features reduce
        // to the mixed luma channel and are identical at every pixel
        let first = pair.coarse.pixel(0, 0).to_vec();
        for y in 0..COARSE_H {
            for x in 0..COARSE_W {
                let px = pair.coarse.pixel(x, y);
                for c in 0..FEAT_CHANNELS {
                    assert!((px[c] - first[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let mut rng = crate::rng::Stream::new(5, "img");
        let mut img = gray_image(0.0);
        for v in img.data.iter_mut() {
            *v = rng.next_f64();
        }
        for ex in [Extractor::Handcrafted32 { seed: 3 }, Extractor::Learned { seed: 3 }] {
            let a = extract_features(&img, &ex).unwrap();
            let b = extract_features(&img, &ex).unwrap();
            assert_eq!(a.coarse.data, b.coarse.data);
            assert_eq!(a.fine.data, b.fine.data);
        }
    }

    #[test]
    fn learned_extractor_outputs_are_finite_on_random_images() {
        let ex = Extractor::Learned { seed: 11 };
        let mut rng = crate::rng::Stream::new(6, "fuzz");
        for _ in 0..100 {
            let mut img = gray_image(0.0);
            for v in img.data.iter_mut() {
                *v = rng.next_f64();
            }
            let pair = extract_features(&img, &ex).unwrap();
            assert_eq!(pair.coarse.width, COARSE_W);
            assert_eq!(pair.coarse.height, COARSE_H);
            assert_eq!(pair.fine.width, FINE_W);
            assert_eq!(pair.fine.height, FINE_H);
            assert!(pair.coarse.data.iter().all(|v| v.is_finite()));
            assert!(pair.fine.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let img = FeatureMap::zeros(100, 80, 3);
        assert!(matches!(
            extract_features(&img, &Extractor::Handcrafted32 { seed: 1 }),
            Err(Error::BadImageSize { .. })
        ));
    }

    #[test]
    fn variance_zero_for_identical_views() {
        // two co-located cameras with the same map see identical features
        let cams = vec![test_cam(), test_cam()];
        let mut map = FeatureMap::zeros(COARSE_W, COARSE_H, 4);
        let mut rng = crate::rng::Stream::new(9, "m");
        for v in map.data.iter_mut() {
            *v = rng.next_f64();
        }
        let maps: Vec<&FeatureMap> = vec![&map, &map];
        let views = ViewIndexSet { reference: 0, sources: vec![1] };
        let p = Vector3::new(0.1, -0.2, 2.0);
        let mut out = vec![0.0; 4];
        let mut scratch = VarianceScratch::default();
        multiview_feature_into(
            &p,
            &views,
            &cams,
            &maps,
            Aggregation::Variance,
            ViewInclusion::ExcludeOutside,
            &mut scratch,
            &mut out,
        )
        .unwrap();
        for v in out {
            assert!(v.abs() < 1e-20);
        }
    }

    #[test]
    fn variance_zero_for_single_view_set() {
        let cams = vec![test_cam()];
        let mut map = FeatureMap::zeros(COARSE_W, COARSE_H, 4);
        map.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let maps: Vec<&FeatureMap> = vec![&map];
        let views = ViewIndexSet { reference: 0, sources: vec![] };
        let out = variance_feature(&Vector3::new(0.0, 0.0, 1.5), &views, &cams, &maps[..]).unwrap();
        // population variance of one sample
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn variance_matches_two_pass_oracle() {
        // five views with slightly rotated poses, random maps
        let mut rng = crate::rng::Stream::new(33, "vf");
        let mut cams = Vec::new();
        let mut maps_owned = Vec::new();
        for i in 0..5 {
            let angle = 0.05 * (i as f64 - 2.0);
            let rot = nalgebra::Rotation3::from_euler_angles(0.0, angle, 0.0);
            cams.push(Camera {
                intrinsics: test_cam().intrinsics,
                pose: Pose::new(
                    rot.into_inner(),
                    Vector3::new(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0.0),
                )
                .unwrap(),
            });
            let mut map = FeatureMap::zeros(COARSE_W, COARSE_H, 6);
            for v in map.data.iter_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            maps_owned.push(map);
        }
        let maps: Vec<&FeatureMap> = maps_owned.iter().collect();
        let views = ViewIndexSet { reference: 0, sources: vec![1, 2, 3, 4] };
        for _ in 0..50 {
            let p = Vector3::new(rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4), rng.uniform(1.5, 4.0));
            let got = variance_feature(&p, &views, &cams, &maps).unwrap();
            // independent two-pass oracle over explicit per-view samples
            let mut samples: Vec<Vec<f64>> = Vec::new();
            for id in views.all() {
                let cam = &cams[id];
                if let Ok((px, _)) = project(&cam.intrinsics, &cam.pose, &p) {
                    let sx = COARSE_W as f64 / IMG_W as f64;
                    let sy = COARSE_H as f64 / IMG_H as f64;
                    let m = nalgebra::Vector2::new((px.x + 0.5) * sx - 0.5, (px.y + 0.5) * sy - 0.5);
                    if m.x >= -1.0 && m.x <= COARSE_W as f64 && m.y >= -1.0 && m.y <= COARSE_H as f64 {
                        samples.push(crate::geometry::bilinear_sample_vec(maps[id], &m));
                    }
                }
            }
            let n = samples.len() as f64;
            for c in 0..6 {
                let mean: f64 = samples.iter().map(|s| s[c]).sum::<f64>() / n;
                let var: f64 = samples.iter().map(|s| (s[c] - mean).powi(2)).sum::<f64>() / n;
                assert!((got[c] - var).abs() < 1e-10, "channel {c}: {} vs {var}", got[c]);
                assert!(got[c] >= 0.0);
            }
        }
    }

    #[test]
    fn variance_invariant_under_source_permutation() {
        let mut rng = crate::rng::Stream::new(44, "perm");
        let mut cams = Vec::new();
        let mut maps_owned = Vec::new();
        for _ in 0..5 {
            cams.push(test_cam());
            let mut map = FeatureMap::zeros(COARSE_W, COARSE_H, 8);
            for v in map.data.iter_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            maps_owned.push(map);
        }
        let maps: Vec<&FeatureMap> = maps_owned.iter().collect();
        let a = ViewIndexSet { reference: 0, sources: vec![1, 2, 3, 4] };
        let b = ViewIndexSet { reference: 0, sources: vec![4, 2, 1, 3] };
        let p = Vector3::new(0.2, 0.1, 2.5);
        let va = variance_feature(&p, &a, &cams, &maps).unwrap();
        let vb = variance_feature(&p, &b, &cams, &maps).unwrap();
        for c in 0..8 {
            assert!((va[c] - vb[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn no_view_sees_point_behind_all_cameras() {
        let cams = vec![test_cam(), test_cam()];
        let map = FeatureMap::zeros(COARSE_W, COARSE_H, 2);
        let maps: Vec<&FeatureMap> = vec![&map, &map];
        let views = ViewIndexSet { reference: 0, sources: vec![1] };
        let err = variance_feature(&Vector3::new(0.0, 0.0, -1.0), &views, &cams, &maps);
        assert!(matches!(err, Err(Error::NoValidView)));
    }
}
