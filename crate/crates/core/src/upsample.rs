//! Coarse-to-fine upsampling of refined depth to image resolution.
//!
//! Each stage nearest-neighbor upsamples the current depth to the next
//! guidance resolution, concatenates the guidance (coarse features, fine
//! features, then the original image), and passes the stack through a small
//! conv net that emits nine softmax-normalized weights per pixel. The
//! smoothed depth is the weighted sum of the 3x3 neighborhood (replicate
//! borders), renormalized over valid neighbors, so outputs always stay
//! inside the local min/max envelope.

use crate::diffkern::{Conv2dNet, PadMode, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureMapPair, Image, FEAT_CHANNELS, IMG_H, IMG_W};
use crate::geometry::{DepthMap, FeatureMap};
use std::rc::Rc;

/// Nearest-neighbor resample to any size; validity travels with depths.
pub fn nn_resample(depth: &DepthMap, target_w: usize, target_h: usize) -> DepthMap {
    let mut out = DepthMap::new_invalid(target_w, target_h);
    for y in 0..target_h {
        let sy = (((y as f64 + 0.5) * depth.height as f64 / target_h as f64).floor() as usize)
            .min(depth.height - 1);
        for x in 0..target_w {
            let sx = (((x as f64 + 0.5) * depth.width as f64 / target_w as f64).floor() as usize)
                .min(depth.width - 1);
            let i = sy * depth.width + sx;
            out.depth[y * target_w + x] = depth.depth[i];
            out.valid[y * target_w + x] = depth.valid[i];
        }
    }
    out
}

/// Nearest-neighbor upsample; the target must not shrink either axis.
pub fn nn_upsample(depth: &DepthMap, target_w: usize, target_h: usize) -> Result<DepthMap> {
    if target_w < depth.width || target_h < depth.height {
        return Err(Error::BadSize(format!(
            "nn_upsample target {target_w}x{target_h} smaller than source {}x{}",
            depth.width, depth.height
        )));
    }
    Ok(nn_resample(depth, target_w, target_h))
}

/// Output validity of the propagation smoothing: a pixel survives when any
/// 3x3 neighbor (replicate borders) is valid.
pub fn smoothed_validity(valid: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            'probe: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let ny = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let nx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    if valid[ny * w + nx] {
                        out[y * w + x] = true;
                        break 'probe;
                    }
                }
            }
        }
    }
    out
}

/// One smoothing application on a tape; returns the smoothed values (zeros
/// where no valid neighbor exists — pair with [`smoothed_validity`]).
pub fn propagation_smooth_tape(
    tape: &mut Tape,
    depth: &DepthMap,
    guidance: &FeatureMap,
    net: &Conv2dNet,
) -> Result<Var> {
    if guidance.width != depth.width || guidance.height != depth.height {
        return Err(Error::ShapeMismatch(format!(
            "guidance {}x{} vs depth {}x{}",
            guidance.width, guidance.height, depth.width, depth.height
        )));
    }
    let (w, h, c) = (depth.width, depth.height, guidance.channels);
    if net.widths[0] != c + 1 || *net.widths.last().unwrap() != 9 {
        return Err(Error::ShapeMismatch(format!(
            "smoothing net widths {:?} need input {} and output 9",
            net.widths,
            c + 1
        )));
    }
    // stack guidance and depth (invalid depths enter as 0; the weighted sum
    // renormalizes over valid neighbors)
    let mut stacked = Tensor::zeros(&[h, w, c + 1]);
    {
        let out = stacked.data_mut();
        for i in 0..w * h {
            out[i * (c + 1)..i * (c + 1) + c].copy_from_slice(&guidance.data[i * c..(i + 1) * c]);
            out[i * (c + 1) + c] = if depth.valid[i] { depth.depth[i] } else { 0.0 };
        }
    }
    let x = tape.constant(stacked);
    let logits = net.forward_tape(tape, x)?;
    tape.prop_smooth(logits, Rc::new(depth.depth.clone()), Rc::new(depth.valid.clone()), h, w)
}

/// Pure smoothing: values plus recomputed validity.
pub fn propagation_smooth(
    depth: &DepthMap,
    guidance: &FeatureMap,
    store: &ParameterStore,
    net: &Conv2dNet,
) -> Result<DepthMap> {
    let mut tape = Tape::new(store);
    let out = propagation_smooth_tape(&mut tape, depth, guidance, net)?;
    let values = tape.value(out).data().to_vec();
    let valid = smoothed_validity(&depth.valid, depth.width, depth.height);
    let mut map = DepthMap::new_invalid(depth.width, depth.height);
    for i in 0..values.len() {
        if valid[i] {
            map.depth[i] = values[i];
            map.valid[i] = true;
        }
    }
    map.assert_finite("propagation_smooth")?;
    Ok(map)
}

/// The three stage nets: guided by coarse features, fine features, and the
/// original image.
#[derive(Debug, Clone)]
pub struct UpsampleNets {
    pub stage1: Conv2dNet,
    pub stage2: Conv2dNet,
    pub stage3: Conv2dNet,
}

impl UpsampleNets {
    pub fn register(store: &mut ParameterStore, hidden: &[usize; 3]) -> Self {
        let mk = |store: &mut ParameterStore, name: &str, cin: usize, hidden: &[usize; 3]| {
            Conv2dNet::register(
                store,
                name,
                &[cin, hidden[0], hidden[1], hidden[2], 9],
                &[1, 1, 1, 1],
                PadMode::Replicate,
            )
        };
        UpsampleNets {
            stage1: mk(store, "upsample.s1", FEAT_CHANNELS + 1, hidden),
            stage2: mk(store, "upsample.s2", FEAT_CHANNELS + 1, hidden),
            stage3: mk(store, "upsample.s3", 3 + 1, hidden),
        }
    }
}

fn image_as_guidance(image: &Image) -> &FeatureMap {
    image
}

/// Full coarse-to-fine chain: 56 -> 80x64 -> 160x128 -> 320x256, smoothing
/// after every nearest-neighbor upsample.
pub fn coarse_to_fine(
    depth56: &DepthMap,
    fmaps: &FeatureMapPair,
    image: &Image,
    store: &ParameterStore,
    nets: &UpsampleNets,
) -> Result<DepthMap> {
    let d80 = nn_upsample(depth56, fmaps.coarse.width, fmaps.coarse.height)?;
    let s80 = propagation_smooth(&d80, &fmaps.coarse, store, &nets.stage1)?;
    let d160 = nn_upsample(&s80, fmaps.fine.width, fmaps.fine.height)?;
    let s160 = propagation_smooth(&d160, &fmaps.fine, store, &nets.stage2)?;
    let d320 = nn_upsample(&s160, IMG_W, IMG_H)?;
    propagation_smooth(&d320, image_as_guidance(image), store, &nets.stage3)
}

/// Intermediate results of the chain, used when the trainer supervises
/// every stage.
pub struct UpsampleStages {
    pub input80: DepthMap,
    pub input160: DepthMap,
    pub input320: DepthMap,
    pub out80: DepthMap,
    pub out160: DepthMap,
    pub out320: DepthMap,
}

pub fn coarse_to_fine_stages(
    depth56: &DepthMap,
    fmaps: &FeatureMapPair,
    image: &Image,
    store: &ParameterStore,
    nets: &UpsampleNets,
) -> Result<UpsampleStages> {
    let input80 = nn_upsample(depth56, fmaps.coarse.width, fmaps.coarse.height)?;
    let out80 = propagation_smooth(&input80, &fmaps.coarse, store, &nets.stage1)?;
    let input160 = nn_upsample(&out80, fmaps.fine.width, fmaps.fine.height)?;
    let out160 = propagation_smooth(&input160, &fmaps.fine, store, &nets.stage2)?;
    let input320 = nn_upsample(&out160, IMG_W, IMG_H)?;
    let out320 = propagation_smooth(&input320, image_as_guidance(image), store, &nets.stage3)?;
    Ok(UpsampleStages { input80, input160, input320, out80, out160, out320 })
}
