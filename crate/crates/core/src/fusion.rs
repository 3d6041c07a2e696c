//! Depth-based multi-view consistency fusion.
//!
//! A depth pixel survives when enough other views agree with it: the
//! back-projected point, projected into view m, must find a stored depth
//! (nearest pixel) within a relative tolerance of the projected depth. A
//! view seeing a clearly nearer surface (the point is occluded there)
//! simply casts no vote. Surviving pixels are emitted as points with their
//! supporting view count; positions are the exact reference
//! back-projections by default so perfect inputs stay exactly on surface,
//! with averaging over agreeing observations available as an option.

use crate::error::{Error, Result};
use crate::geometry::{back_project, project, Camera, DepthMap};
use crate::parallel::par_chunk_map;
use nalgebra::{Vector2, Vector3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    /// Relative depth agreement threshold.
    pub rel_tol: f64,
    /// Minimum number of agreeing source views.
    pub min_consistent: usize,
    /// Average surviving positions over agreeing observations instead of
    /// keeping the reference back-projection.
    pub average_positions: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams { rel_tol: 0.03, min_consistent: 2, average_positions: false }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.rel_tol <= 0.0 {
            return Err(Error::Config(format!("fusion rel_tol must be positive, got {}", self.rel_tol)));
        }
        if self.min_consistent < 1 {
            return Err(Error::Config("fusion min_consistent must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fused point cloud: positions plus per-point supporting view counts
/// (reference view included) and the (frame, x, y) provenance of each
/// point.
#[derive(Debug, Clone, Default)]
pub struct FusedCloud {
    pub positions: Vec<Vector3<f64>>,
    pub support: Vec<u8>,
    pub provenance: Vec<(u32, u32, u32)>,
}

impl FusedCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Stored depth at a continuous pixel: bilinear interpolation of inverse
/// depth when the full 2x2 support is valid (exact for planar surfaces,
/// since inverse depth is linear in pixel coordinates on a plane),
/// otherwise the nearest valid pixel.
fn sample_depth(dm: &DepthMap, px: &Vector2<f64>) -> Option<f64> {
    let x = px.x.clamp(0.0, (dm.width - 1) as f64);
    let y = px.y.clamp(0.0, (dm.height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(dm.width - 1);
    let y1 = (y0 + 1).min(dm.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let all_valid = dm.valid[y0 * dm.width + x0]
        && dm.valid[y0 * dm.width + x1]
        && dm.valid[y1 * dm.width + x0]
        && dm.valid[y1 * dm.width + x1];
    if all_valid {
        let inv = |xx: usize, yy: usize| 1.0 / dm.depth[yy * dm.width + xx];
        let top = inv(x0, y0) * (1.0 - fx) + inv(x1, y0) * fx;
        let bot = inv(x0, y1) * (1.0 - fx) + inv(x1, y1) * fx;
        let blended = top * (1.0 - fy) + bot * fy;
        if blended > 0.0 {
            return Some(1.0 / blended);
        }
    }
    dm.at(x.round() as usize, y.round() as usize)
}

/// Fuse all depth maps into one cloud. Depth maps may be any resolution;
/// each frame uses its correspondingly rescaled intrinsics. Points are
/// emitted in (frame, row-major pixel) order.
pub fn fuse(depths: &[DepthMap], cams: &[Camera], params: &FusionParams) -> Result<FusedCloud> {
    params.validate()?;
    if depths.len() < 2 {
        return Err(Error::Config("fusion needs at least two views".into()));
    }
    assert_eq!(depths.len(), cams.len());
    let intr: Vec<_> = depths
        .iter()
        .zip(cams)
        .map(|(d, c)| c.intrinsics.rescaled(d.width, d.height))
        .collect();
    let per_frame: Vec<(Vec<Vector3<f64>>, Vec<u8>, Vec<(u32, u32, u32)>)> =
        par_chunk_map(depths.len(), 1, |range| {
        let n = range.start;
        let dm = &depths[n];
        let mut positions = Vec::new();
        let mut support = Vec::new();
        let mut provenance = Vec::new();
        for y in 0..dm.height {
            for x in 0..dm.width {
                let Some(d) = dm.at(x, y) else { continue };
                let p = match back_project(&intr[n], &cams[n].pose, &Vector2::new(x as f64, y as f64), d) {
                    Ok(p) => p,
                    Err(_) => continue,
                };
                let mut votes = 0usize;
                let mut pos_acc = p;
                for (m, dm2) in depths.iter().enumerate() {
                    if m == n {
                        continue;
                    }
                    let Ok((px, z)) = project(&intr[m], &cams[m].pose, &p) else {
                        continue;
                    };
                    let xi = px.x.round();
                    let yi = px.y.round();
                    if xi < 0.0 || yi < 0.0 || xi >= dm2.width as f64 || yi >= dm2.height as f64 {
                        continue;
                    }
                    let Some(stored) = sample_depth(dm2, &px) else {
                        continue;
                    };
                    // nearer stored depth means the point is occluded in m:
                    // no vote either way
                    if (stored - z).abs() / z < params.rel_tol {
                        votes += 1;
                        if params.average_positions {
                            if let Ok(q) = back_project(
                                &intr[m],
                                &cams[m].pose,
                                &Vector2::new(xi, yi),
                                stored,
                            ) {
                                pos_acc += q;
                            }
                        }
                    }
                }
                if votes >= params.min_consistent {
                    let position = if params.average_positions {
                        pos_acc / (votes as f64 + 1.0)
                    } else {
                        p
                    };
                    positions.push(position);
                    support.push((votes + 1).min(255) as u8);
                    provenance.push((n as u32, x as u32, y as u32));
                }
            }
        }
        (positions, support, provenance)
    });
    let mut cloud = FusedCloud::default();
    for (p, s, v) in per_frame {
        cloud.positions.extend(p);
        cloud.support.extend(s);
        cloud.provenance.extend(v);
    }
    Ok(cloud)
}
