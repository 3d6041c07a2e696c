//! Camera models, projection, rays, and image-plane sampling.
//!
//! Convention used everywhere in the engine: right-handed camera frame with
//! +z forward, +x right, +y down; pixel origin at the top-left corner and
//! pixel centers at integer coordinates. Poses are stored camera-to-world.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

pub const MIN_DEPTH: f64 = 1e-9;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Config(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(Error::Config(format!(
                "principal point ({cx}, {cy}) outside image {width}x{height}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }

    /// Intrinsics of the same camera resampled to a `new_w` x `new_h` pixel
    /// lattice covering the identical field of view. Pixel centers sit at
    /// integer coordinates in both lattices.
    pub fn rescaled(&self, new_w: usize, new_h: usize) -> CameraIntrinsics {
        let sx = new_w as f64 / self.width as f64;
        let sy = new_h as f64 / self.height as f64;
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width: new_w,
            height: new_h,
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Camera-to-world rotation.
    pub rotation: Matrix3<f64>,
    /// Camera origin in world coordinates (meters).
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let p = Pose { rotation, translation };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let gram = self.rotation.transpose() * self.rotation;
        let err = (gram - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::Config(format!("rotation not orthonormal (err {err:.3e})")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    /// World point into the camera frame.
    #[inline]
    pub fn world_to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_world - self.translation)
    }

    /// Camera-frame point into the world.
    #[inline]
    pub fn camera_to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    /// Camera principal axis (+z) in world coordinates.
    #[inline]
    pub fn principal_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Pose::new(rotation, translation)
    }
}

/// Full-resolution intrinsics plus pose for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

/// Metric depth map with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn from_depths(width: usize, height: usize, depth: Vec<f64>) -> Self {
        assert_eq!(depth.len(), width * height);
        let valid = depth.iter().map(|&d| d > 0.0).collect();
        DepthMap { width, height, depth, valid }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        if self.valid[i] {
            Some(self.depth[i])
        } else {
            None
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        let i = y * self.width + x;
        self.depth[i] = d;
        self.valid[i] = d > 0.0;
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.depth[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn assert_finite(&self, stage: &str) -> Result<()> {
        for (i, &d) in self.depth.iter().enumerate() {
            if self.valid[i] && !d.is_finite() {
                return Err(Error::NumericFailure {
                    stage: stage.to_string(),
                    detail: format!("non-finite depth at pixel {}", i),
                });
            }
        }
        Ok(())
    }
}

/// Project a world point. Returns the pixel and the camera-frame z depth.
pub fn project(
    intr: &CameraIntrinsics,
    pose: &Pose,
    p_world: &Vector3<f64>,
) -> Result<(Vector2<f64>, f64)> {
    let pc = pose.world_to_camera(p_world);
    if pc.z <= MIN_DEPTH {
        return Err(Error::NonPositiveDepth(pc.z));
    }
    let u = intr.fx * pc.x / pc.z + intr.cx;
    let v = intr.fy * pc.y / pc.z + intr.cy;
    Ok((Vector2::new(u, v), pc.z))
}

/// Lift a pixel with a z depth to a world point.
pub fn back_project(
    intr: &CameraIntrinsics,
    pose: &Pose,
    pixel: &Vector2<f64>,
    depth: f64,
) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(Error::NonPositiveDepth(depth));
    }
    let pc = Vector3::new(
        (pixel.x - intr.cx) / intr.fx * depth,
        (pixel.y - intr.cy) / intr.fy * depth,
        depth,
    );
    Ok(pose.camera_to_world(&pc))
}

/// Unit world-frame viewing ray through a pixel. The camera-frame z
/// component of the un-normalized ray is 1, so a point at z depth `d` sits
/// at `origin + d * norm * ray` with `norm = ||((u-cx)/fx, (v-cy)/fy, 1)||`.
pub fn viewing_ray(intr: &CameraIntrinsics, pose: &Pose, pixel: &Vector2<f64>) -> Vector3<f64> {
    let dir_cam = Vector3::new(
        (pixel.x - intr.cx) / intr.fx,
        (pixel.y - intr.cy) / intr.fy,
        1.0,
    );
    (pose.rotation * dir_cam).normalize()
}

/// Camera-frame z component of the unit viewing ray through a pixel.
/// Moving a point by `delta` along its viewing ray changes its z depth by
/// `delta * ray_z`.
pub fn ray_z(intr: &CameraIntrinsics, pixel: &Vector2<f64>) -> f64 {
    let x = (pixel.x - intr.cx) / intr.fx;
    let y = (pixel.y - intr.cy) / intr.fy;
    1.0 / (x * x + y * y + 1.0).sqrt()
}

/// Row-major H x W x C feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }
}

/// Bilinear sample with clamp-to-border semantics; exact at integer
/// coordinates, linear along each axis, constant outside the valid domain.
pub fn bilinear_sample(map: &FeatureMap, pt: &Vector2<f64>, out: &mut [f64]) {
    debug_assert_eq!(out.len(), map.channels);
    let x = pt.x.clamp(0.0, (map.width - 1) as f64);
    let y = pt.y.clamp(0.0, (map.height - 1) as f64);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(map.width - 1);
    let y1 = (y0 + 1).min(map.height - 1);
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w10 = fx * (1.0 - fy);
    let w01 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    let p00 = map.pixel(x0, y0);
    let p10 = map.pixel(x1, y0);
    let p01 = map.pixel(x0, y1);
    let p11 = map.pixel(x1, y1);
    for c in 0..map.channels {
        out[c] = w00 * p00[c] + w10 * p10[c] + w01 * p01[c] + w11 * p11[c];
    }
}

/// Convenience wrapper returning an owned vector.
pub fn bilinear_sample_vec(map: &FeatureMap, pt: &Vector2<f64>) -> Vec<f64> {
    let mut out = vec![0.0; map.channels];
    bilinear_sample(map, pt, &mut out);
    out
}

pub mod io {
    //! Plain-text pose and intrinsics files.
    //!
    //! Pose file: one block per camera, line 1 `frame <id>`, lines 2-5 the
    //! 4x4 camera-to-world matrix row-major. Intrinsics file: one line per
    //! frame, `fx fy cx cy width height`, ordered by frame index.

    use super::*;
    use std::fmt::Write as _;
    use std::path::Path;

    pub fn write_poses(path: &Path, poses: &[(usize, Pose)]) -> Result<()> {
        let mut s = String::new();
        for (id, pose) in poses {
            writeln!(s, "frame {id}").unwrap();
            let m = pose.to_matrix();
            for r in 0..4 {
                writeln!(s, "{:.17e} {:.17e} {:.17e} {:.17e}", m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)]).unwrap();
            }
        }
        std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_poses(path: &Path) -> Result<Vec<(usize, Pose)>> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let p = path.display().to_string();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut out = Vec::new();
        while let Some(header) = lines.next() {
            let mut parts = header.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("frame"), Some(id)) => {
                    let id: usize = id
                        .parse()
                        .map_err(|_| Error::parse(&p, format!("bad frame id `{id}`")))?;
                    let mut m = Matrix4::identity();
                    for r in 0..4 {
                        let row = lines
                            .next()
                            .ok_or_else(|| Error::parse(&p, "truncated pose block"))?;
                        let vals: Vec<f64> = row
                            .split_whitespace()
                            .map(|t| t.parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|e| Error::parse(&p, format!("bad matrix row: {e}")))?;
                        if vals.len() != 4 {
                            return Err(Error::parse(&p, "pose matrix row must have 4 entries"));
                        }
                        for c in 0..4 {
                            m[(r, c)] = vals[c];
                        }
                    }
                    out.push((id, Pose::from_matrix(&m)?));
                }
                _ => return Err(Error::parse(&p, format!("expected `frame <id>`, got `{header}`"))),
            }
        }
        Ok(out)
    }

    pub fn write_intrinsics(path: &Path, intr: &[CameraIntrinsics]) -> Result<()> {
        let mut s = String::new();
        for k in intr {
            writeln!(s, "{:.17e} {:.17e} {:.17e} {:.17e} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height).unwrap();
        }
        std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_intrinsics(path: &Path) -> Result<Vec<CameraIntrinsics>> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let p = path.display().to_string();
        let mut out = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 6 {
                return Err(Error::parse(&p, "intrinsics line must have 6 fields"));
            }
            let f = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::parse(&p, format!("bad float `{s}`: {e}")))
            };
            let u = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::parse(&p, format!("bad int `{s}`: {e}")))
            };
            out.push(CameraIntrinsics::new(f(t[0])?, f(t[1])?, f(t[2])?, f(t[3])?, u(t[4])?, u(t[5])?)?);
        }
        Ok(out)
    }
}
