//! Binary file formats: PFM depth maps, PPM images, PLY point clouds, and
//! the sparse-volume dump.

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use std::io::Write as _;
use std::path::Path;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

pub mod pfm {
    //! Little-endian grayscale PFM (`Pf`), rows stored bottom-up, meters.
    //! Invalid pixels are written as 0.0.

    use super::*;

    pub fn write(path: &Path, map: &DepthMap) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + map.width * map.height * 4);
        write!(buf, "Pf\n{} {}\n-1.0\n", map.width, map.height).unwrap();
        for y in (0..map.height).rev() {
            for x in 0..map.width {
                let i = y * map.width + x;
                let v = if map.valid[i] { map.depth[i] as f32 } else { 0.0f32 };
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<DepthMap> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let p = path.display().to_string();
        let parse = |d: &str| Error::parse(&p, d.to_string());
        // header: three whitespace-terminated tokens after the magic line
        let mut off = 0usize;
        let mut token = || -> Result<String> {
            while off < bytes.len() && bytes[off].is_ascii_whitespace() {
                off += 1;
            }
            let start = off;
            while off < bytes.len() && !bytes[off].is_ascii_whitespace() {
                off += 1;
            }
            if start == off {
                return Err(Error::parse(&p, "truncated header"));
            }
            let t = String::from_utf8_lossy(&bytes[start..off]).into_owned();
            off += 1; // single whitespace after each token
            Ok(t)
        };
        let magic = token()?;
        if magic != "Pf" {
            return Err(parse("not a grayscale PFM"));
        }
        let w: usize = token()?.parse().map_err(|_| parse("bad width"))?;
        let h: usize = token()?.parse().map_err(|_| parse("bad height"))?;
        let scale: f64 = token()?.parse().map_err(|_| parse("bad scale"))?;
        if scale >= 0.0 {
            return Err(parse("big-endian PFM not supported"));
        }
        let need = w * h * 4;
        if bytes.len() < off + need {
            return Err(Error::CorruptFile(format!("{p}: truncated pixel data")));
        }
        let mut depth = vec![0.0f64; w * h];
        for y in 0..h {
            let src_row = h - 1 - y;
            for x in 0..w {
                let i = off + (src_row * w + x) * 4;
                let v = f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
                depth[y * w + x] = v as f64;
            }
        }
        Ok(DepthMap::from_depths(w, h, depth))
    }
}

pub mod ppm {
    //! Binary P6 images, 8 bits per channel; values map to [0, 1].

    use super::*;
    use crate::geometry::FeatureMap;

    pub fn write(path: &Path, image: &FeatureMap) -> Result<()> {
        assert_eq!(image.channels, 3);
        let mut buf = Vec::with_capacity(32 + image.width * image.height * 3);
        write!(buf, "P6\n{} {}\n255\n", image.width, image.height).unwrap();
        for y in 0..image.height {
            for x in 0..image.width {
                for &v in image.pixel(x, y) {
                    buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        std::fs::write(path, buf).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<FeatureMap> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let p = path.display().to_string();
        let mut off = 0usize;
        let mut token = || -> Result<String> {
            while off < bytes.len() && bytes[off].is_ascii_whitespace() {
                off += 1;
            }
            let start = off;
            while off < bytes.len() && !bytes[off].is_ascii_whitespace() {
                off += 1;
            }
            if start == off {
                return Err(Error::parse(&p, "truncated header"));
            }
            let t = String::from_utf8_lossy(&bytes[start..off]).into_owned();
            off += 1;
            Ok(t)
        };
        if token()? != "P6" {
            return Err(Error::parse(&p, "not a binary PPM"));
        }
        let w: usize = token()?.parse().map_err(|_| Error::parse(&p, "bad width"))?;
        let h: usize = token()?.parse().map_err(|_| Error::parse(&p, "bad height"))?;
        let maxval: f64 = token()?.parse().map_err(|_| Error::parse(&p, "bad maxval"))?;
        let need = w * h * 3;
        if bytes.len() < off + need {
            return Err(Error::CorruptFile(format!("{p}: truncated pixel data")));
        }
        let mut img = FeatureMap::zeros(w, h, 3);
        for i in 0..need {
            img.data[i] = bytes[off + i] as f64 / maxval;
        }
        Ok(img)
    }
}

pub mod ply {
    //! Binary little-endian PLY point clouds.

    use super::*;
    use nalgebra::Vector3;

    /// x, y, z float32 plus a named list of extra float properties per
    /// vertex (e.g. 32 feature channels).
    pub fn write_points(
        path: &Path,
        positions: &[Vector3<f64>],
        extra_names: &[String],
        extra: &[Vec<f64>],
        support: Option<&[u8]>,
    ) -> Result<()> {
        let n = positions.len();
        for e in extra {
            assert_eq!(e.len(), n);
        }
        let mut buf = Vec::new();
        write!(buf, "ply\nformat binary_little_endian 1.0\nelement vertex {n}\n").unwrap();
        write!(buf, "property float x\nproperty float y\nproperty float z\n").unwrap();
        for name in extra_names {
            write!(buf, "property float {name}\n").unwrap();
        }
        if support.is_some() {
            write!(buf, "property uchar support\n").unwrap();
        }
        write!(buf, "end_header\n").unwrap();
        for i in 0..n {
            for c in 0..3 {
                buf.extend_from_slice(&(positions[i][c] as f32).to_le_bytes());
            }
            for e in extra {
                buf.extend_from_slice(&(e[i] as f32).to_le_bytes());
            }
            if let Some(s) = support {
                buf.push(s[i]);
            }
        }
        std::fs::write(path, buf).map_err(|e| io_err(path, e))
    }

    pub struct PlyCloud {
        pub positions: Vec<Vector3<f64>>,
        pub extra_names: Vec<String>,
        pub extra: Vec<Vec<f64>>,
        pub support: Option<Vec<u8>>,
    }

    pub fn read_points(path: &Path) -> Result<PlyCloud> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let p = path.display().to_string();
        let header_end = bytes
            .windows(11)
            .position(|w| w == b"end_header\n")
            .ok_or_else(|| Error::parse(&p, "missing end_header"))?
            + 11;
        let header = String::from_utf8_lossy(&bytes[..header_end]);
        let mut n = 0usize;
        let mut props: Vec<(String, String)> = Vec::new();
        for line in header.lines() {
            let t: Vec<&str> = line.split_whitespace().collect();
            match t.as_slice() {
                ["format", f, _] if *f != "binary_little_endian" => {
                    return Err(Error::parse(&p, "only binary_little_endian supported"))
                }
                ["element", "vertex", c] => {
                    n = c.parse().map_err(|_| Error::parse(&p, "bad vertex count"))?
                }
                ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
                _ => {}
            }
        }
        if props.len() < 3 || props[0].1 != "x" || props[1].1 != "y" || props[2].1 != "z" {
            return Err(Error::parse(&p, "vertex must start with x y z floats"));
        }
        let has_support = props.last().map(|(t, n)| t == "uchar" && n == "support").unwrap_or(false);
        let float_extra = props.len() - 3 - usize::from(has_support);
        let stride = 12 + float_extra * 4 + usize::from(has_support);
        if bytes.len() < header_end + n * stride {
            return Err(Error::CorruptFile(format!("{p}: truncated vertex data")));
        }
        let mut positions = Vec::with_capacity(n);
        let mut extra: Vec<Vec<f64>> = vec![Vec::with_capacity(n); float_extra];
        let mut support = if has_support { Some(Vec::with_capacity(n)) } else { None };
        for i in 0..n {
            let base = header_end + i * stride;
            let f = |o: usize| {
                f32::from_le_bytes(bytes[base + o * 4..base + o * 4 + 4].try_into().unwrap()) as f64
            };
            positions.push(Vector3::new(f(0), f(1), f(2)));
            for (j, e) in extra.iter_mut().enumerate() {
                e.push(f(3 + j));
            }
            if let Some(s) = support.as_mut() {
                s.push(bytes[base + stride - 1]);
            }
        }
        Ok(PlyCloud {
            positions,
            extra_names: props[3..3 + float_extra].iter().map(|(_, n)| n.clone()).collect(),
            extra,
            support,
        })
    }
}

pub mod voldump {
    //! Sparse-volume dump: magic `3DVV`, version u32, resolution f64,
    //! origin 3x f64, channels u32, cell count u64, then per cell the i32
    //! index triple and channel f32 features. All little-endian.

    use super::*;
    use crate::scenemodel::SparseFeatureVolume;
    use nalgebra::Vector3;

    const MAGIC: &[u8; 4] = b"3DVV";

    pub fn write(path: &Path, v: &SparseFeatureVolume) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&v.resolution().to_le_bytes());
        for c in 0..3 {
            buf.extend_from_slice(&v.origin_vec()[c].to_le_bytes());
        }
        buf.extend_from_slice(&(v.channels as u32).to_le_bytes());
        buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
        for (i, idx) in v.indices().iter().enumerate() {
            for &k in idx {
                buf.extend_from_slice(&k.to_le_bytes());
            }
            for &f in v.feature_row(i) {
                buf.extend_from_slice(&(f as f32).to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<SparseFeatureVolume> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let p = path.display().to_string();
        let corrupt = |d: &str| Error::CorruptFile(format!("{p}: {d}"));
        if bytes.len() < 4 + 4 + 8 + 24 + 4 + 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad header"));
        }
        let mut off = 8usize;
        let f64_at = |off: &mut usize| {
            let v = f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
            *off += 8;
            v
        };
        let resolution = f64_at(&mut off);
        let origin = Vector3::new(f64_at(&mut off), f64_at(&mut off), f64_at(&mut off));
        let channels = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        let count = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        let stride = 12 + channels * 4;
        if bytes.len() < off + count * stride {
            return Err(corrupt("truncated cells"));
        }
        let mut indices = Vec::with_capacity(count);
        let mut features = Vec::with_capacity(count * channels);
        for i in 0..count {
            let base = off + i * stride;
            let idx = [
                i32::from_le_bytes(bytes[base..base + 4].try_into().unwrap()),
                i32::from_le_bytes(bytes[base + 4..base + 8].try_into().unwrap()),
                i32::from_le_bytes(bytes[base + 8..base + 12].try_into().unwrap()),
            ];
            indices.push(idx);
            for c in 0..channels {
                let b = base + 12 + c * 4;
                features.push(f32::from_le_bytes(bytes[b..b + 4].try_into().unwrap()) as f64);
            }
        }
        SparseFeatureVolume::from_parts(resolution, origin, channels, indices, features)
    }
}
