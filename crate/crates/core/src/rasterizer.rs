//! Hard z-buffer point rasterization into per-scale fragments.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{CameraModel, Pose};

/// Index-map value for pixels no point covers.
pub const ENV: i32 = -1;
pub const Z_NEAR: f32 = 1e-4;

const DEBUG_MAGIC: &[u8; 4] = b"PRFG";
const DEBUG_VERSION: u32 = 1;

/// Per-pixel winner of the z-test at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    pub scale: u32,
    pub width: u32,
    pub height: u32,
    /// Row-major point indices, [`ENV`] where empty.
    pub index: Vec<i32>,
    /// Camera-space depth of the stored point; `INFINITY` at [`ENV`] pixels.
    pub depth: Vec<f32>,
}

impl Fragment {
    pub fn empty(scale: u32, width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        Fragment {
            scale,
            width,
            height,
            index: vec![ENV; n],
            depth: vec![f32::INFINITY; n],
        }
    }

    pub fn at(&self, x: u32, y: u32) -> i32 {
        self.index[(y * self.width + x) as usize]
    }

    pub fn covered(&self) -> usize {
        self.index.iter().filter(|&&i| i != ENV).count()
    }

    /// Sub-window `[x0, x0+w) × [y0, y0+h)`.
    pub fn window(&self, x0: u32, y0: u32, w: u32, h: u32) -> Fragment {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "window exceeds fragment");
        let mut out = Fragment::empty(self.scale, w, h);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) as usize;
            let dst = (y * w) as usize;
            out.index[dst..dst + w as usize].copy_from_slice(&self.index[src..src + w as usize]);
            out.depth[dst..dst + w as usize].copy_from_slice(&self.depth[src..src + w as usize]);
        }
        out
    }

    /// Little-endian dump: magic, version, scale, width, height, i32 index grid, f32 depth grid.
    pub fn write_debug(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(DEBUG_MAGIC)?;
        for v in [DEBUG_VERSION, self.scale, self.width, self.height] {
            w.write_all(&v.to_le_bytes())?;
        }
        for i in &self.index {
            w.write_all(&i.to_le_bytes())?;
        }
        for d in &self.depth {
            w.write_all(&d.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_debug(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_debug(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_debug(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::parse_debug(&bytes).map_err(|msg| Error::format(path, msg))
    }

    fn parse_debug(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 20 || &bytes[..4] != DEBUG_MAGIC {
            return Err("not a fragment dump".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != DEBUG_VERSION {
            return Err(format!("unsupported fragment dump version {}", word(0)));
        }
        let (scale, width, height) = (word(1), word(2), word(3));
        let n = width as usize * height as usize;
        let body = &bytes[20..];
        if body.len() != 8 * n {
            return Err(format!("expected {} payload bytes, found {}", 8 * n, body.len()));
        }
        let (ib, db) = body.split_at(4 * n);
        Ok(Fragment {
            scale,
            width,
            height,
            index: ib.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
            depth: db.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        })
    }
}

/// Single-precision projection constants for one camera at one scale.
///
/// The principal point is split into an integer pixel offset and a fractional
/// part so that integer crops shift pixel indices exactly.
#[derive(Clone, Copy, Debug)]
pub struct Projector {
    r: [[f32; 3]; 3],
    t: [f32; 3],
    fx: f32,
    fy: f32,
    cx_frac: f32,
    cy_frac: f32,
    cx_int: i64,
    cy_int: i64,
    width: u32,
    height: u32,
}

impl Projector {
    pub fn new(camera: &CameraModel, pose: &Pose) -> Self {
        let r = pose.rotation.map(|row| row.map(|v| v as f32));
        let t = pose.translation.map(|v| v as f32);
        let (cxf, cyf) = (camera.cx.floor(), camera.cy.floor());
        Projector {
            r,
            t,
            fx: camera.fx as f32,
            fy: camera.fy as f32,
            cx_frac: (camera.cx - cxf) as f32,
            cy_frac: (camera.cy - cyf) as f32,
            cx_int: cxf as i64,
            cy_int: cyf as i64,
            width: camera.width,
            height: camera.height,
        }
    }

    pub fn camera_space(&self, p: [f32; 3]) -> [f32; 3] {
        let r = &self.r;
        let [x, y, z] = p;
        [
            r[0][0] * x + r[0][1] * y + r[0][2] * z + self.t[0],
            r[1][0] * x + r[1][1] * y + r[1][2] * z + self.t[1],
            r[2][0] * x + r[2][1] * y + r[2][2] * z + self.t[2],
        ]
    }

    /// Continuous image coordinates and depth.
    pub fn project(&self, p: [f32; 3]) -> ([f32; 2], f32) {
        let [x, y, z] = self.camera_space(p);
        let (du, dv) = self.offsets(x, y, z);
        let u = du + self.cx_int as f32;
        let v = dv + self.cy_int as f32;
        ([u, v], z)
    }

    fn offsets(&self, x: f32, y: f32, z: f32) -> (f32, f32) {
        (self.fx * x / z + self.cx_frac, self.fy * y / z + self.cy_frac)
    }

    /// Pixel `(col, row)` and depth of a point that passes the near plane and
    /// lands on the sensor.
    pub fn pixel(&self, p: [f32; 3]) -> Option<(u32, u32, f32)> {
        let [x, y, z] = self.camera_space(p);
        if !(z > Z_NEAR) {
            return None;
        }
        let (du, dv) = self.offsets(x, y, z);
        if !(du.is_finite() && dv.is_finite()) {
            return None;
        }
        let col = du.round() as i64 + self.cx_int;
        let row = dv.round() as i64 + self.cy_int;
        if (0..self.width as i64).contains(&col) && (0..self.height as i64).contains(&row) {
            Some((col as u32, row as u32, z))
        } else {
            None
        }
    }
}

/// Projection of every point: image coordinates, depth and validity.
#[derive(Clone, Debug, Default)]
pub struct Projection {
    pub uv: Vec<[f32; 2]>,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

pub fn project(points: &[[f32; 3]], camera: &CameraModel, pose: &Pose) -> Projection {
    let proj = Projector::new(camera, pose);
    let mut out = Projection {
        uv: Vec::with_capacity(points.len()),
        depth: Vec::with_capacity(points.len()),
        valid: Vec::with_capacity(points.len()),
    };
    for &p in points {
        let (uv, z) = proj.project(p);
        out.uv.push(uv);
        out.depth.push(z);
        out.valid.push(proj.pixel(p).is_some());
    }
    out
}

#[inline]
fn pack(depth: f32, index: u32) -> u64 {
    // positive finite floats order like their bit patterns
    ((depth.to_bits() as u64) << 32) | index as u64
}

pub trait RasterBackend: Send + Sync {
    fn name(&self) -> &'static str;

    fn rasterize_scale(&self, points: &[[f32; 3]], camera: &CameraModel, pose: &Pose, scale: u32) -> Fragment;

    /// Full-resolution fragment first, then each coarser level.
    fn rasterize_pyramid(&self, points: &[[f32; 3]], camera: &CameraModel, pose: &Pose, num_scales: u32) -> Vec<Fragment> {
        assert!(num_scales >= 1, "at least one scale");
        (0..num_scales)
            .map(|s| self.rasterize_scale(points, camera, pose, s))
            .collect()
    }
}

/// Always-available sequential z-buffer.
#[derive(Clone, Copy, Debug, Default)]
pub struct Reference;

impl RasterBackend for Reference {
    fn name(&self) -> &'static str {
        "reference"
    }

    fn rasterize_scale(&self, points: &[[f32; 3]], camera: &CameraModel, pose: &Pose, scale: u32) -> Fragment {
        rasterize_scale(points, camera, pose, scale)
    }
}

pub fn rasterize_scale(points: &[[f32; 3]], camera: &CameraModel, pose: &Pose, scale: u32) -> Fragment {
    assert!(points.len() < i32::MAX as usize, "point count exceeds index range");
    let cam = camera.at_scale(scale);
    let proj = Projector::new(&cam, pose);
    let mut keys = vec![u64::MAX; (cam.width * cam.height) as usize];
    for (i, &p) in points.iter().enumerate() {
        if let Some((col, row, z)) = proj.pixel(p) {
            let k = pack(z, i as u32);
            let slot = &mut keys[(row * cam.width + col) as usize];
            if k < *slot {
                *slot = k;
            }
        }
    }
    let mut frag = Fragment::empty(scale, cam.width, cam.height);
    for (j, &k) in keys.iter().enumerate() {
        if k != u64::MAX {
            frag.index[j] = (k & 0xffff_ffff) as i32;
            frag.depth[j] = f32::from_bits((k >> 32) as u32);
        }
    }
    frag
}

pub fn rasterize_pyramid(points: &[[f32; 3]], camera: &CameraModel, pose: &Pose, num_scales: u32) -> Vec<Fragment> {
    Reference.rasterize_pyramid(points, camera, pose, num_scales)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RasterChoice {
    #[default]
    Reference,
    Native,
}

impl fmt::Display for RasterChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RasterChoice::Reference => "reference",
            RasterChoice::Native => "native",
        })
    }
}

/// Resolve a backend; the native kernel is not part of this build, so asking
/// for it yields the reference rasterizer.
pub fn backend(choice: RasterChoice) -> Box<dyn RasterBackend> {
    if choice == RasterChoice::Native {
        warn!("native rasterizer not available in this build; using reference");
    }
    Box::new(Reference)
}
