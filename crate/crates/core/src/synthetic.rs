//! Procedural test scene: a smooth textured height field seen from a ring of
//! cameras above it, with open sky around the surface.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::{
    make_split, save_colmap_model, CameraModel, ColmapModel, ImageRecord, ModelFormat, PointCloud, Pose, PosedImage,
    RgbImage, Scene, SceneManifest, SplitProtocol,
};

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub width: u32,
    pub height: u32,
    pub views: usize,
    /// Points per side of the jittered sampling grid.
    pub grid: usize,
    pub seed: u64,
    /// Focal length in units of the image width.
    pub focal: f64,
    pub sky: [f32; 3],
    /// Append one point far outside every camera frustum.
    pub hidden_point: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            width: 128,
            height: 128,
            views: 20,
            grid: 70,
            seed: 7,
            focal: 0.65,
            sky: [0.62, 0.74, 0.9],
            hidden_point: true,
        }
    }
}

pub const HIDDEN_POINT: [f32; 3] = [60.0, -45.0, 0.0];
const EXTENT: f64 = 1.0;

pub fn height(x: f64, y: f64) -> f64 {
    0.08 * (1.7 * x + 0.4).sin() * (1.3 * y - 0.2).cos() + 0.04 * (2.1 * x * y + 0.3).sin()
}

fn albedo(x: f64, y: f64) -> [f64; 3] {
    let a = (1.9 * x + 0.8 * y).sin();
    let b = (1.4 * y - 1.1 * x + 0.5).cos();
    let c = (2.3 * (x * x + y * y).sqrt()).sin();
    [
        0.45 + 0.25 * a + 0.1 * c,
        0.4 + 0.2 * b - 0.1 * a,
        0.35 + 0.2 * c + 0.1 * b,
    ]
}

/// Lambertian colour of the surface point above `(x, y)`.
pub fn surface_color(x: f64, y: f64) -> [f32; 3] {
    let e = 1e-4;
    let hx = (height(x + e, y) - height(x - e, y)) / (2.0 * e);
    let hy = (height(x, y + e) - height(x, y - e)) / (2.0 * e);
    let n = [-hx, -hy, 1.0];
    let l = [0.3, -0.4, 0.866];
    let nl = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]) / (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
    let shade = 0.65 + 0.35 * nl.max(0.0);
    albedo(x, y).map(|v| (v * shade).clamp(0.0, 1.0) as f32)
}

fn cameras(spec: &ToySpec) -> Vec<(CameraModel, Pose)> {
    let f = spec.focal * spec.width as f64;
    let cam = CameraModel::new(
        f,
        f,
        spec.width as f64 / 2.0 - 0.5,
        spec.height as f64 / 2.0 - 0.5,
        spec.width,
        spec.height,
    )
    .expect("valid toy intrinsics");
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..spec.views)
        .map(|i| {
            let t = (i as f64 + 0.5) / spec.views as f64;
            let elev = (52.0 + 28.0 * t).to_radians();
            let az = i as f64 * golden;
            let r = 2.9;
            let eye = [r * elev.cos() * az.cos(), r * elev.cos() * az.sin(), r * elev.sin()];
            (cam, Pose::look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]))
        })
        .collect()
}

/// World-space ray through pixel `(u, v)`.
fn ray(cam: &CameraModel, pose: &Pose, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
    let d_cam = [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0];
    let r = &pose.rotation;
    let d = [
        r[0][0] * d_cam[0] + r[1][0] * d_cam[1] + r[2][0] * d_cam[2],
        r[0][1] * d_cam[0] + r[1][1] * d_cam[1] + r[2][1] * d_cam[2],
        r[0][2] * d_cam[0] + r[1][2] * d_cam[1] + r[2][2] * d_cam[2],
    ];
    (pose.camera_center(), d)
}

/// First intersection of the ray with the height field inside the extent.
fn trace(o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let at = |t: f64| [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    let f = |t: f64| {
        let p = at(t);
        p[2] - height(p[0], p[1])
    };
    if d[2] >= 0.0 {
        return None;
    }
    let (mut lo, mut hi) = ((0.2 - o[2]) / d[2], (-0.2 - o[2]) / d[2]);
    let steps = 64;
    let mut prev = lo;
    let mut found = None;
    for k in 1..=steps {
        let t = lo + (hi - lo) * k as f64 / steps as f64;
        if f(t) <= 0.0 {
            found = Some((prev, t));
            break;
        }
        prev = t;
    }
    let (a, b) = found?;
    lo = a;
    hi = b;
    for _ in 0..40 {
        let m = 0.5 * (lo + hi);
        if f(m) > 0.0 {
            lo = m;
        } else {
            hi = m;
        }
    }
    let p = at(0.5 * (lo + hi));
    (p[0].abs() <= EXTENT && p[1].abs() <= EXTENT).then_some((p[0], p[1]))
}

/// Ground-truth image with 3×3 supersampling.
pub fn render_truth(spec: &ToySpec, cam: &CameraModel, pose: &Pose) -> RgbImage {
    let ss = 3;
    RgbImage::from_fn(cam.width, cam.height, |x, y| {
        let mut acc = [0.0f32; 3];
        for sy in 0..ss {
            for sx in 0..ss {
                let u = x as f64 - 0.5 + (sx as f64 + 0.5) / ss as f64;
                let v = y as f64 - 0.5 + (sy as f64 + 0.5) / ss as f64;
                let (o, d) = ray(cam, pose, u, v);
                let c = match trace(o, d) {
                    Some((px, py)) => surface_color(px, py),
                    None => spec.sky,
                };
                for k in 0..3 {
                    acc[k] += c[k];
                }
            }
        }
        acc.map(|v| v / (ss * ss) as f32)
    })
}

pub fn toy_cloud(spec: &ToySpec) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.grid;
    let step = 2.0 * EXTENT / n as f64;
    let mut pos = Vec::with_capacity(n * n + 1);
    let mut col = Vec::with_capacity(n * n + 1);
    for i in 0..n {
        for j in 0..n {
            let x = -EXTENT + (i as f64 + rng.gen_range(0.1..0.9)) * step;
            let y = -EXTENT + (j as f64 + rng.gen_range(0.1..0.9)) * step;
            pos.push([x as f32, y as f32, height(x, y) as f32]);
            col.push(surface_color(x, y));
        }
    }
    if spec.hidden_point {
        pos.push(HIDDEN_POINT);
        col.push([0.0; 3]);
    }
    PointCloud {
        positions: pos,
        colors: Some(col),
    }
}

/// In-memory scene with ids `1..=views` and the default 1-in-8 split.
pub fn toy_scene(spec: &ToySpec) -> Scene {
    let views: Vec<PosedImage> = cameras(spec)
        .into_iter()
        .enumerate()
        .map(|(i, (camera, pose))| PosedImage {
            id: i as u32 + 1,
            name: format!("view_{:03}.png", i + 1),
            camera,
            pose,
            path: None,
            pixels: Some(Arc::new(render_truth(spec, &camera, &pose))),
        })
        .collect();
    let ids: Vec<u32> = views.iter().map(|v| v.id).collect();
    let split = make_split(&ids, SplitProtocol::default()).expect("sorted ids");
    Scene::from_views(views, toy_cloud(spec), split)
}

/// Write a raw dataset (COLMAP text model, dense PLY, PNG images, manifest)
/// for `scene` under `dir`; returns the manifest path.
pub fn write_dataset(scene: &Scene, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut cameras = BTreeMap::new();
    let mut records = Vec::new();
    for v in &scene.views {
        let cam_id = match cameras.iter().find(|(_, c)| **c == v.camera) {
            Some((&k, _)) => k,
            None => {
                let k = cameras.len() as u32 + 1;
                cameras.insert(k, v.camera);
                k
            }
        };
        records.push(ImageRecord {
            id: v.id,
            camera_id: cam_id,
            name: v.name.clone(),
            pose: v.pose,
        });
        v.image()?.save_png(images.join(&v.name))?;
    }
    let model = ColmapModel {
        cameras,
        images: records,
        points: PointCloud::default(),
        point_ids: Vec::new(),
    };
    save_colmap_model(&model, dir.join("sparse"), ModelFormat::Text)?;
    crate::scene::save_point_cloud(&scene.cloud, dir.join("dense.ply"), crate::scene::PlyEncoding::BinaryLittleEndian)?;
    let manifest = SceneManifest {
        model_dir: "sparse".into(),
        point_cloud: Some("dense.ply".into()),
        image_dir: "images".into(),
        split: SplitProtocol::default(),
        texture_channels: scene.texture_channels,
        scales: scene.scales,
        eval_downscale: 1,
    };
    let p = dir.join("manifest.toml");
    std::fs::write(&p, toml::to_string(&manifest).expect("manifest serializes")).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterizer::{rasterize_scale, ENV};

    fn small() -> ToySpec {
        ToySpec {
            width: 32,
            height: 32,
            views: 9,
            grid: 20,
            ..Default::default()
        }
    }

    #[test]
    fn hidden_point_never_rasterized_and_sky_visible() {
        let spec = small();
        let scene = toy_scene(&spec);
        let hidden = scene.cloud.len() as i32 - 1;
        for v in &scene.views {
            let f = rasterize_scale(&scene.cloud.positions, &v.camera, &v.pose, 0);
            assert!(!f.index.contains(&hidden));
            assert!(f.index.contains(&ENV));
            let img = v.image().unwrap();
            let c = img.pixel(0, 0);
            assert!((0..3).all(|k| (c[k] - spec.sky[k]).abs() < 1e-6));
        }
        assert_eq!(scene.split.test_ids, vec![8]);
    }

    #[test]
    fn dataset_round_trips_through_prepare() {
        let scene = toy_scene(&small());
        let d = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&scene, d.path().join("raw")).unwrap();
        let prepared = crate::scene::prepare_scene(&manifest, d.path().join("prep")).unwrap();
        assert_eq!(prepared.view_ids(), scene.view_ids());
        assert_eq!(prepared.cloud.positions, scene.cloud.positions);
        let a = prepared.views[3].image().unwrap();
        assert_eq!(a.to_rgb8(), scene.views[3].image().unwrap().to_rgb8());
    }
}
