//! Scene ingestion: COLMAP models, PLY clouds, images, splits and the
//! normalized on-disk scene directory produced by `prepare`.

mod camera;
mod cloud;
mod colmap;
mod image;
mod ply;
mod split;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::camera::{crop_camera, CameraModel, Pose};
pub use self::cloud::PointCloud;
pub use self::colmap::{load_colmap_model, save_colmap_model, ColmapModel, ImageRecord, ModelFormat};
pub use self::image::RgbImage;
pub use self::ply::{load_point_cloud, save_point_cloud, PlyEncoding};
pub use self::split::{make_split, SplitProtocol, SplitSpec};

use crate::error::{Error, Result};

pub const SCENE_FILE: &str = "scene.toml";
pub const SPLIT_FILE: &str = "split.toml";

#[derive(Clone, Debug)]
pub struct PosedImage {
    pub id: u32,
    pub name: String,
    pub camera: CameraModel,
    pub pose: Pose,
    pub path: Option<PathBuf>,
    pub pixels: Option<Arc<RgbImage>>,
}

impl PosedImage {
    pub fn image(&self) -> Result<Arc<RgbImage>> {
        if let Some(p) = &self.pixels {
            return Ok(p.clone());
        }
        let path = self
            .path
            .as_ref()
            .ok_or_else(|| Error::Data(format!("view {} has neither pixels nor a path", self.id)))?;
        let img = RgbImage::load(path)?;
        if (img.width, img.height) != (self.camera.width, self.camera.height) {
            return Err(Error::Data(format!(
                "{}: image is {}x{} but camera says {}x{}",
                path.display(),
                img.width,
                img.height,
                self.camera.width,
                self.camera.height
            )));
        }
        Ok(Arc::new(img))
    }
}

fn default_channels() -> usize {
    8
}

fn default_scales() -> usize {
    4
}

fn default_downscale() -> u32 {
    1
}

/// Key-value description of a raw scene; relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub model_dir: PathBuf,
    /// Dense cloud; the model's sparse points are used when absent.
    #[serde(default)]
    pub point_cloud: Option<PathBuf>,
    pub image_dir: PathBuf,
    #[serde(default)]
    pub split: SplitProtocol,
    #[serde(default = "default_channels")]
    pub texture_channels: usize,
    #[serde(default = "default_scales")]
    pub scales: usize,
    /// Integer factor applied to evaluation images before metrics; 1 = native.
    #[serde(default = "default_downscale")]
    pub eval_downscale: u32,
}

impl SceneManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SceneManifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if m.texture_channels == 0 || m.scales == 0 {
            return Err(Error::Config(format!(
                "{}: texture_channels and scales must be positive",
                path.display()
            )));
        }
        Ok(m)
    }
}

/// A posed image set with its point cloud and split.
#[derive(Clone, Debug)]
pub struct Scene {
    pub root: Option<PathBuf>,
    pub views: Vec<PosedImage>,
    pub cloud: PointCloud,
    pub split: SplitSpec,
    pub texture_channels: usize,
    pub scales: usize,
    pub eval_downscale: u32,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

struct Resolved {
    views: Vec<PosedImage>,
    cloud: PointCloud,
    model: ColmapModel,
}

fn resolve_manifest(manifest: &SceneManifest, base: &Path) -> Result<Resolved> {
    let model_dir = resolve(base, &manifest.model_dir);
    let image_dir = resolve(base, &manifest.image_dir);
    let model = load_colmap_model(&model_dir)?;
    let cloud = match &manifest.point_cloud {
        Some(p) => load_point_cloud(resolve(base, p))?,
        None => model.points.clone(),
    };
    let mut views = Vec::with_capacity(model.images.len());
    for rec in &model.images {
        let path = image_dir.join(&rec.name);
        if !path.is_file() {
            warn!("image {} ({}) missing on disk; dropped", rec.id, path.display());
            continue;
        }
        views.push(PosedImage {
            id: rec.id,
            name: rec.name.clone(),
            camera: model.cameras[&rec.camera_id],
            pose: rec.pose,
            path: Some(path),
            pixels: None,
        });
    }
    Ok(Resolved {
        views,
        cloud,
        model,
    })
}

impl Scene {
    pub fn from_views(views: Vec<PosedImage>, cloud: PointCloud, split: SplitSpec) -> Self {
        Scene {
            root: None,
            views,
            cloud,
            split,
            texture_channels: default_channels(),
            scales: default_scales(),
            eval_downscale: 1,
        }
    }

    /// Open a prepared scene directory (or any directory holding a `scene.toml`).
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = SceneManifest::load(dir.join(SCENE_FILE))?;
        let Resolved { views, cloud, .. } = resolve_manifest(&manifest, dir)?;
        if cloud.is_empty() {
            return Err(Error::Data(format!("{}: scene has no points", dir.display())));
        }
        let ids: Vec<u32> = views.iter().map(|v| v.id).collect();
        let split_path = dir.join(SPLIT_FILE);
        let split = if split_path.is_file() {
            let text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
            let s: SplitSpec =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", split_path.display())))?;
            // ids dropped since prepare fall out of both sides
            SplitSpec {
                train_ids: s.train_ids.into_iter().filter(|i| ids.contains(i)).collect(),
                test_ids: s.test_ids.into_iter().filter(|i| ids.contains(i)).collect(),
            }
        } else {
            make_split(&ids, manifest.split)?
        };
        Ok(Scene {
            root: Some(dir.to_path_buf()),
            views,
            cloud,
            split,
            texture_channels: manifest.texture_channels,
            scales: manifest.scales,
            eval_downscale: manifest.eval_downscale.max(1),
        })
    }

    pub fn view(&self, id: u32) -> Option<&PosedImage> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn view_ids(&self) -> Vec<u32> {
        self.views.iter().map(|v| v.id).collect()
    }

    pub fn train_views(&self) -> Vec<&PosedImage> {
        self.split.train_ids.iter().filter_map(|&i| self.view(i)).collect()
    }

    pub fn test_views(&self) -> Vec<&PosedImage> {
        self.split.test_ids.iter().filter_map(|&i| self.view(i)).collect()
    }

    /// Decode every view's pixels. Decoding is per-file, so the result does not
    /// depend on the worker count.
    pub fn load_pixels(&mut self) -> Result<()> {
        let loaded: Vec<Result<Arc<RgbImage>>> = self.views.par_iter().map(|v| v.image()).collect();
        for (v, img) in self.views.iter_mut().zip(loaded) {
            v.pixels = Some(img?);
        }
        Ok(())
    }
}

/// Validate a manifest and materialize a normalized scene directory: a text
/// COLMAP model, a binary PLY, linked images, `scene.toml` and `split.toml`.
pub fn prepare_scene(manifest_path: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Scene> {
    let manifest_path = manifest_path.as_ref();
    let out_dir = out_dir.as_ref();
    let manifest = SceneManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    for (what, p) in [
        ("model_dir", Some(&manifest.model_dir)),
        ("image_dir", Some(&manifest.image_dir)),
        ("point_cloud", manifest.point_cloud.as_ref()),
    ] {
        if let Some(p) = p {
            let full = resolve(base, p);
            if !full.exists() {
                return Err(Error::Config(format!("{what} {} does not exist", full.display())));
            }
        }
    }
    let Resolved {
        views,
        cloud,
        mut model,
    } = resolve_manifest(&manifest, base)?;
    if cloud.is_empty() {
        return Err(Error::Data("scene has no points; nothing to render".into()));
    }
    if views.is_empty() {
        return Err(Error::Data("no registered image found on disk".into()));
    }
    for v in &views {
        let path = v.path.as_ref().expect("resolved views carry paths");
        let (w, h) = ::image::image_dimensions(path).map_err(|e| Error::format(path, e.to_string()))?;
        if (w, h) != (v.camera.width, v.camera.height) {
            return Err(Error::Data(format!(
                "{}: image is {w}x{h} but camera says {}x{}",
                path.display(),
                v.camera.width,
                v.camera.height
            )));
        }
    }
    let ids: Vec<u32> = views.iter().map(|v| v.id).collect();
    let split = make_split(&ids, manifest.split)?;

    fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;
    model.images.retain(|r| ids.contains(&r.id));
    model.points = PointCloud::default();
    model.point_ids.clear();
    save_colmap_model(&model, out_dir.join("sparse"), ModelFormat::Text)?;
    save_point_cloud(&cloud, out_dir.join("points.ply"), PlyEncoding::BinaryLittleEndian)?;
    for v in &views {
        let src = fs::canonicalize(v.path.as_ref().unwrap()).map_err(|e| Error::io(v.path.as_ref().unwrap(), e))?;
        let dst = out_dir.join("images").join(&v.name);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        if dst.exists() || dst.symlink_metadata().is_ok() {
            fs::remove_file(&dst).map_err(|e| Error::io(&dst, e))?;
        }
        link_or_copy(&src, &dst)?;
    }
    let normalized = SceneManifest {
        model_dir: "sparse".into(),
        point_cloud: Some("points.ply".into()),
        image_dir: "images".into(),
        ..manifest
    };
    let write_toml = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write_toml(SCENE_FILE, toml::to_string(&normalized).expect("manifest serializes"))?;
    write_toml(SPLIT_FILE, toml::to_string(&split).expect("split serializes"))?;
    info!(
        "prepared {}: {} views ({} train / {} test), {} points",
        out_dir.display(),
        views.len(),
        split.train_ids.len(),
        split.test_ids.len(),
        cloud.len()
    );
    Scene::open(out_dir)
}

#[cfg(unix)]
fn link_or_copy(src: &Path, dst: &Path) -> Result<()> {
    if std::os::unix::fs::symlink(src, dst).is_ok() {
        return Ok(());
    }
    fs::copy(src, dst).map(|_| ()).map_err(|e| Error::io(dst, e))
}

#[cfg(not(unix))]
fn link_or_copy(src: &Path, dst: &Path) -> Result<()> {
    fs::copy(src, dst).map(|_| ()).map_err(|e| Error::io(dst, e))
}
