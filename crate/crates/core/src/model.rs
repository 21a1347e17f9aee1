//! A trained scene: textured point cloud plus renderer, and its checkpoint layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::{Fragment, RasterBackend};
use crate::renderer::Renderer;
use crate::scene::{CameraModel, PointCloud, Pose, RgbImage};
use crate::tensor::Tensor;
use crate::texture::{load_textured_cloud, save_textured_cloud, NeuralTexture};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.toml";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cloud: PointCloud,
    pub texture: NeuralTexture,
    pub renderer: Renderer,
}

/// Bookkeeping written next to the model arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub format_version: u32,
    /// Scene directory the model was trained on.
    pub scene: Option<PathBuf>,
    pub epoch: usize,
    pub step: usize,
}

impl Model {
    pub fn new(cloud: PointCloud, texture: NeuralTexture, renderer: Renderer) -> Result<Self> {
        if cloud.len() != texture.len() {
            return Err(Error::Data(format!(
                "cloud has {} points but texture has {} rows",
                cloud.len(),
                texture.len()
            )));
        }
        if texture.channels() != renderer.config.in_channels {
            return Err(Error::Config(format!(
                "texture has {} channels but the renderer expects {}",
                texture.channels(),
                renderer.config.in_channels
            )));
        }
        Ok(Model { cloud, texture, renderer })
    }

    pub fn scales(&self) -> u32 {
        self.renderer.config.scales() as u32
    }

    pub fn buffers(&self, fragments: &[Vec<&Fragment>]) -> Result<Vec<Tensor<f32>>> {
        fragments.iter().map(|f| self.texture.gather(f)).collect()
    }

    /// Clamped render of one view.
    pub fn render_view(&self, backend: &dyn RasterBackend, camera: &CameraModel, pose: &Pose) -> Result<RgbImage> {
        let frags = backend.rasterize_pyramid(&self.cloud.positions, camera, pose, self.scales());
        let bufs: Vec<Tensor<f32>> = frags
            .iter()
            .map(|f| self.texture.gather(&[f]))
            .collect::<Result<_>>()?;
        let img = self.renderer.render(&bufs)?;
        if !img.all_finite() {
            return Err(Error::Numeric("render produced non-finite values".into()));
        }
        Ok(RgbImage::from_tensor(&img, 0))
    }

    /// Writes `texture/`, `renderer/` and `checkpoint.toml` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, info: &CheckpointInfo) -> Result<()> {
        let dir = dir.as_ref();
        save_textured_cloud(&self.cloud, &self.texture, dir.join("texture"))?;
        self.renderer.save(dir.join("renderer"))?;
        let info = CheckpointInfo {
            format_version: CHECKPOINT_VERSION,
            ..info.clone()
        };
        let p = dir.join(CHECKPOINT_FILE);
        std::fs::write(&p, toml::to_string(&info).expect("info serializes")).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointInfo)> {
        let dir = dir.as_ref();
        let p = dir.join(CHECKPOINT_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let info: CheckpointInfo = toml::from_str(&text).map_err(|e| Error::checkpoint(&p, e.to_string()))?;
        if info.format_version != CHECKPOINT_VERSION {
            return Err(Error::checkpoint(
                &p,
                format!("checkpoint format {} is not supported", info.format_version),
            ));
        }
        let (cloud, texture) = load_textured_cloud(dir.join("texture"))?;
        let renderer = Renderer::load(dir.join("renderer"))?;
        Ok((Model::new(cloud, texture, renderer)?, info))
    }

    /// Drop points inside the axis-aligned box `[lo, hi]`; returns how many were removed.
    pub fn remove_box(&mut self, lo: [f32; 3], hi: [f32; 3]) -> Result<usize> {
        let keep: Vec<bool> = self
            .cloud
            .positions
            .iter()
            .map(|p| !(0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k]))
            .collect();
        self.remove_where(&keep)
    }

    pub fn remove_ids(&mut self, ids: &[usize]) -> Result<usize> {
        let mut keep = vec![true; self.cloud.len()];
        for &i in ids {
            *keep
                .get_mut(i)
                .ok_or_else(|| Error::Data(format!("point id {i} out of range ({} points)", self.cloud.len())))? = false;
        }
        self.remove_where(&keep)
    }

    fn remove_where(&mut self, keep: &[bool]) -> Result<usize> {
        let removed = keep.iter().filter(|&&k| !k).count();
        if removed > 0 {
            let (cloud, texture) = crate::texture::prune(&self.cloud, &self.texture, keep)?;
            self.cloud = cloud;
            self.texture = texture;
        }
        Ok(removed)
    }
}
