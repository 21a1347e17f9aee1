//! Joint optimization of the neural texture, environment vector and renderer.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arrays::ArrayFile;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::model::{CheckpointInfo, Model};
use crate::optim::{Adam, AdamConfig, PlateauScheduler, SparseAdam};
use crate::rasterizer::{backend, Fragment, RasterBackend, RasterChoice};
use crate::renderer::{AttentionMode, Renderer, RendererConfig};
use crate::scene::{crop_camera, CameraModel, PointCloud, Pose, RgbImage, Scene};
use crate::tensor::Tensor;
use crate::texture::NeuralTexture;
use crate::vgg::{load_vgg19_loss, AssetSpec, VggFeatures};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvMode {
    /// The environment vector is optimized with the texture.
    #[default]
    Learnable,
    /// Uncovered pixels receive a fixed zero feature.
    Zeros,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VggAsset {
    pub path: Option<PathBuf>,
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RendererSettings {
    /// Feature widths per scale, finest first. Defaults to 64,128,256,256
    /// truncated or padded to the scene's scale count.
    pub widths: Option<Vec<usize>>,
    pub global_ratio: f64,
    pub attention: AttentionMode,
    pub spectral_activation: bool,
}

impl Default for RendererSettings {
    fn default() -> Self {
        let d = RendererConfig::default();
        RendererSettings {
            widths: None,
            global_ratio: d.global_ratio,
            attention: d.attention,
            spectral_activation: d.spectral_activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_texture: f64,
    pub lr_renderer: f64,
    pub batch_size: usize,
    pub crop: u32,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub max_epochs: usize,
    pub max_steps: Option<usize>,
    /// Optimizer steps per epoch; defaults to the number of training images.
    pub steps_per_epoch: Option<usize>,
    pub texture_channels: Option<usize>,
    pub env: EnvMode,
    pub deterministic: bool,
    pub raster: RasterChoice,
    pub loss: LossWeights,
    pub vgg: VggAsset,
    pub renderer: RendererSettings,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr_texture: 1e-1,
            lr_renderer: 1e-4,
            batch_size: 8,
            crop: 256,
            plateau_patience: 5,
            plateau_factor: 0.5,
            max_epochs: 100,
            max_steps: None,
            steps_per_epoch: None,
            texture_channels: None,
            env: EnvMode::Learnable,
            deterministic: false,
            raster: RasterChoice::Reference,
            loss: LossWeights::default(),
            vgg: VggAsset::default(),
            renderer: RendererSettings::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_texture > 0.0 && self.lr_renderer > 0.0) {
            return bad(format!(
                "learning rates must be positive, got texture {} renderer {}",
                self.lr_texture, self.lr_renderer
            ));
        }
        if self.batch_size == 0 || self.crop == 0 {
            return bad("batch_size and crop must be positive".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) || self.plateau_patience == 0 {
            return bad("plateau_factor must lie in (0,1] and plateau_patience be positive".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive".into());
        }
        self.loss.validate()
    }

    pub fn renderer_config(&self, channels: usize, scales: usize) -> RendererConfig {
        let widths = self.renderer.widths.clone().unwrap_or_else(|| {
            let base = RendererConfig::default().widths;
            (0..scales).map(|s| base[s.min(base.len() - 1)]).collect()
        });
        RendererConfig {
            in_channels: channels,
            widths,
            global_ratio: self.renderer.global_ratio,
            attention: self.renderer.attention,
            spectral_activation: self.renderer.spectral_activation,
            ..RendererConfig::default()
        }
    }
}

/// One training crop.
#[derive(Clone, Debug)]
pub struct Sample {
    pub view_id: u32,
    /// Top-left corner in the source image; negative when reflect-padded.
    pub origin: (i64, i64),
    pub camera: CameraModel,
    pub pose: Pose,
    pub target: RgbImage,
    pub padded: bool,
}

/// Uniformly pick `batch` (view, crop origin) pairs.
pub fn sample_batch(views: &[(u32, CameraModel, Pose, Arc<RgbImage>)], crop: u32, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    assert!(!views.is_empty(), "no training views");
    (0..batch)
        .map(|_| {
            let (id, cam, pose, img) = &views[rng.gen_range(0..views.len())];
            let pick = |dim: u32, rng: &mut ChaCha8Rng| -> i64 {
                if dim >= crop {
                    rng.gen_range(0..=(dim - crop)) as i64
                } else {
                    -(((crop - dim) / 2) as i64)
                }
            };
            let x0 = pick(cam.width, rng);
            let y0 = pick(cam.height, rng);
            let padded = cam.width < crop || cam.height < crop;
            let camera = if padded {
                CameraModel {
                    cx: cam.cx - x0 as f64,
                    cy: cam.cy - y0 as f64,
                    width: crop,
                    height: crop,
                    ..*cam
                }
            } else {
                crop_camera(cam, (x0 as u32, y0 as u32), (crop, crop)).expect("origin drawn inside the sensor")
            };
            Sample {
                view_id: *id,
                origin: (x0, y0),
                camera,
                pose: *pose,
                target: img.crop_reflect(x0, y0, crop, crop),
                padded,
            }
        })
        .collect()
}

/// One epoch of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub huber: f64,
    pub fft: f64,
    pub vgg: Option<f64>,
    pub lr_texture: f64,
    pub lr_renderer: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
}

#[derive(Default)]
struct EpochAccum {
    n: usize,
    total: f64,
    huber: f64,
    fft: f64,
    vgg: f64,
    has_vgg: bool,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub log: TrainLog,
    pub step: usize,
    pub epoch: usize,
    pub lr_texture: f64,
    pub lr_renderer: f64,
    views: Vec<(u32, CameraModel, Pose, Arc<RgbImage>)>,
    steps_per_epoch: usize,
    opt_renderer: Adam,
    opt_texture: SparseAdam,
    opt_env: Adam,
    scheduler: PlateauScheduler,
    rng: ChaCha8Rng,
    backend: Box<dyn RasterBackend>,
    vgg: Option<VggFeatures<f32>>,
    accum: EpochAccum,
    epoch_start: Instant,
    checkpoint: Option<CheckpointTarget>,
}

struct CheckpointTarget {
    dir: PathBuf,
    config_text: String,
    scene: Option<PathBuf>,
}

fn env_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}

impl Trainer {
    /// Fresh model: zero texture and environment, seeded renderer.
    pub fn new(scene: &Scene, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let channels = config.texture_channels.unwrap_or(scene.texture_channels);
        let texture = NeuralTexture::zeros(scene.cloud.len(), channels)?;
        let rc = config.renderer_config(channels, scene.scales);
        let renderer = Renderer::new(rc, env_seed(config.seed, 1))?;
        let model = Model::new(scene.cloud.clone(), texture, renderer)?;
        Self::with_model(scene, config, model)
    }

    /// Continue optimizing an existing model with fresh optimizer state.
    pub fn with_model(scene: &Scene, config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        let mut views = Vec::new();
        for v in scene.train_views() {
            views.push((v.id, v.camera, v.pose, v.image()?));
        }
        if views.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if let Some((id, cam, ..)) = views.iter().find(|(_, c, ..)| c.width < config.crop || c.height < config.crop) {
            warn!(
                "view {id} ({}x{}) is smaller than the {} crop; it will be reflect-padded",
                cam.width, cam.height, config.crop
            );
        }
        let vgg = if config.loss.vgg > 0.0 {
            Some(load_vgg19_loss(&AssetSpec {
                path: config.vgg.path.clone(),
                sha256: config.vgg.sha256.clone(),
            })?)
        } else {
            None
        };
        let mut model = model;
        if config.env == EnvMode::Zeros {
            model.texture.env_mut().fill(0.0);
        }
        let opt_renderer = Adam::new(config.adam, model.renderer.params.tensors().iter().map(|t| t.len()));
        let opt_texture = SparseAdam::new(config.adam, model.texture.len(), model.texture.channels());
        let opt_env = Adam::new(config.adam, [model.texture.channels()]);
        let steps_per_epoch = config.steps_per_epoch.unwrap_or(views.len());
        Ok(Trainer {
            lr_texture: config.lr_texture,
            lr_renderer: config.lr_renderer,
            scheduler: PlateauScheduler::new(config.plateau_patience, config.plateau_factor),
            rng: ChaCha8Rng::seed_from_u64(env_seed(config.seed, 2)),
            backend: backend(config.raster),
            config,
            model,
            log: TrainLog::default(),
            step: 0,
            epoch: 0,
            views,
            steps_per_epoch,
            opt_renderer,
            opt_texture,
            opt_env,
            vgg,
            accum: EpochAccum::default(),
            epoch_start: Instant::now(),
            checkpoint: None,
        })
    }

    /// Write a checkpoint into `dir` after every epoch. `config_text` is echoed verbatim.
    pub fn checkpoint_to(&mut self, dir: impl Into<PathBuf>, config_text: String, scene: Option<PathBuf>) {
        self.checkpoint = Some(CheckpointTarget {
            dir: dir.into(),
            config_text,
            scene,
        });
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    fn rasterize(&self, samples: &[Sample]) -> Vec<Vec<Fragment>> {
        let s = self.model.scales();
        let points = &self.model.cloud.positions;
        let one = |x: &Sample| self.backend.rasterize_pyramid(points, &x.camera, &x.pose, s);
        if self.config.deterministic {
            samples.iter().map(one).collect()
        } else {
            samples.par_iter().map(one).collect()
        }
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let samples = sample_batch(&self.views, self.config.crop, self.config.batch_size, &mut self.rng);
        let frags = self.rasterize(&samples);
        let scales = self.model.scales() as usize;
        let per_scale: Vec<Vec<&Fragment>> = (0..scales).map(|s| frags.iter().map(|f| &f[s]).collect()).collect();
        let targets: Vec<Tensor<f32>> = samples.iter().map(|s| s.target.to_tensor()).collect();
        let target = Tensor::stack(&targets);

        let mut g = Graph::new();
        let params = self.model.renderer.params.bind(&mut g, true);
        let mut buffers = Vec::with_capacity(scales);
        for f in &per_scale {
            buffers.push(g.leaf(self.model.texture.gather(f)?, true));
        }
        let out = self.model.renderer.forward(&mut g, &params, &buffers)?;
        let (loss, bd) = total_loss(&mut g, out.image, &target, &self.config.loss, self.vgg.as_ref())?;
        if !bd.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}; the last checkpoint is left untouched",
                self.step
            )));
        }
        let mut grads = g.backward(loss);

        let rgrads: Vec<Option<Tensor<f32>>> = params.vars.iter().map(|&v| grads.take(v)).collect();
        let mut rows: Vec<(u32, Vec<f32>)> = Vec::new();
        let mut env_grad = vec![0.0f32; self.model.texture.channels()];
        for (s, &b) in buffers.iter().enumerate() {
            let Some(gb) = grads.take(b) else { continue };
            let tg = self.model.texture.scatter_grad(&gb, &per_scale[s])?;
            let c = self.model.texture.channels();
            rows.extend(tg.rows.iter().enumerate().map(|(j, &r)| (r, tg.values[j * c..(j + 1) * c].to_vec())));
            for (e, v) in env_grad.iter_mut().zip(&tg.env) {
                *e += v;
            }
        }
        let (row_ids, row_vals) = merge_rows(rows, self.model.texture.channels());

        self.opt_renderer
            .step_tensors(self.model.renderer.params.tensors_mut(), &rgrads, self.lr_renderer);
        self.opt_texture
            .step(self.model.texture.features_mut(), &row_ids, &row_vals, self.lr_texture);
        if self.config.env == EnvMode::Learnable {
            let env = self.model.texture.env_mut();
            self.opt_env.step(&mut [env], &[Some(&env_grad)], self.lr_texture);
        }
        self.step += 1;
        self.log.step_losses.push(bd.total);
        let a = &mut self.accum;
        a.n += 1;
        a.total += bd.total;
        a.huber += bd.huber;
        a.fft += bd.fft;
        if let Some(v) = bd.vgg {
            a.vgg += v;
            a.has_vgg = true;
        }
        Ok(bd)
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let a = std::mem::take(&mut self.accum);
        let n = a.n.max(1) as f64;
        self.epoch += 1;
        let entry = EpochLog {
            epoch: self.epoch,
            step: self.step,
            loss: a.total / n,
            huber: a.huber / n,
            fft: a.fft / n,
            vgg: a.has_vgg.then(|| a.vgg / n),
            lr_texture: self.lr_texture,
            lr_renderer: self.lr_renderer,
            seconds: self.epoch_start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {} step {} loss {:.6} (huber {:.6}, fft {:.4}) lr {:.2e}/{:.2e}",
            entry.epoch, entry.step, entry.loss, entry.huber, entry.fft, entry.lr_texture, entry.lr_renderer
        );
        let factor = self.scheduler.observe(entry.loss);
        if factor != 1.0 {
            self.lr_texture *= factor;
            self.lr_renderer *= factor;
            info!("plateau: learning rates scaled by {factor}");
        }
        self.log.epochs.push(entry);
        self.epoch_start = Instant::now();
        if self.checkpoint.is_some() {
            self.save_checkpoint()?;
        }
        Ok(())
    }

    /// Run up to `n` further steps, closing epochs as they fill.
    pub fn run_steps(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            self.train_step()?;
            if self.accum.n == self.steps_per_epoch {
                self.finish_epoch()?;
            }
        }
        Ok(())
    }

    /// Train until `max_epochs` or `max_steps`, whichever comes first.
    pub fn run(&mut self) -> Result<()> {
        let max_steps = self.config.max_steps.unwrap_or(usize::MAX);
        while self.epoch < self.config.max_epochs && self.step < max_steps {
            self.train_step()?;
            if self.accum.n == self.steps_per_epoch {
                self.finish_epoch()?;
            }
        }
        if self.accum.n > 0 {
            self.finish_epoch()?;
        }
        Ok(())
    }

    fn save_checkpoint(&self) -> Result<()> {
        let t = self.checkpoint.as_ref().expect("checkpoint target set");
        let tmp = t.dir.with_extension("partial");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let info = CheckpointInfo {
            scene: t.scene.clone(),
            epoch: self.epoch,
            step: self.step,
            ..Default::default()
        };
        self.model.save(&tmp, &info)?;
        let cp = tmp.join("config.toml");
        std::fs::write(&cp, &t.config_text).map_err(|e| Error::io(&cp, e))?;
        self.save_optimizer(&tmp.join("optimizer"))?;
        let lp = tmp.join("log.jsonl");
        let mut f = std::fs::File::create(&lp).map_err(|e| Error::io(&lp, e))?;
        for e in &self.log.epochs {
            writeln!(f, "{}", serde_json::to_string(e).expect("log serializes")).map_err(|e| Error::io(&lp, e))?;
        }
        if t.dir.exists() {
            std::fs::remove_dir_all(&t.dir).map_err(|e| Error::io(&t.dir, e))?;
        }
        std::fs::rename(&tmp, &t.dir).map_err(|e| Error::io(&t.dir, e))
    }

    fn save_optimizer(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut f = ArrayFile::default();
        for (k, name) in self.model.renderer.params.names().iter().enumerate() {
            let n = self.opt_renderer.m[k].len();
            f.insert(format!("renderer.m.{name}"), vec![n], self.opt_renderer.m[k].clone());
            f.insert(format!("renderer.v.{name}"), vec![n], self.opt_renderer.v[k].clone());
        }
        let shape = vec![self.opt_texture.rows(), self.opt_texture.channels];
        f.insert("texture.m", shape.clone(), self.opt_texture.m.clone());
        f.insert("texture.v", shape, self.opt_texture.v.clone());
        f.insert("env.m", vec![self.opt_env.m[0].len()], self.opt_env.m[0].clone());
        f.insert("env.v", vec![self.opt_env.v[0].len()], self.opt_env.v[0].clone());
        f.save(dir.join("state.safetensors"))?;
        let state = OptimizerState {
            renderer_step: self.opt_renderer.step,
            texture_step: self.opt_texture.step,
            env_step: self.opt_env.step,
            lr_texture: self.lr_texture,
            lr_renderer: self.lr_renderer,
            scheduler: self.scheduler.clone(),
        };
        let p = dir.join("state.toml");
        std::fs::write(&p, toml::to_string(&state).expect("state serializes")).map_err(|e| Error::io(&p, e))
    }

    /// Add zero rows for new points, keeping optimizer state aligned.
    pub fn append_points(&mut self, extra: &PointCloud) {
        self.model.cloud.extend(extra);
        self.model.texture.append_zero_rows(extra.len());
        self.opt_texture.append_rows(extra.len());
    }

    /// Drop points and their optimizer rows.
    pub fn retain_points(&mut self, keep: &[bool]) -> Result<()> {
        let (cloud, texture) = crate::texture::prune(&self.model.cloud, &self.model.texture, keep)?;
        self.model.cloud = cloud;
        self.model.texture = texture;
        self.opt_texture.filter_rows(keep);
        Ok(())
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerState {
    renderer_step: u64,
    texture_step: u64,
    env_step: u64,
    lr_texture: f64,
    lr_renderer: f64,
    scheduler: PlateauScheduler,
}

/// Sum gradient rows that share an index; output rows are sorted.
fn merge_rows(mut rows: Vec<(u32, Vec<f32>)>, channels: usize) -> (Vec<u32>, Vec<f32>) {
    rows.sort_by_key(|r| r.0);
    let mut ids: Vec<u32> = Vec::with_capacity(rows.len());
    let mut vals: Vec<f32> = Vec::with_capacity(rows.len() * channels);
    for (r, v) in rows {
        if ids.last() == Some(&r) {
            let start = vals.len() - channels;
            for (a, b) in vals[start..].iter_mut().zip(&v) {
                *a += b;
            }
        } else {
            ids.push(r);
            vals.extend_from_slice(&v);
        }
    }
    (ids, vals)
}
