//! Multi-scale neural renderer with downgrade-aware gated blocks.
//!
//! Each pyramid level first passes through a DAC block: a local 3×3 branch
//! and a Fourier-convolution branch are fused, a gate head turns the fused
//! features into a sigmoid attention map, and the attention multiplies a
//! content head. Levels are then fused coarse to fine and decoded to RGB.

mod blocks;
mod params;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::blocks::{fourier_unit, SLOPE};
pub use self::params::{Bound, Init, ParamStore};

use crate::arrays::ArrayFile;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub const ARCH_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// One gate value per pixel, shared by all channels.
    #[default]
    PerPixel,
    PerChannel,
}

fn default_ratio() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RendererConfig {
    #[serde(default)]
    pub version: u32,
    /// Texture feature width.
    pub in_channels: usize,
    /// Feature width per scale, finest first; its length is the scale count.
    pub widths: Vec<usize>,
    /// Fraction of channels routed through the global (spectral) FFC path.
    #[serde(default = "default_ratio")]
    pub global_ratio: f64,
    #[serde(default)]
    pub attention: AttentionMode,
    /// Leaky ReLU after the spectral 1×1 convolution.
    #[serde(default = "default_true")]
    pub spectral_activation: bool,
}

impl Default for RendererConfig {
    fn default() -> Self {
        RendererConfig {
            version: ARCH_VERSION,
            in_channels: 8,
            widths: vec![64, 128, 256, 256],
            global_ratio: 0.5,
            attention: AttentionMode::PerPixel,
            spectral_activation: true,
        }
    }
}

impl RendererConfig {
    pub fn scales(&self) -> usize {
        self.widths.len()
    }

    /// Local/global channel split of a block of width `w`.
    pub fn split(&self, w: usize) -> (usize, usize) {
        let cg = (w as f64 * self.global_ratio).round() as usize;
        (w - cg, cg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() {
            return Err(Error::Config("renderer needs input channels and at least one scale".into()));
        }
        if !(self.global_ratio > 0.0 && self.global_ratio < 1.0) {
            return Err(Error::Config(format!(
                "global_ratio must lie in (0,1), got {}",
                self.global_ratio
            )));
        }
        for &w in &self.widths {
            let exact = w as f64 * self.global_ratio;
            let (cl, cg) = self.split(w);
            if (exact - cg as f64).abs() > 1e-9 || cl == 0 || cg % 2 != 0 {
                return Err(Error::Config(format!(
                    "width {w} cannot be split with global_ratio {} into an integer local part and an even global part",
                    self.global_ratio
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: RendererConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if c.version != ARCH_VERSION {
            return Err(Error::checkpoint(path, format!("architecture version {} is not supported", c.version)));
        }
        c.validate()?;
        Ok(c)
    }
}

/// Forward results kept on the tape.
#[derive(Clone, Debug)]
pub struct RenderVars {
    /// `[B,3,H,W]` before clamping.
    pub image: Var,
    /// One attention map per scale, finest first.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Renderer<T: Scalar = f32> {
    pub config: RendererConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Renderer<T> {
    pub fn new(config: RendererConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let k = Init::Kaiming(SLOPE);
        let conv = |p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: String, cin: usize, cout: usize, ks: usize| {
            p.add(format!("{name}.weight"), [cout, cin, ks, ks], k, rng);
            p.add(format!("{name}.bias"), [1, cout, 1, 1], Init::Zeros, rng);
        };
        let s_count = config.scales();
        for (s, &w) in config.widths.iter().enumerate() {
            let c = config.in_channels;
            let pre = format!("s{s}.dac");
            conv(&mut p, &mut rng, format!("{pre}.local"), c, w, 3);
            conv(&mut p, &mut rng, format!("{pre}.lift"), c, w, 1);
            blocks::add_ffc_params(&mut p, &mut rng, &format!("{pre}.ffc"), &config, w);
            conv(&mut p, &mut rng, format!("{pre}.fuse"), 2 * w, w, 1);
            let gate_out = match config.attention {
                AttentionMode::PerPixel => 1,
                AttentionMode::PerChannel => w,
            };
            conv(&mut p, &mut rng, format!("{pre}.gate"), w, gate_out, 3);
            conv(&mut p, &mut rng, format!("{pre}.content"), w, w, 3);
            conv(&mut p, &mut rng, format!("s{s}.trunk"), w, w, 3);
            if s + 1 < s_count {
                let wc = config.widths[s + 1];
                conv(&mut p, &mut rng, format!("s{s}.fuse"), w + wc, w, 1);
                conv(&mut p, &mut rng, format!("s{s}.refine"), w, w, 3);
            }
        }
        conv(&mut p, &mut rng, "head".into(), config.widths[0], 3, 3);
        Ok(Renderer { config, params: p })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    fn check_buffers(&self, shapes: &[[usize; 4]]) -> Result<()> {
        if shapes.len() != self.config.scales() {
            return Err(Error::Shape(format!(
                "renderer has {} scales but got {} buffers",
                self.config.scales(),
                shapes.len()
            )));
        }
        let [b, c, h, w] = shapes[0];
        for (s, sh) in shapes.iter().enumerate() {
            let d = 1usize << s;
            let want = [b, c, h.div_ceil(d), w.div_ceil(d)];
            if *sh != want || c != self.config.in_channels {
                return Err(Error::Shape(format!(
                    "buffer {s} has shape {sh:?}, expected {want:?} with {} channels",
                    self.config.in_channels
                )));
            }
        }
        Ok(())
    }

    /// Record the forward pass of `buffers` (fine to coarse) on `g`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, buffers: &[Var]) -> Result<RenderVars> {
        let shapes: Vec<[usize; 4]> = buffers.iter().map(|&b| g.shape(b)).collect();
        self.check_buffers(&shapes)?;
        let cfg = &self.config;
        let conv = |g: &mut Graph<T>, name: &str, x: Var| g.conv2d(x, p.var(&format!("{name}.weight")), Some(p.var(&format!("{name}.bias"))));
        let mut trunk = Vec::with_capacity(buffers.len());
        let mut attention = Vec::with_capacity(buffers.len());
        for (s, &x) in buffers.iter().enumerate() {
            let (out, att) = blocks::dac(g, p, &format!("s{s}.dac"), cfg, cfg.widths[s], x);
            attention.push(att);
            let t = conv(g, &format!("s{s}.trunk"), out);
            trunk.push(g.leaky_relu(t, SLOPE));
        }
        let mut f = *trunk.last().expect("at least one scale");
        for s in (0..buffers.len() - 1).rev() {
            let [_, _, h, w] = shapes[s];
            let up = g.upsample2x(f, h, w);
            let cat = g.concat(&[trunk[s], up]);
            let fused = conv(g, &format!("s{s}.fuse"), cat);
            let fused = g.leaky_relu(fused, SLOPE);
            let r = conv(g, &format!("s{s}.refine"), fused);
            let r = g.leaky_relu(r, SLOPE);
            f = g.add(fused, r);
        }
        let image = conv(g, "head", f);
        Ok(RenderVars { image, attention })
    }

    /// Clamped `[B,3,H,W]` image plus per-scale attention maps, without gradients.
    pub fn render_with_attention(&self, buffers: &[Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let vars: Vec<Var> = buffers.iter().map(|b| g.constant(b.clone())).collect();
        let out = self.forward(&mut g, &p, &vars)?;
        let img = clamp_unit(g.value(out.image));
        let att = out.attention.iter().map(|&a| g.value(a).clone()).collect();
        Ok((img, att))
    }

    pub fn render(&self, buffers: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.render_with_attention(buffers).map(|r| r.0)
    }
}

pub fn clamp_unit<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}

impl Renderer<f32> {
    /// Writes `arch.toml` and `weights.safetensors` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("arch.toml");
        std::fs::write(&p, toml::to_string(&self.config).expect("config serializes")).map_err(|e| Error::io(&p, e))?;
        let mut f = self.params.to_arrays();
        f.metadata.insert("arch_version".into(), ARCH_VERSION.to_string());
        f.save(dir.join("weights.safetensors"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = RendererConfig::load(dir.join("arch.toml"))?;
        let mut r = Renderer::new(config, 0)?;
        let wp = dir.join("weights.safetensors");
        let f = ArrayFile::load(&wp)?;
        r.params.load_arrays(f, &wp)?;
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RendererConfig {
        RendererConfig {
            in_channels: 4,
            widths: vec![4, 8],
            ..Default::default()
        }
    }

    #[test]
    fn split_validation() {
        let mut c = tiny();
        c.widths = vec![6];
        assert!(c.validate().is_err());
        c.widths = vec![8];
        c.global_ratio = 0.3;
        assert!(c.validate().is_err());
        c.global_ratio = 1.0;
        assert!(c.validate().is_err());
        assert!(RendererConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_buffers_give_head_bias() {
        let mut r = Renderer::<f64>::new(tiny(), 1).unwrap();
        r.params.get_mut("head.bias").unwrap().data_mut().copy_from_slice(&[0.2, 0.4, 1.7]);
        let bufs = vec![Tensor::zeros([1, 4, 9, 7]), Tensor::zeros([1, 4, 5, 4])];
        let img = r.render(&bufs).unwrap();
        assert_eq!(img.shape(), [1, 3, 9, 7]);
        for (c, want) in [0.2, 0.4, 1.0].iter().enumerate() {
            assert!(img.channel(0, c).iter().all(|v| v == want));
        }
    }

    #[test]
    fn scale_mismatch_is_error() {
        let r = Renderer::<f32>::new(tiny(), 1).unwrap();
        assert!(r.render(&[Tensor::zeros([1, 4, 8, 8])]).is_err());
        assert!(r.render(&[Tensor::zeros([1, 4, 8, 8]), Tensor::zeros([1, 4, 3, 4])]).is_err());
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let r = Renderer::<f32>::new(tiny(), 1).unwrap();
        let by_shape: usize = r.params.tensors().iter().map(|t| t.shape().iter().product::<usize>()).sum();
        assert_eq!(r.num_parameters(), by_shape);
        assert!(r.params.names().iter().all(|n| !n.ends_with(".bias") || r.params.get(n).unwrap().data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn save_load_round_trip() {
        let r = Renderer::<f32>::new(tiny(), 9).unwrap();
        let d = tempfile::tempdir().unwrap();
        r.save(d.path()).unwrap();
        assert_eq!(Renderer::load(d.path()).unwrap(), r);
    }

    #[test]
    fn deterministic_init_and_output() {
        let a = Renderer::<f32>::new(tiny(), 5).unwrap();
        let b = Renderer::<f32>::new(tiny(), 5).unwrap();
        assert_eq!(a, b);
        let bufs = vec![Tensor::full([1, 4, 8, 8], 0.3f32), Tensor::full([1, 4, 4, 4], -0.1)];
        assert_eq!(a.render(&bufs).unwrap(), b.render(&bufs).unwrap());
    }
}
