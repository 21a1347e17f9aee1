//! VGG feature extractors over pretrained weights stored as safetensors
//! (torchvision `features.{i}.weight` / `features.{i}.bias` naming).

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::arrays::ArrayFile;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const VGG19_ENV: &str = "POINTNR_VGG19";
pub const LPIPS_ENV: &str = "POINTNR_LPIPS_VGG";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Vgg16,
    Vgg19,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layer {
    /// Convolution at torchvision index `i`, always followed by ReLU.
    Conv { index: usize, cin: usize, cout: usize },
    Pool,
}

fn layers(arch: Arch) -> Vec<Layer> {
    let blocks: &[(usize, usize)] = match arch {
        Arch::Vgg16 => &[(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)],
        Arch::Vgg19 => &[(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)],
    };
    let mut out = Vec::new();
    let (mut index, mut cin) = (0, 3);
    for (b, &(cout, n)) in blocks.iter().enumerate() {
        if b > 0 {
            out.push(Layer::Pool);
            index += 1;
        }
        for _ in 0..n {
            out.push(Layer::Conv { index, cin, cout });
            index += 2;
            cin = cout;
        }
    }
    out
}

/// Pretrained convolutional trunk truncated after its last tap.
#[derive(Clone, Debug)]
pub struct VggFeatures<T: Scalar = f32> {
    layers: Vec<Layer>,
    weights: Vec<(Tensor<T>, Tensor<T>)>,
    /// 1-based convolution counts whose post-ReLU output is returned.
    taps: Vec<usize>,
}

impl<T: Scalar> VggFeatures<T> {
    /// `taps` counts convolutions from 1; weights beyond the last tap are not needed.
    pub fn from_arrays(arch: Arch, taps: &[usize], file: &mut ArrayFile, path: &Path) -> Result<Self> {
        let last = *taps.iter().max().expect("at least one tap");
        let mut kept = Vec::new();
        let mut weights = Vec::new();
        let mut convs = 0;
        for l in layers(arch) {
            if convs == last {
                break;
            }
            if let Layer::Conv { index, cin, cout } = l {
                let w = file.take(&format!("features.{index}.weight"), &[cout, cin, 3, 3], path)?;
                let b = file.take(&format!("features.{index}.bias"), &[cout], path)?;
                weights.push((
                    Tensor::<f32>::from_vec([cout, cin, 3, 3], w).cast(),
                    Tensor::<f32>::from_vec([1, cout, 1, 1], b).cast(),
                ));
                convs += 1;
            }
            kept.push(l);
        }
        if convs < last {
            return Err(Error::Config(format!("tap {last} beyond the network depth")));
        }
        Ok(VggFeatures {
            layers: kept,
            weights,
            taps: taps.to_vec(),
        })
    }

    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    /// Tap activations for an already normalized input.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.taps.len());
        let mut convs = 0;
        for l in &self.layers {
            match *l {
                Layer::Pool => h = g.max_pool2(h),
                Layer::Conv { .. } => {
                    let (w, b) = &self.weights[convs];
                    let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
                    let c = g.conv2d(h, w, Some(b));
                    h = g.relu(c);
                    convs += 1;
                    if self.taps.contains(&convs) {
                        out.push(h);
                    }
                }
            }
        }
        out
    }
}

/// Locates a weight asset from an explicit path or an environment variable and
/// verifies its checksum when one is given.
#[derive(Clone, Debug, Default)]
pub struct AssetSpec {
    pub path: Option<PathBuf>,
    pub sha256: Option<String>,
}

impl AssetSpec {
    pub fn resolve(&self, name: &str, env: &str, hint: &str) -> Result<PathBuf> {
        let path = self
            .path
            .clone()
            .or_else(|| std::env::var_os(env).map(PathBuf::from))
            .ok_or_else(|| Error::Asset {
                name: name.into(),
                hint: format!("set {env} or the config path; {hint}"),
            })?;
        if !path.is_file() {
            return Err(Error::Asset {
                name: name.into(),
                hint: format!("{} not found; {hint}", path.display()),
            });
        }
        if let Some(want) = &self.sha256 {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let got = hex::encode(Sha256::digest(&bytes));
            if !got.eq_ignore_ascii_case(want) {
                return Err(Error::Asset {
                    name: name.into(),
                    hint: format!("{}: sha256 {got} does not match expected {want}", path.display()),
                });
            }
        }
        Ok(path)
    }
}

pub const VGG19_HINT: &str = "export torchvision's vgg19(weights=\"IMAGENET1K_V1\").features state dict to safetensors (see README)";

/// The perceptual-loss extractor: post-ReLU features after convolutions 2, 4, 8 and 12.
pub fn load_vgg19_loss<T: Scalar>(asset: &AssetSpec) -> Result<VggFeatures<T>> {
    let path = asset.resolve("vgg19", VGG19_ENV, VGG19_HINT)?;
    let mut f = ArrayFile::load(&path)?;
    VggFeatures::from_arrays(Arch::Vgg19, &[2, 4, 8, 12], &mut f, &path)
}

/// Maps `[0,1]` RGB to the extractor's input statistics.
pub fn imagenet_normalize<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let scale: Vec<f64> = IMAGENET_STD.iter().map(|s| 1.0 / s).collect();
    let shift: Vec<f64> = IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| -m / s).collect();
    g.channel_affine(x, &scale, &shift)
}

/// Deterministic stand-in weights with the torchvision layout, for tests and
/// for exercising the pipeline without the pretrained asset.
pub fn synthetic_weights(arch: Arch, convs: usize, seed: u64) -> ArrayFile {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut f = ArrayFile::default();
    for l in layers(arch).into_iter().filter(|l| matches!(l, Layer::Conv { .. })).take(convs) {
        if let Layer::Conv { index, cin, cout } = l {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let w = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound) as f32).collect();
            let b = (0..cout).map(|_| rng.gen_range(-0.05..0.05)).collect();
            f.insert(format!("features.{index}.weight"), vec![cout, cin, 3, 3], w);
            f.insert(format!("features.{index}.bias"), vec![cout], b);
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torchvision_indices() {
        let convs: Vec<usize> = layers(Arch::Vgg19)
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { index, .. } => Some(*index),
                Layer::Pool => None,
            })
            .collect();
        assert_eq!(&convs[..12], &[0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25]);
        let v16: Vec<usize> = layers(Arch::Vgg16)
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { index, .. } => Some(*index),
                Layer::Pool => None,
            })
            .collect();
        assert_eq!(v16, vec![0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28]);
    }

    #[test]
    fn missing_asset_names_env_var() {
        let spec = AssetSpec {
            path: Some("/nonexistent/vgg.safetensors".into()),
            sha256: None,
        };
        let e = load_vgg19_loss::<f32>(&spec).unwrap_err();
        assert!(matches!(e, Error::Asset { .. }));
    }

    #[test]
    fn checksum_is_enforced() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("w.safetensors");
        synthetic_weights(Arch::Vgg19, 2, 1).save(&p).unwrap();
        let bad = AssetSpec {
            path: Some(p.clone()),
            sha256: Some("00".repeat(32)),
        };
        assert!(bad.resolve("vgg19", VGG19_ENV, "").is_err());
        let good = AssetSpec {
            path: Some(p.clone()),
            sha256: Some(hex::encode(Sha256::digest(std::fs::read(&p).unwrap()))),
        };
        assert_eq!(good.resolve("vgg19", VGG19_ENV, "").unwrap(), p);
    }

    #[test]
    fn tap_shapes() {
        let mut f = synthetic_weights(Arch::Vgg19, 12, 2);
        let v = VggFeatures::<f32>::from_arrays(Arch::Vgg19, &[2, 4, 8, 12], &mut f, Path::new("mem")).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 3, 16, 16], 0.5));
        let taps = v.forward(&mut g, x);
        let shapes: Vec<[usize; 4]> = taps.iter().map(|&t| g.shape(t)).collect();
        assert_eq!(shapes, vec![[1, 64, 16, 16], [1, 128, 8, 8], [1, 256, 4, 4], [1, 512, 2, 2]]);
    }
}
