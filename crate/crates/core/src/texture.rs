//! Learnable per-point neural texture, environment vector, gather/scatter and pruning.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arrays::ArrayFile;
use crate::error::{Error, Result};
use crate::rasterizer::{Fragment, ENV};
use crate::scene::{load_point_cloud, save_point_cloud, PlyEncoding, PointCloud};
use crate::tensor::{Scalar, Tensor};

pub const TEXTURE_FORMAT_VERSION: u32 = 1;

/// `N×C` feature rows plus one environment row filling uncovered pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralTexture<T = f32> {
    channels: usize,
    features: Vec<T>,
    env: Vec<T>,
}

/// Gradient of a gathered buffer pulled back onto the texture.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureGrad<T = f32> {
    /// Sorted, unique rows that received gradient.
    pub rows: Vec<u32>,
    /// `rows.len() × C` values aligned with `rows`.
    pub values: Vec<T>,
    pub env: Vec<T>,
}

impl<T: Scalar> NeuralTexture<T> {
    pub fn zeros(n_points: usize, channels: usize) -> Result<Self> {
        if n_points == 0 {
            return Err(Error::Data("texture needs at least one point".into()));
        }
        if channels == 0 {
            return Err(Error::Config("texture needs at least one channel".into()));
        }
        Ok(NeuralTexture {
            channels,
            features: vec![T::zero(); n_points * channels],
            env: vec![T::zero(); channels],
        })
    }

    pub fn from_parts(features: Vec<T>, env: Vec<T>, channels: usize) -> Result<Self> {
        if channels == 0 || env.len() != channels || features.len() % channels != 0 || features.is_empty() {
            return Err(Error::Shape(format!(
                "texture of {} values with env of {} does not fit {channels} channels",
                features.len(),
                env.len()
            )));
        }
        if features.iter().chain(&env).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("texture holds non-finite values".into()));
        }
        Ok(NeuralTexture { channels, features, env })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [T] {
        &mut self.features
    }

    pub fn env(&self) -> &[T] {
        &self.env
    }

    pub fn env_mut(&mut self) -> &mut [T] {
        &mut self.env
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.features[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.features.iter().chain(&self.env).all(|v| v.is_finite())
    }

    /// `σ_i = Σ_c |T_ic|`.
    pub fn pseudo_density(&self) -> Vec<T> {
        self.features
            .chunks_exact(self.channels)
            .map(|r| r.iter().map(|v| v.abs()).sum())
            .collect()
    }

    /// Rows whose mask entry is true, order preserved; env untouched.
    pub fn filter(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.len() {
            return Err(Error::Shape(format!("mask of {} for {} rows", keep.len(), self.len())));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Data("pruning would remove every point".into()));
        }
        let features = self
            .features
            .chunks_exact(self.channels)
            .zip(keep)
            .filter(|(_, &k)| k)
            .flat_map(|(r, _)| r.iter().copied())
            .collect();
        Ok(NeuralTexture {
            channels: self.channels,
            features,
            env: self.env.clone(),
        })
    }

    pub fn append_zero_rows(&mut self, n: usize) {
        self.features.extend(std::iter::repeat(T::zero()).take(n * self.channels));
    }

    fn check_fragment(&self, f: &Fragment) -> Result<()> {
        let n = self.len() as i32;
        match f.index.iter().find(|&&i| i != ENV && !(0..n).contains(&i)) {
            Some(i) => Err(Error::Data(format!(
                "fragment references point {i} but the texture has {n} rows"
            ))),
            None => Ok(()),
        }
    }

    /// Neural buffers `[B,C,H,W]` for equally sized fragments.
    pub fn gather(&self, fragments: &[&Fragment]) -> Result<Tensor<T>> {
        let first = fragments
            .first()
            .ok_or_else(|| Error::Shape("gather needs at least one fragment".into()))?;
        let (w, h) = (first.width as usize, first.height as usize);
        let c = self.channels;
        let mut out = Tensor::zeros([fragments.len(), c, h, w]);
        for (b, f) in fragments.iter().enumerate() {
            if (f.width as usize, f.height as usize) != (w, h) {
                return Err(Error::Shape("fragments in one gather must share a size".into()));
            }
            self.check_fragment(f)?;
            let item = out.item_mut(b);
            for (p, &i) in f.index.iter().enumerate() {
                let src = if i == ENV { &self.env[..] } else { self.row(i as usize) };
                for (ch, &v) in src.iter().enumerate() {
                    item[ch * h * w + p] = v;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`gather`](Self::gather): each row collects the sum of the
    /// buffer gradient over the pixels that reference it.
    pub fn scatter_grad(&self, grad: &Tensor<T>, fragments: &[&Fragment]) -> Result<TextureGrad<T>> {
        let c = self.channels;
        let [b, gc, h, w] = grad.shape();
        if b != fragments.len() || gc != c {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match {} fragments of {c} channels",
                grad.shape(),
                fragments.len()
            )));
        }
        let mut rows: Vec<u32> = Vec::new();
        for f in fragments {
            if (f.width as usize, f.height as usize) != (w, h) {
                return Err(Error::Shape("fragment and gradient sizes differ".into()));
            }
            self.check_fragment(f)?;
            rows.extend(f.index.iter().filter(|&&i| i != ENV).map(|&i| i as u32));
        }
        rows.sort_unstable();
        rows.dedup();
        let mut values = vec![T::zero(); rows.len() * c];
        let mut env = vec![T::zero(); c];
        for (bi, f) in fragments.iter().enumerate() {
            let g = grad.item(bi);
            for (p, &i) in f.index.iter().enumerate() {
                let dst = if i == ENV {
                    &mut env[..]
                } else {
                    let r = rows.binary_search(&(i as u32)).expect("row collected above");
                    &mut values[r * c..(r + 1) * c]
                };
                for (ch, d) in dst.iter_mut().enumerate() {
                    *d = *d + g[ch * h * w + p];
                }
            }
        }
        Ok(TextureGrad { rows, values, env })
    }
}

/// Drop points and their texture rows together.
pub fn prune(cloud: &PointCloud, texture: &NeuralTexture, keep: &[bool]) -> Result<(PointCloud, NeuralTexture)> {
    if cloud.len() != texture.len() {
        return Err(Error::Data(format!(
            "cloud has {} points but texture has {} rows",
            cloud.len(),
            texture.len()
        )));
    }
    let t = texture.filter(keep)?;
    Ok((cloud.filter(keep), t))
}

#[derive(Debug, Serialize, Deserialize)]
struct TextureMeta {
    format_version: u32,
    channels: usize,
    num_points: usize,
}

/// Writes `points.ply`, `texture.safetensors` and `meta.toml` into `dir`.
pub fn save_textured_cloud(cloud: &PointCloud, texture: &NeuralTexture, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if cloud.len() != texture.len() {
        return Err(Error::Data("cloud and texture row counts differ".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_point_cloud(cloud, dir.join("points.ply"), PlyEncoding::BinaryLittleEndian)?;
    let mut f = ArrayFile::default();
    f.insert("features", vec![texture.len(), texture.channels()], texture.features.clone());
    f.insert("env", vec![texture.channels()], texture.env.clone());
    f.save(dir.join("texture.safetensors"))?;
    let meta = TextureMeta {
        format_version: TEXTURE_FORMAT_VERSION,
        channels: texture.channels(),
        num_points: texture.len(),
    };
    let p = dir.join("meta.toml");
    std::fs::write(&p, toml::to_string(&meta).expect("meta serializes")).map_err(|e| Error::io(&p, e))
}

pub fn load_textured_cloud(dir: impl AsRef<Path>) -> Result<(PointCloud, NeuralTexture)> {
    let dir = dir.as_ref();
    let mp = dir.join("meta.toml");
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: TextureMeta = toml::from_str(&text).map_err(|e| Error::checkpoint(&mp, e.to_string()))?;
    if meta.format_version != TEXTURE_FORMAT_VERSION {
        return Err(Error::checkpoint(
            &mp,
            format!("texture format version {} is not supported", meta.format_version),
        ));
    }
    let cloud = load_point_cloud(dir.join("points.ply"))?;
    let tp = dir.join("texture.safetensors");
    let mut f = ArrayFile::load(&tp)?;
    let features = f.take("features", &[meta.num_points, meta.channels], &tp)?;
    let env = f.take("env", &[meta.channels], &tp)?;
    if cloud.len() != meta.num_points {
        return Err(Error::checkpoint(
            dir,
            format!("{} points in PLY but texture has {} rows", cloud.len(), meta.num_points),
        ));
    }
    let texture = NeuralTexture::from_parts(features, env, meta.channels)?;
    Ok((cloud, texture))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frag(w: u32, h: u32, index: Vec<i32>) -> Fragment {
        let depth = index.iter().map(|&i| if i == ENV { f32::INFINITY } else { 1.0 }).collect();
        Fragment {
            scale: 0,
            width: w,
            height: h,
            index,
            depth,
        }
    }

    #[test]
    fn zero_init_and_density() {
        let t = NeuralTexture::<f32>::zeros(10, 8).unwrap();
        assert_eq!((t.len(), t.channels(), t.env().len()), (10, 8, 8));
        assert!(t.pseudo_density().iter().all(|&s| s == 0.0));
        assert!(NeuralTexture::<f32>::zeros(0, 8).is_err());
        assert_eq!(NeuralTexture::<f32>::zeros(1, 1).unwrap().features(), &[0.0]);
        let mut t = NeuralTexture::<f32>::zeros(1, 8).unwrap();
        t.row_mut(0)[..3].copy_from_slice(&[1.0, -2.0, 0.5]);
        assert_eq!(t.pseudo_density(), vec![3.5]);
    }

    #[test]
    fn gather_lookup_and_env() {
        let mut t = NeuralTexture::<f32>::zeros(4, 2).unwrap();
        t.row_mut(3).copy_from_slice(&[7.0, 8.0]);
        t.env_mut().copy_from_slice(&[-1.0, -2.0]);
        let f = frag(2, 1, vec![3, ENV]);
        let b = t.gather(&[&f]).unwrap();
        assert_eq!(b.data(), &[7.0, -1.0, 8.0, -2.0]);
        let bad = frag(1, 1, vec![4]);
        assert!(t.gather(&[&bad]).is_err());
    }

    #[test]
    fn scatter_conserves_gradient_mass() {
        let t = NeuralTexture::<f64>::zeros(3, 2).unwrap();
        let f = frag(3, 2, vec![0, 2, 2, ENV, 0, ENV]);
        let g = Tensor::from_vec([1, 2, 2, 3], (0..12).map(|v| v as f64).collect());
        let sg = t.scatter_grad(&g, &[&f]).unwrap();
        assert_eq!(sg.rows, vec![0, 2]);
        let total: f64 = sg.values.iter().chain(&sg.env).sum();
        assert_eq!(total, g.sum());
        assert_eq!(&sg.values[..2], &[0.0 + 4.0, 6.0 + 10.0]);
    }

    #[test]
    fn prune_keeps_rows_in_order() {
        let cloud = PointCloud::new(vec![[0.0; 3], [1.0; 3], [2.0; 3]]);
        let t = NeuralTexture::from_parts(vec![0.0, 1.0, 2.0], vec![9.0], 1).unwrap();
        let (c2, t2) = prune(&cloud, &t, &[true, false, true]).unwrap();
        assert_eq!(c2.positions, vec![[0.0; 3], [2.0; 3]]);
        assert_eq!(t2.features(), &[0.0, 2.0]);
        assert_eq!(t2.env(), &[9.0]);
        let (c3, t3) = prune(&cloud, &t, &[true; 3]).unwrap();
        assert_eq!((c3, t3), (cloud.clone(), t.clone()));
        assert!(prune(&cloud, &t, &[false; 3]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let cloud = PointCloud::new(vec![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]);
        let t = NeuralTexture::from_parts(vec![0.25, -1.0, 3.0, 1e-7], vec![0.5, 0.125], 2).unwrap();
        let d = tempfile::tempdir().unwrap();
        save_textured_cloud(&cloud, &t, d.path()).unwrap();
        let (c2, t2) = load_textured_cloud(d.path()).unwrap();
        assert_eq!(c2.positions, cloud.positions);
        assert_eq!(t2, t);
    }

    proptest! {
        #[test]
        fn gather_is_linear(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            vals in proptest::collection::vec(-1.0f64..1.0, 2 * 5 * 3),
            idx in proptest::collection::vec(-1i32..5, 12),
        ) {
            let (x, rest) = vals.split_at(15);
            let (tx, ty) = (x.to_vec(), rest.to_vec());
            let t1 = NeuralTexture::from_parts(tx[..12].to_vec(), tx[12..].to_vec(), 3).unwrap();
            let t2 = NeuralTexture::from_parts(ty[..12].to_vec(), ty[12..].to_vec(), 3).unwrap();
            let comb: Vec<f64> = tx.iter().zip(&ty).map(|(p, q)| a * p + b * q).collect();
            let t3 = NeuralTexture::from_parts(comb[..12].to_vec(), comb[12..].to_vec(), 3).unwrap();
            let idx: Vec<i32> = idx.into_iter().map(|i| i.min(3)).collect();
            let f = frag(4, 3, idx);
            let g1 = t1.gather(&[&f]).unwrap();
            let g2 = t2.gather(&[&f]).unwrap();
            let g3 = t3.gather(&[&f]).unwrap();
            for ((u, v), w) in g1.data().iter().zip(g2.data()).zip(g3.data()) {
                prop_assert!((a * u + b * v - w).abs() < 1e-12);
            }
        }
    }
}
