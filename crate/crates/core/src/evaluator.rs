//! Image-quality metrics and test-split evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arrays::ArrayFile;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::rasterizer::RasterBackend;
use crate::scene::{CameraModel, RgbImage, Scene};
use crate::tensor::Tensor;
use crate::vgg::{Arch, AssetSpec, VggFeatures, LPIPS_ENV};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_size(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `10·log10(1/MSE)`, capped for identical images.
pub fn psnr(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    same_size(pred, target)?;
    let mse = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / pred.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-region filtering of a `w×h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over the fully covered window positions, averaged over RGB.
pub fn ssim(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    same_size(pred, target)?;
    let (w, h) = (pred.width as usize, pred.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = pred.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let b: Vec<f64> = target.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(&a, w, h, &k);
        let mu_b = filter_valid(&b, w, h, &k);
        let aa = filter_valid(&prod(&a, &a), w, h, &k);
        let bb = filter_valid(&prod(&b, &b), w, h, &k);
        let ab = filter_valid(&prod(&a, &b), w, h, &k);
        let n = mu_a.len();
        let mut s = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            s += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += s / n as f64;
    }
    Ok(total / 3.0)
}

pub const LPIPS_SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
pub const LPIPS_SCALE: [f64; 3] = [0.458, 0.448, 0.450];
/// VGG-16 convolutions whose ReLU outputs are compared (relu1_2 … relu5_3).
pub const LPIPS_TAPS: [usize; 5] = [2, 4, 7, 10, 13];
pub const LPIPS_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
const LPIPS_EPS: f64 = 1e-10;

pub const LPIPS_HINT: &str =
    "export torchvision vgg16 features plus the lpips v0.1 linear heads (lin{k}.model.1.weight) to one safetensors file (see README)";

/// Learned perceptual distance with the VGG backbone.
#[derive(Clone, Debug)]
pub struct Lpips {
    net: VggFeatures<f32>,
    lin: Vec<Vec<f32>>,
}

impl Lpips {
    pub fn from_arrays(file: &mut ArrayFile, path: &Path) -> Result<Self> {
        let net = VggFeatures::from_arrays(Arch::Vgg16, &LPIPS_TAPS, file, path)?;
        let lin = LPIPS_CHANNELS
            .iter()
            .enumerate()
            .map(|(k, &c)| file.take(&format!("lin{k}.model.1.weight"), &[1, c, 1, 1], path))
            .collect::<Result<_>>()?;
        Ok(Lpips { net, lin })
    }

    pub fn load(asset: &AssetSpec) -> Result<Self> {
        let path = asset.resolve("lpips-vgg", LPIPS_ENV, LPIPS_HINT)?;
        let mut f = ArrayFile::load(&path)?;
        Self::from_arrays(&mut f, &path)
    }

    fn features(&self, img: &RgbImage) -> Vec<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(img.to_tensor());
        let scale: Vec<f64> = LPIPS_SCALE.iter().map(|s| 2.0 / s).collect();
        let shift: Vec<f64> = LPIPS_SHIFT.iter().zip(&LPIPS_SCALE).map(|(m, s)| (-1.0 - m) / s).collect();
        let x = g.channel_affine(x, &scale, &shift);
        self.net.forward(&mut g, x).into_iter().map(|v| g.value(v).clone()).collect()
    }

    pub fn distance(&self, pred: &RgbImage, target: &RgbImage) -> Result<f64> {
        same_size(pred, target)?;
        let fa = self.features(pred);
        let fb = self.features(target);
        let mut total = 0.0;
        for (k, (a, b)) in fa.iter().zip(&fb).enumerate() {
            let [_, c, h, w] = a.shape();
            let hw = h * w;
            let (a, b) = (a.data(), b.data());
            let mut layer = 0.0;
            for p in 0..hw {
                let norm = |t: &[f32]| (0..c).map(|ch| (t[ch * hw + p] as f64).powi(2)).sum::<f64>().sqrt() + LPIPS_EPS;
                let (na, nb) = (norm(a), norm(b));
                layer += (0..c)
                    .map(|ch| {
                        let d = a[ch * hw + p] as f64 / na - b[ch * hw + p] as f64 / nb;
                        self.lin[k][ch] as f64 * d * d
                    })
                    .sum::<f64>();
            }
            total += layer / hw as f64;
        }
        Ok(total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub id: u32,
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_lpips: Option<f64>,
    /// Settings the report was produced with.
    pub config: serde_json::Value,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    pub fn from_rows(views: Vec<ViewMetrics>, config: serde_json::Value) -> Self {
        let lp: Option<Vec<f64>> = views.iter().map(|v| v.lpips).collect();
        MetricsReport {
            mean_psnr: mean(views.iter().map(|v| v.psnr)),
            mean_ssim: mean(views.iter().map(|v| v.ssim)),
            mean_lpips: lp.and_then(|l| mean(l.into_iter())),
            views,
            config,
        }
    }

    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut s = format!("{:>6}  {:<24} {:>8} {:>7} {:>7}\n", "id", "name", "psnr", "ssim", "lpips");
        for v in &self.views {
            let _ = writeln!(
                s,
                "{:>6}  {:<24} {:>8.3} {:>7.4} {:>7}",
                v.id,
                v.name,
                v.psnr,
                v.ssim,
                fmt(v.lpips, 4)
            );
        }
        let _ = writeln!(
            s,
            "{:>6}  {:<24} {:>8} {:>7} {:>7}",
            "mean",
            "",
            fmt(self.mean_psnr, 3),
            fmt(self.mean_ssim, 4),
            fmt(self.mean_lpips, 4)
        );
        s
    }

    /// Writes `metrics.jsonl` (one row per view, then a summary row) and `metrics.txt`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut lines = String::new();
        for v in &self.views {
            lines.push_str(&serde_json::to_string(v).expect("row serializes"));
            lines.push('\n');
        }
        let summary = serde_json::json!({
            "summary": true,
            "views": self.views.len(),
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "mean_lpips": self.mean_lpips,
            "config": self.config,
        });
        lines.push_str(&summary.to_string());
        lines.push('\n');
        let p = dir.join("metrics.jsonl");
        std::fs::write(&p, lines).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("metrics.txt");
        std::fs::write(&p, self.table()).map_err(|e| Error::io(&p, e))
    }
}

/// Camera and target for evaluation at `1/factor` of the capture resolution.
pub fn downscaled(camera: &CameraModel, target: &RgbImage, factor: u32) -> (CameraModel, RgbImage) {
    if factor <= 1 {
        return (*camera, target.clone());
    }
    let f = factor as f64;
    let cam = CameraModel {
        fx: camera.fx / f,
        fy: camera.fy / f,
        cx: (camera.cx + 0.5) / f - 0.5,
        cy: (camera.cy + 0.5) / f - 0.5,
        width: camera.width / factor,
        height: camera.height / factor,
    };
    (cam, target.downscale(factor))
}

/// Renders every test view and scores it; `dump` receives the rendered PNGs.
pub fn evaluate_split(
    model: &Model,
    scene: &Scene,
    backend: &dyn RasterBackend,
    lpips: Option<&Lpips>,
    dump: Option<&Path>,
) -> Result<MetricsReport> {
    let views = scene.test_views();
    if views.is_empty() {
        log::warn!("test split is empty; the report has no rows");
    }
    if let Some(d) = dump {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rows = Vec::with_capacity(views.len());
    for v in views {
        let (cam, target) = downscaled(&v.camera, &*v.image()?, scene.eval_downscale);
        let img = model.render_view(backend, &cam, &v.pose)?;
        if let Some(d) = dump {
            img.save_png(d.join(format!("{:06}.png", v.id)))?;
        }
        rows.push(ViewMetrics {
            id: v.id,
            name: v.name.clone(),
            psnr: psnr(&img, &target)?,
            ssim: ssim(&img, &target)?,
            lpips: lpips.map(|l| l.distance(&img, &target)).transpose()?,
        });
    }
    let config = serde_json::json!({
        "eval_downscale": scene.eval_downscale,
        "raster": backend.name(),
        "lpips": lpips.is_some(),
        "num_points": model.cloud.len(),
    });
    Ok(MetricsReport::from_rows(rows, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pattern(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = if (x / 2 + y / 2) % 2 == 0 { 0.9 } else { 0.1 };
            [v, 1.0 - v, 0.5 * v]
        })
    }

    #[test]
    fn psnr_closed_forms() {
        let a = pattern(16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let z = RgbImage::from_fn(8, 8, |_, _| [0.0; 3]);
        let o = RgbImage::from_fn(8, 8, |_, _| [1.0; 3]);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        let b = RgbImage::from_fn(8, 8, |_, _| [0.1; 3]);
        assert!((psnr(&z, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&z, &pattern(8, 9)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = pattern(20, 20);
        let noisy = |amp: f32| {
            RgbImage::from_fn(20, 20, |x, y| {
                let s = if (x * 7 + y * 3) % 2 == 0 { amp } else { -amp };
                a.pixel(x, y).map(|v| v + s)
            })
        };
        let vals: Vec<f64> = [0.01, 0.02, 0.05, 0.1].iter().map(|&s| psnr(&noisy(s), &a).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn ssim_identity_inversion_and_size() {
        let a = pattern(24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = RgbImage::from_fn(24, 20, |x, y| a.pixel(x, y).map(|v| 1.0 - v));
        assert!(ssim(&inv, &a).unwrap() < 0.0);
        assert!(ssim(&pattern(10, 30), &pattern(10, 30)).is_err());
    }

    proptest! {
        #[test]
        fn ssim_symmetric(seed in 0u64..1000) {
            let f = |k: u64| RgbImage::from_fn(13, 12, move |x, y| {
                let h = (x as u64 * 31 + y as u64 * 17 + k * 101 + seed).wrapping_mul(2654435761) % 1000;
                [h as f32 / 1000.0, (h % 7) as f32 / 7.0, 0.3]
            });
            let (a, b) = (f(1), f(2));
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn report_means_match_rows() {
        let rows = vec![
            ViewMetrics { id: 3, name: "a".into(), psnr: 20.0, ssim: 0.5, lpips: Some(0.1) },
            ViewMetrics { id: 9, name: "b".into(), psnr: 30.0, ssim: 0.7, lpips: Some(0.3) },
        ];
        let r = MetricsReport::from_rows(rows, serde_json::Value::Null);
        assert!((r.mean_psnr.unwrap() - 25.0).abs() < 1e-9);
        assert!((r.mean_lpips.unwrap() - 0.2).abs() < 1e-9);
        let d = tempfile::tempdir().unwrap();
        r.write(d.path()).unwrap();
        let text = std::fs::read_to_string(d.path().join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 3);
        let empty = MetricsReport::from_rows(vec![], serde_json::Value::Null);
        assert_eq!(empty.mean_psnr, None);
    }

    #[test]
    fn downscaled_camera_keeps_pixel_centres() {
        let cam = CameraModel::new(100.0, 100.0, 31.5, 15.5, 64, 32).unwrap();
        let (c, t) = downscaled(&cam, &pattern(64, 32), 2);
        assert_eq!((c.width, c.height, t.width, t.height), (32, 16, 32, 16));
        assert_eq!((c.cx, c.cy, c.fx), (15.5, 7.5, 50.0));
    }
}
