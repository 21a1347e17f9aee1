use std::path::Path;

use pointnr::arrays::ArrayFile;
use pointnr::evaluator::{ssim, Lpips};
use pointnr::scene::RgbImage;
use pointnr::vgg::{synthetic_weights, Arch};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/lpips_oracle.safetensors");

fn chw_image(file: &ArrayFile, name: &str) -> RgbImage {
    let a = &file.arrays[name];
    let (h, w) = (a.shape[1], a.shape[2]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        [a.data[i], a.data[h * w + i], a.data[2 * h * w + i]]
    })
}

fn values(file: &ArrayFile, key: &str) -> Vec<f64> {
    file.metadata[key].split(',').map(|s| s.parse().unwrap()).collect()
}

fn pairs(file: &ArrayFile) -> Vec<(RgbImage, RgbImage)> {
    (0..5)
        .map(|i| (chw_image(file, &format!("pred{i}")), chw_image(file, &format!("target{i}"))))
        .collect()
}

#[test]
fn lpips_matches_reference_implementation() {
    let fixture = ArrayFile::load(FIXTURE).unwrap();
    let mut weights = synthetic_weights(Arch::Vgg16, 13, fixture.metadata["backbone_seed"].parse().unwrap());
    for (k, a) in fixture.arrays.iter().filter(|(k, _)| k.starts_with("lin")) {
        weights.insert(k.clone(), a.shape.clone(), a.data.clone());
    }
    let lpips = Lpips::from_arrays(&mut weights, Path::new(FIXTURE)).unwrap();
    for ((a, b), want) in pairs(&fixture).iter().zip(values(&fixture, "expected")) {
        let got = lpips.distance(a, b).unwrap();
        assert!((got - want).abs() < 1e-4, "lpips {got} vs reference {want}");
        assert!(lpips.distance(a, a).unwrap().abs() < 1e-6);
        assert!(lpips.distance(b, a).unwrap() >= 0.0);
    }
}

#[test]
fn ssim_matches_scikit_image() {
    let fixture = ArrayFile::load(FIXTURE).unwrap();
    for ((a, b), want) in pairs(&fixture).iter().zip(values(&fixture, "ssim")) {
        let got = ssim(a, b).unwrap();
        assert!((got - want).abs() < 1e-6, "ssim {got} vs reference {want}");
    }
}

#[test]
fn lpips_missing_asset_is_reported() {
    let spec = pointnr::vgg::AssetSpec {
        path: Some("/nonexistent/lpips.safetensors".into()),
        sha256: None,
    };
    assert!(matches!(Lpips::load(&spec), Err(pointnr::Error::Asset { .. })));
}
