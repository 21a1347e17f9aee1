//! Training objective: weighted Huber, perceptual VGG and spectral L1 terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::FftNorm;
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use crate::vgg::{imagenet_normalize, VggFeatures};

pub const HUBER_DELTA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub huber: f64,
    pub vgg: f64,
    pub fft: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            huber: 1e3,
            vgg: 1.0,
            fft: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.huber, self.vgg, self.fft];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative with at least one positive, got {all:?}"
            )));
        }
        Ok(())
    }

    pub fn combine(&self, huber: f64, vgg: f64, fft: f64) -> f64 {
        self.huber * huber + self.vgg * vgg + self.fft * fft
    }
}

/// Per-term values; `vgg` is absent when its weight is zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub huber: f64,
    pub vgg: Option<f64>,
    pub fft: f64,
}

fn check_shapes(a: [usize; 4], b: [usize; 4]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction {a:?} vs target {b:?}")));
    }
    Ok(())
}

pub fn huber_term<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    check_shapes(g.shape(pred), target.shape())?;
    Ok(g.huber_mean(pred, target, HUBER_DELTA))
}

/// Mean absolute difference of the unnormalized real-FFT spectra, real and
/// imaginary parts stacked.
pub fn fft_term<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    check_shapes(g.shape(pred), target.shape())?;
    let t = g.constant(target.clone());
    let ft = g.rfft2(t, FftNorm::Backward);
    let fp = g.rfft2(pred, FftNorm::Backward);
    Ok(g.l1_mean(fp, ft))
}

/// Sum over taps of the mean absolute feature difference.
pub fn vgg_term<T: Scalar>(g: &mut Graph<T>, vgg: &VggFeatures<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    check_shapes(g.shape(pred), target.shape())?;
    let t = g.constant(target.clone());
    let tn = imagenet_normalize(g, t);
    let pn = imagenet_normalize(g, pred);
    let ft = vgg.forward(g, tn);
    let fp = vgg.forward(g, pn);
    let terms: Vec<(Var, f64)> = fp
        .iter()
        .zip(&ft)
        .map(|(&a, &b)| (g.l1_mean(a, b), 1.0))
        .collect();
    Ok(g.weighted_sum(&terms))
}

/// `λ_h·huber + λ_v·vgg + λ_f·fft` on the tape.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    weights: &LossWeights,
    vgg: Option<&VggFeatures<T>>,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let h = huber_term(g, pred, target)?;
    let f = fft_term(g, pred, target)?;
    let mut terms = vec![(h, weights.huber)];
    let mut vgg_value = None;
    if weights.vgg > 0.0 {
        let v = vgg.ok_or_else(|| Error::Asset {
            name: "vgg19".into(),
            hint: "the perceptual loss needs pretrained weights; provide them or set the vgg weight to 0".into(),
        })?;
        let vt = vgg_term(g, v, pred, target)?;
        vgg_value = Some(g.value(vt).data()[0].as_f64());
        terms.push((vt, weights.vgg));
    }
    terms.push((f, weights.fft));
    let total = g.weighted_sum(&terms);
    let bd = LossBreakdown {
        total: g.value(total).data()[0].as_f64(),
        huber: g.value(h).data()[0].as_f64(),
        vgg: vgg_value,
        fft: g.value(f).data()[0].as_f64(),
    };
    Ok((total, bd))
}

fn eval<T: Scalar>(pred: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let v = f(&mut g, p)?;
    Ok(g.value(v).data()[0].as_f64())
}

pub fn huber<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    eval(pred, |g, p| huber_term(g, p, target))
}

pub fn fft_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    eval(pred, |g, p| fft_term(g, p, target))
}

pub fn vgg_loss<T: Scalar>(vgg: &VggFeatures<T>, pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    eval(pred, |g, p| vgg_term(g, vgg, p, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vgg::{synthetic_weights, Arch};
    use std::path::Path;

    #[test]
    fn huber_closed_forms() {
        let t = Tensor::<f64>::full([1, 3, 4, 4], 0.3);
        assert_eq!(huber(&t, &t).unwrap(), 0.0);
        let small = t.map(|v| v + 0.5 * HUBER_DELTA);
        assert!((huber(&small, &t).unwrap() - 0.00125).abs() < 1e-12);
        let large = t.map(|v| v - 2.0 * HUBER_DELTA);
        assert!((huber(&large, &t).unwrap() - 1.5 * HUBER_DELTA * HUBER_DELTA).abs() < 1e-12);
        assert!(huber(&t, &Tensor::zeros([1, 3, 4, 5])).is_err());
    }

    #[test]
    fn fft_loss_symmetry_and_zero() {
        let a = Tensor::<f64>::from_vec([1, 1, 3, 5], (0..15).map(|v| (v as f64).sin()).collect());
        let b = a.map(|v| v * v);
        assert_eq!(fft_loss(&a, &a).unwrap(), 0.0);
        assert!((fft_loss(&a, &b).unwrap() - fft_loss(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn weights() {
        let w = LossWeights::default();
        assert!((w.combine(0.001, 0.2, 0.3) - 1.5).abs() < 1e-12);
        assert!(LossWeights { huber: 0.0, vgg: 0.0, fft: 0.0 }.validate().is_err());
        assert!(LossWeights { huber: -1.0, vgg: 0.0, fft: 1.0 }.validate().is_err());
    }

    #[test]
    fn total_matches_terms_and_needs_vgg() {
        let t = Tensor::<f64>::from_vec([1, 3, 4, 4], (0..48).map(|v| (v as f64 * 0.37).cos()).collect());
        let p = t.map(|v| v * 0.8 + 0.05);
        let w = LossWeights { huber: 1e3, vgg: 0.0, fft: 1.0 };
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let (_, bd) = total_loss(&mut g, pv, &t, &w, None).unwrap();
        assert_eq!(bd.huber, huber(&p, &t).unwrap());
        assert_eq!(bd.fft, fft_loss(&p, &t).unwrap());
        assert_eq!(bd.total, w.combine(bd.huber, 0.0, bd.fft));
        let mut g = Graph::new();
        let pv = g.constant(p);
        assert!(matches!(
            total_loss(&mut g, pv, &t, &LossWeights::default(), None),
            Err(Error::Asset { .. })
        ));
    }

    #[test]
    fn vgg_zero_on_equal_and_nonnegative() {
        let mut f = synthetic_weights(Arch::Vgg19, 4, 3);
        let v = VggFeatures::<f64>::from_arrays(Arch::Vgg19, &[2, 4], &mut f, Path::new("mem")).unwrap();
        let t = Tensor::<f64>::from_vec([1, 3, 8, 8], (0..192).map(|i| ((i * 7 % 13) as f64) / 13.0).collect());
        assert_eq!(vgg_loss(&v, &t, &t).unwrap(), 0.0);
        assert!(vgg_loss(&v, &t.map(|x| 1.0 - x), &t).unwrap() > 0.0);
    }
}
