use rand_chacha::ChaCha8Rng;

use super::params::{Bound, Init, ParamStore};
use super::{AttentionMode, RendererConfig};
use crate::fft::FftNorm;
use crate::graph::{Graph, Var};
use crate::tensor::Scalar;

/// Negative slope of every leaky ReLU in the renderer.
pub const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

fn conv_params<T: Scalar>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) {
    p.add(format!("{name}.weight"), [cout, cin, k, k], Init::Kaiming(SLOPE), rng);
    p.add(format!("{name}.bias"), [1, cout, 1, 1], Init::Zeros, rng);
}

fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    g.conv2d(x, p.var(&format!("{name}.weight")), Some(p.var(&format!("{name}.bias"))))
}

pub(super) fn add_ffc_params<T: Scalar>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, pre: &str, cfg: &RendererConfig, w: usize) {
    let (cl, cg) = cfg.split(w);
    conv_params(p, rng, &format!("{pre}.l2l"), cl, cl, 3);
    conv_params(p, rng, &format!("{pre}.g2l"), cg, cl, 3);
    conv_params(p, rng, &format!("{pre}.l2g"), cl, cg, 3);
    conv_params(p, rng, &format!("{pre}.st.in"), cg, cg / 2, 1);
    conv_params(p, rng, &format!("{pre}.st.fu"), cg, cg, 1);
    conv_params(p, rng, &format!("{pre}.st.out"), cg / 2, cg, 1);
    p.add(format!("{pre}.norm.gamma"), [1, w, 1, 1], Init::Ones, rng);
    p.add(format!("{pre}.norm.beta"), [1, w, 1, 1], Init::Zeros, rng);
}

/// Spectral pointwise convolution: `irfft2(conv1x1(rfft2(x)))` with
/// orthonormal transforms. `weight` maps the stacked `[re | im]` channels.
pub fn fourier_unit<T: Scalar>(g: &mut Graph<T>, x: Var, weight: Var, bias: Option<Var>, activate: bool) -> Var {
    let [_, _, _, w] = g.shape(x);
    let f = g.rfft2(x, FftNorm::Ortho);
    let mut y = g.conv2d(f, weight, bias);
    if activate {
        y = g.leaky_relu(y, SLOPE);
    }
    g.irfft2(y, w, FftNorm::Ortho)
}

/// Fast Fourier convolution over a `[B,w,H,W]` input split into local and
/// global channel groups.
pub(super) fn ffc<T: Scalar>(g: &mut Graph<T>, p: &Bound, pre: &str, cfg: &RendererConfig, w: usize, x: Var) -> Var {
    let (cl, cg) = cfg.split(w);
    let xl = g.slice_channels(x, 0, cl);
    let xg = g.slice_channels(x, cl, cg);
    let l2l = conv(g, p, &format!("{pre}.l2l"), xl);
    let g2l = conv(g, p, &format!("{pre}.g2l"), xg);
    let yl = g.add(l2l, g2l);
    let l2g = conv(g, p, &format!("{pre}.l2g"), xl);
    let a = conv(g, p, &format!("{pre}.st.in"), xg);
    let a = g.leaky_relu(a, SLOPE);
    let fu = fourier_unit(
        g,
        a,
        p.var(&format!("{pre}.st.fu.weight")),
        Some(p.var(&format!("{pre}.st.fu.bias"))),
        cfg.spectral_activation,
    );
    let s = g.add(a, fu);
    let spectral = conv(g, p, &format!("{pre}.st.out"), s);
    let yg = g.add(l2g, spectral);
    let y = g.concat(&[yl, yg]);
    let y = g.instance_norm(y, p.var(&format!("{pre}.norm.gamma")), p.var(&format!("{pre}.norm.beta")), NORM_EPS);
    g.leaky_relu(y, SLOPE)
}

/// Downgrade-aware convolution. Returns gated features and the attention map.
pub(super) fn dac<T: Scalar>(g: &mut Graph<T>, p: &Bound, pre: &str, cfg: &RendererConfig, w: usize, x: Var) -> (Var, Var) {
    let local = conv(g, p, &format!("{pre}.local"), x);
    let local = g.leaky_relu(local, SLOPE);
    let lift = conv(g, p, &format!("{pre}.lift"), x);
    let glob = ffc(g, p, &format!("{pre}.ffc"), cfg, w, lift);
    let cat = g.concat(&[local, glob]);
    let fused = conv(g, p, &format!("{pre}.fuse"), cat);
    let fused = g.leaky_relu(fused, SLOPE);
    let gate = conv(g, p, &format!("{pre}.gate"), fused);
    let att = g.sigmoid(gate);
    let content = conv(g, p, &format!("{pre}.content"), fused);
    let content = g.leaky_relu(content, SLOPE);
    let out = match cfg.attention {
        AttentionMode::PerPixel => g.mul_broadcast(content, att),
        AttentionMode::PerChannel => g.mul(content, att),
    };
    (out, att)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::Renderer;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn fourier_round_trip_with_identity_weights() {
        for (h, w) in [(8, 8), (17, 31), (5, 2)] {
            let c = 3;
            let mut g = Graph::<f32>::new();
            let x = g.constant(random([2, c, h, w], 1).cast());
            let mut eye = Tensor::zeros([2 * c, 2 * c, 1, 1]);
            for i in 0..2 * c {
                eye.set(i, i, 0, 0, 1.0);
            }
            let wv = g.constant(eye);
            let y = fourier_unit(&mut g, x, wv, None, false);
            assert!(g.value(y).max_abs_diff(g.value(x)) <= 1e-5);
        }
    }

    fn block_setup(h: usize, w: usize) -> (Renderer<f64>, Graph<f64>, Bound, Var) {
        let cfg = RendererConfig {
            in_channels: 4,
            widths: vec![8],
            ..Default::default()
        };
        let r = Renderer::<f64>::new(cfg, 3).unwrap();
        let mut g = Graph::new();
        let p = r.params.bind(&mut g, false);
        let x = g.constant(random([1, 4, h, w], 2));
        (r, g, p, x)
    }

    #[test]
    fn ffc_preserves_shape_and_zero() {
        for (h, w) in [(8, 8), (17, 31)] {
            let (r, mut g, p, _) = block_setup(h, w);
            let x = g.constant(random([1, 8, h, w], 4));
            let y = ffc(&mut g, &p, "s0.dac.ffc", &r.config, 8, x);
            assert_eq!(g.shape(y), [1, 8, h, w]);
            assert!(g.value(y).all_finite());
            let z = g.constant(Tensor::zeros([1, 8, h, w]));
            let y = ffc(&mut g, &p, "s0.dac.ffc", &r.config, 8, z);
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn attention_lies_in_open_unit_interval() {
        let (r, mut g, p, x) = block_setup(9, 12);
        let (out, att) = dac(&mut g, &p, "s0.dac", &r.config, 8, x);
        assert_eq!(g.shape(att), [1, 1, 9, 12]);
        assert_eq!(g.shape(out), [1, 8, 9, 12]);
        assert!(g.value(att).data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn gate_saturation() {
        let (mut r, _, _, _) = block_setup(6, 6);
        r.params.get_mut("s0.dac.gate.weight").unwrap().data_mut().fill(0.0);
        r.params.get_mut("s0.dac.gate.bias").unwrap().data_mut().fill(-20.0);
        let mut g = Graph::new();
        let p = r.params.bind(&mut g, false);
        let x = g.constant(random([1, 4, 6, 6], 2));
        let (out, _) = dac(&mut g, &p, "s0.dac", &r.config, 8, x);
        assert!(g.value(out).data().iter().all(|v| v.abs() < 1e-6));

        r.params.get_mut("s0.dac.gate.bias").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let p = r.params.bind(&mut g, false);
        let x = g.constant(random([1, 4, 6, 6], 2));
        let (_, att) = dac(&mut g, &p, "s0.dac", &r.config, 8, x);
        assert!(g.value(att).data().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn local_branch_is_translation_covariant() {
        let (r, _, _, _) = block_setup(12, 12);
        let base = random([1, 4, 12, 12], 7);
        let mut shifted = Tensor::zeros([1, 4, 12, 12]);
        for c in 0..4 {
            for y in 0..12 {
                for x in 0..12 {
                    let (sy, sx) = ((y + 12 - 2) % 12, (x + 12 - 1) % 12);
                    shifted.set(0, c, y, x, base.at(0, c, sy, sx));
                }
            }
        }
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = r.params.bind(&mut g, false);
            let x = g.constant(t.clone());
            let l = conv(&mut g, &p, "s0.dac.local", x);
            let l = g.leaky_relu(l, SLOPE);
            g.value(l).clone()
        };
        let (a, b) = (run(&base), run(&shifted));
        for c in 0..8 {
            for y in 3..11 {
                for x in 2..11 {
                    assert!((b.at(0, c, y, x) - a.at(0, c, y - 2, x - 1)).abs() < 1e-12);
                }
            }
        }
    }
}
