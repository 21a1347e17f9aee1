use pointnr::graph::Graph;
use pointnr::renderer::{Renderer, RendererConfig};
use pointnr::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn loss(r: &Renderer<f64>, bufs: &[Tensor<f64>], w: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let p = r.params.bind(&mut g, false);
    let vars: Vec<_> = bufs.iter().map(|b| g.constant(b.clone())).collect();
    let out = r.forward(&mut g, &p, &vars).unwrap();
    let l = g.dot_const(out.image, w);
    g.value(l).data()[0]
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let cfg = RendererConfig {
        in_channels: 8,
        widths: vec![8, 8],
        ..Default::default()
    };
    let mut r = Renderer::<f64>::new(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in r.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let bufs = vec![random([1, 8, 16, 16], &mut rng), random([1, 8, 8, 8], &mut rng)];
    let w = random([1, 3, 16, 16], &mut rng);

    let mut g = Graph::new();
    let p = r.params.bind(&mut g, true);
    let vars: Vec<_> = bufs.iter().map(|b| g.constant(b.clone())).collect();
    let out = r.forward(&mut g, &p, &vars).unwrap();
    let l = g.dot_const(out.image, &w);
    let grads = g.backward(l);
    let analytic: Vec<Tensor<f64>> = p.vars.iter().map(|&v| grads.get(v).cloned().unwrap()).collect();

    let h = 1e-6;
    let mut kinks = 0;
    let names = r.params.names().to_vec();
    for (k, name) in names.iter().enumerate() {
        let n = r.params.tensors()[k].len();
        let picks: Vec<usize> = if n <= 24 { (0..n).collect() } else { (0..24).map(|_| rng.gen_range(0..n)).collect() };
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for &i in &picks {
            let fd_at = |r: &mut Renderer<f64>, h: f64| {
                let orig = r.params.tensors()[k].data()[i];
                r.params.tensors_mut()[k].data_mut()[i] = orig + h;
                let lp = loss(r, &bufs, &w);
                r.params.tensors_mut()[k].data_mut()[i] = orig - h;
                let lm = loss(r, &bufs, &w);
                r.params.tensors_mut()[k].data_mut()[i] = orig;
                (lp - lm) / (2.0 * h)
            };
            let fd = fd_at(&mut r, h);
            let fd_half = fd_at(&mut r, h / 2.0);
            // a leaky-ReLU kink inside the stencil makes the two estimates disagree
            if (fd - fd_half).abs() > 1e-6 * (1.0 + fd.abs()) {
                kinks += 1;
                continue;
            }
            let a = analytic[k].data()[i];
            num += (a - fd).powi(2);
            den += fd.powi(2).max(a.powi(2));
        }
        if den.sqrt() < 1e-6 {
            // biases feeding an instance norm have an exactly zero gradient
            assert!(num.sqrt() < 1e-6, "{name}: absolute error {:e}", num.sqrt());
        } else {
            let rel = (num / den).sqrt();
            assert!(rel < 1e-3, "{name}: relative error {rel:e}");
        }
    }
    assert!(kinks < 10, "{kinks} probes straddled a kink");
}
