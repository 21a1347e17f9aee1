//! Adam variants and the plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[inline]
fn adam_update(cfg: &AdamConfig, lr: f64, step: u64, p: &mut f32, g: f32, m: &mut f32, v: &mut f32) {
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let mhat = *m as f64 / bc1;
    let vhat = *v as f64 / bc2;
    *p -= (lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
}

/// Dense Adam over a list of arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { config, step: 0, m, v }
    }

    /// One update; arrays without a gradient keep their moments and values.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Option<&[f32]>], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[k] else { continue };
            assert_eq!(g.len(), p.len());
            for i in 0..p.len() {
                adam_update(&self.config, lr, self.step, &mut p[i], g[i], &mut self.m[k][i], &mut self.v[k][i]);
            }
        }
    }

    pub fn step_tensors(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>], lr: f64) {
        let mut ps: Vec<&mut [f32]> = params.iter_mut().map(|t| t.data_mut()).collect();
        let gs: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_ref().map(|t| t.data())).collect();
        self.step(&mut ps, &gs, lr);
    }
}

/// Adam over the rows of an `N×C` matrix that touches only rows present in
/// the gradient; untouched rows keep both their values and moments.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdam {
    pub config: AdamConfig,
    pub channels: usize,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl SparseAdam {
    pub fn new(config: AdamConfig, rows: usize, channels: usize) -> Self {
        SparseAdam {
            config,
            channels,
            step: 0,
            m: vec![0.0; rows * channels],
            v: vec![0.0; rows * channels],
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len() / self.channels
    }

    /// `values` holds `rows.len() × C` gradients aligned with `rows`.
    pub fn step(&mut self, params: &mut [f32], rows: &[u32], values: &[f32], lr: f64) {
        let c = self.channels;
        assert_eq!(params.len(), self.m.len());
        assert_eq!(values.len(), rows.len() * c);
        self.step += 1;
        for (j, &r) in rows.iter().enumerate() {
            let base = r as usize * c;
            for ch in 0..c {
                let i = base + ch;
                adam_update(&self.config, lr, self.step, &mut params[i], values[j * c + ch], &mut self.m[i], &mut self.v[i]);
            }
        }
    }

    pub fn append_rows(&mut self, n: usize) {
        self.m.extend(std::iter::repeat(0.0).take(n * self.channels));
        self.v.extend(std::iter::repeat(0.0).take(n * self.channels));
    }

    pub fn filter_rows(&mut self, keep: &[bool]) {
        let c = self.channels;
        let pick = |a: &[f32]| -> Vec<f32> {
            a.chunks_exact(c)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(r, _)| r.iter().copied())
                .collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}

/// Scales learning rates by `factor` once `patience` consecutive epochs fail
/// to improve on the best loss seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Record an epoch loss; returns the multiplier to apply to every learning rate.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return 1.0;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            self.factor
        } else {
            1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(history: &[f64]) -> f64 {
        let mut s = PlateauScheduler::new(5, 0.5);
        history.iter().map(|&l| s.observe(l)).product()
    }

    #[test]
    fn plateau_rules() {
        assert_eq!(run(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.1]), 1.0);
        assert_eq!(run(&[1.0, 1.0, 1.2, 1.0, 3.0, 1.0]), 0.5);
        assert_eq!(run(&[1.0, 1.0, 1.0, 1.0, 1.0, 0.9]), 1.0);
        assert_eq!(run(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]), 0.25);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(AdamConfig::default(), [2]);
        let mut p = vec![1.0f32, -1.0];
        opt.step(&mut [&mut p[..]], &[Some(&[0.3, -2.0][..])], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sparse_adam_leaves_untouched_rows() {
        let mut opt = SparseAdam::new(AdamConfig::default(), 3, 2);
        let mut p = vec![0.0f32; 6];
        for _ in 0..10 {
            opt.step(&mut p, &[2], &[1.0, -1.0], 0.1);
        }
        assert_eq!(&p[..4], &[0.0; 4]);
        assert_eq!(&opt.m[..4], &[0.0; 4]);
        assert!(p[4] < -0.9 && p[5] > 0.9);
        opt.filter_rows(&[false, true, true]);
        opt.append_rows(1);
        assert_eq!(opt.rows(), 3);
    }
}
