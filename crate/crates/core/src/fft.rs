//! Channel-wise real 2D FFT on single `h×w` planes, with the adjoint maps the
//! autograd needs. Only the non-redundant half spectrum (`w/2 + 1` columns)
//! is produced or consumed.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FftNorm {
    /// Unscaled forward, `1/(h·w)` inverse.
    Backward,
    /// `1/sqrt(h·w)` both ways.
    Ortho,
}

impl FftNorm {
    fn forward_scale(self, h: usize, w: usize) -> f64 {
        match self {
            FftNorm::Backward => 1.0,
            FftNorm::Ortho => 1.0 / ((h * w) as f64).sqrt(),
        }
    }

    fn inverse_scale(self, h: usize, w: usize) -> f64 {
        match self {
            FftNorm::Backward => 1.0 / (h * w) as f64,
            FftNorm::Ortho => 1.0 / ((h * w) as f64).sqrt(),
        }
    }
}

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Planned transforms for one plane size.
pub struct Plane2d<T: Scalar> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scratch: Vec<Complex<T>>,
    column: Vec<Complex<T>>,
}

impl<T: Scalar> Plane2d<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(w);
        let row_inv = planner.plan_fft_inverse(w);
        let col_fwd = planner.plan_fft_forward(h);
        let col_inv = planner.plan_fft_inverse(h);
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Plane2d {
            h,
            w,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch: vec![Complex::default(); scratch_len],
            column: vec![Complex::default(); h],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Unnormalized 2D DFT in place on a row-major `h×w` complex buffer.
    fn transform(&mut self, buf: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for r in buf.chunks_exact_mut(w) {
            row.process_with_scratch(r, &mut self.scratch);
        }
        for x in 0..w {
            for y in 0..h {
                self.column[y] = buf[y * w + x];
            }
            col.process_with_scratch(&mut self.column, &mut self.scratch);
            for y in 0..h {
                buf[y * w + x] = self.column[y];
            }
        }
    }

    /// Half spectrum of a real plane; `re`/`im` are `h × (w/2+1)`.
    pub fn rfft2(&mut self, x: &[T], norm: FftNorm, re: &mut [T], im: &mut [T]) {
        let (h, w) = (self.h, self.w);
        let wf = half_width(w);
        let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.transform(&mut buf, false);
        let s = T::of_f64(norm.forward_scale(h, w));
        for y in 0..h {
            for k in 0..wf {
                let z = buf[y * w + k];
                re[y * wf + k] = z.re * s;
                im[y * wf + k] = z.im * s;
            }
        }
    }

    /// Adjoint of [`Self::rfft2`]: maps half-spectrum gradients to a real plane gradient.
    pub fn rfft2_adjoint(&mut self, g_re: &[T], g_im: &[T], norm: FftNorm, dx: &mut [T]) {
        let (h, w) = (self.h, self.w);
        let wf = half_width(w);
        let mut buf = vec![Complex::<T>::default(); h * w];
        for y in 0..h {
            for k in 0..wf {
                buf[y * w + k] = Complex::new(g_re[y * wf + k], g_im[y * wf + k]);
            }
        }
        self.transform(&mut buf, true);
        let s = T::of_f64(norm.forward_scale(h, w));
        for (d, z) in dx.iter_mut().zip(&buf) {
            *d = *d + z.re * s;
        }
    }

    /// Real plane from a half spectrum. Imaginary parts of self-conjugate
    /// columns (DC, and Nyquist for even `w`) do not contribute.
    pub fn irfft2(&mut self, re: &[T], im: &[T], norm: FftNorm, x: &mut [T]) {
        let (h, w) = (self.h, self.w);
        let wf = half_width(w);
        let mut buf = vec![Complex::<T>::default(); h * w];
        for y in 0..h {
            for k in 0..wf {
                let c = T::of_f64(column_weight(k, w));
                buf[y * w + k] = Complex::new(re[y * wf + k] * c, im[y * wf + k] * c);
            }
        }
        self.transform(&mut buf, true);
        let s = T::of_f64(norm.inverse_scale(h, w));
        for (o, z) in x.iter_mut().zip(&buf) {
            *o = z.re * s;
        }
    }

    /// Adjoint of [`Self::irfft2`].
    pub fn irfft2_adjoint(&mut self, gx: &[T], norm: FftNorm, d_re: &mut [T], d_im: &mut [T]) {
        let (h, w) = (self.h, self.w);
        let wf = half_width(w);
        let mut buf: Vec<Complex<T>> = gx.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.transform(&mut buf, false);
        let s = norm.inverse_scale(h, w);
        for y in 0..h {
            for k in 0..wf {
                let c = T::of_f64(s * column_weight(k, w));
                let z = buf[y * w + k];
                d_re[y * wf + k] = d_re[y * wf + k] + z.re * c;
                d_im[y * wf + k] = d_im[y * wf + k] + z.im * c;
            }
        }
    }
}

/// Multiplicity of a half-spectrum column in the full spectrum.
fn column_weight(k: usize, w: usize) -> f64 {
    if k == 0 || (w % 2 == 0 && k == w / 2) {
        1.0
    } else {
        2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(h: usize, w: usize, seed: u64) -> Vec<f64> {
        (0..h * w)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    fn direct_rdft(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let wf = half_width(w);
        let mut re = vec![0.0; h * wf];
        let mut im = vec![0.0; h * wf];
        for ky in 0..h {
            for kx in 0..wf {
                for y in 0..h {
                    for xx in 0..w {
                        let th = -2.0
                            * std::f64::consts::PI
                            * ((ky * y) as f64 / h as f64 + (kx * xx) as f64 / w as f64);
                        re[ky * wf + kx] += x[y * w + xx] * th.cos();
                        im[ky * wf + kx] += x[y * w + xx] * th.sin();
                    }
                }
            }
        }
        (re, im)
    }

    #[test]
    fn rfft2_matches_direct_sum() {
        for &(h, w) in &[(4, 4), (5, 7), (6, 3)] {
            let x = plane(h, w, 3);
            let wf = half_width(w);
            let mut p = Plane2d::<f64>::new(h, w);
            let (mut re, mut im) = (vec![0.0; h * wf], vec![0.0; h * wf]);
            p.rfft2(&x, FftNorm::Backward, &mut re, &mut im);
            let (dre, dim) = direct_rdft(&x, h, w);
            for i in 0..h * wf {
                assert!((re[i] - dre[i]).abs() < 1e-9);
                assert!((im[i] - dim[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn round_trip_odd_and_even() {
        for &(h, w) in &[(8, 8), (17, 31), (2, 2), (3, 4)] {
            for norm in [FftNorm::Ortho, FftNorm::Backward] {
                let x = plane(h, w, 11);
                let wf = half_width(w);
                let mut p = Plane2d::<f64>::new(h, w);
                let (mut re, mut im) = (vec![0.0; h * wf], vec![0.0; h * wf]);
                p.rfft2(&x, norm, &mut re, &mut im);
                let mut back = vec![0.0; h * w];
                p.irfft2(&re, &im, norm, &mut back);
                for (a, b) in x.iter().zip(&back) {
                    assert!((a - b).abs() < 1e-12, "{h}x{w}");
                }
            }
        }
    }

    // <A x, g> == <x, Aᵀ g> for both transforms
    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        for &(h, w) in &[(4, 6), (5, 5), (3, 8)] {
            let wf = half_width(w);
            let mut p = Plane2d::<f64>::new(h, w);
            let x = plane(h, w, 1);
            let g_re = plane(h, wf, 2);
            let g_im = plane(h, wf, 5);
            let (mut re, mut im) = (vec![0.0; h * wf], vec![0.0; h * wf]);
            p.rfft2(&x, FftNorm::Ortho, &mut re, &mut im);
            let lhs: f64 = re.iter().zip(&g_re).map(|(a, b)| a * b).sum::<f64>()
                + im.iter().zip(&g_im).map(|(a, b)| a * b).sum::<f64>();
            let mut dx = vec![0.0; h * w];
            p.rfft2_adjoint(&g_re, &g_im, FftNorm::Ortho, &mut dx);
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);

            let mut y = vec![0.0; h * w];
            p.irfft2(&g_re, &g_im, FftNorm::Ortho, &mut y);
            let lhs: f64 = y.iter().zip(&x).map(|(a, b)| a * b).sum();
            let (mut d_re, mut d_im) = (vec![0.0; h * wf], vec![0.0; h * wf]);
            p.irfft2_adjoint(&x, FftNorm::Ortho, &mut d_re, &mut d_im);
            let rhs: f64 = g_re.iter().zip(&d_re).map(|(a, b)| a * b).sum::<f64>()
                + g_im.iter().zip(&d_im).map(|(a, b)| a * b).sum::<f64>();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
