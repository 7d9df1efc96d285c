use std::cell::RefCell;

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

use super::{Tensor, Var};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// One-sided spectrum of a real signal along its last axis.
#[derive(Clone, Copy, Debug)]
pub struct ComplexSpectrum<'t> {
    pub real: Var<'t>,
    pub imag: Var<'t>,
    /// `floor(D / 2) + 1` for a length-`D` input.
    pub n_bins: usize,
}

/// Forward transform of each length-`d` row; writes `[re_0..re_{F-1}, im_0..im_{F-1}]` per row.
fn rfft_rows(x: &[f64], d: usize) -> Vec<f64> {
    let f = d / 2 + 1;
    let rows = x.len() / d;
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(d));
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let mut out = vec![0.0; rows * 2 * f];
    for r in 0..rows {
        for k in 0..f {
            let c = buf[r * d + k];
            out[r * 2 * f + k] = c.re;
            out[r * 2 * f + f + k] = c.im;
        }
    }
    out
}

/// Adjoint of [`rfft_rows`]: `dx_d = sum_k gRe_k cos(2 pi k d / D) - gIm_k sin(2 pi k d / D)`.
fn rfft_adjoint_rows(g: &[f64], d: usize) -> Vec<f64> {
    let f = d / 2 + 1;
    let rows = g.len() / (2 * f);
    let ifft = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(d));
    let mut buf = vec![Complex::new(0.0, 0.0); rows * d];
    for r in 0..rows {
        for k in 0..f {
            buf[r * d + k] = Complex::new(g[r * 2 * f + k], g[r * 2 * f + f + k]);
        }
    }
    ifft.process(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

impl<'t> Var<'t> {
    /// Exact length-`D` one-sided DFT along the last axis,
    /// `H_k = sum_d x_d exp(-2 pi i k d / D)` for `k = 0..=D/2`.
    pub fn rfft(self) -> Result<ComplexSpectrum<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::param("rfft", "scalar input"))?;
        let f = d / 2 + 1;
        let packed = rfft_rows(x.data(), d);
        let mut packed_shape = shape.clone();
        *packed_shape.last_mut().unwrap() = 2 * f;
        let packed = self
            .tape()
            .record("rfft", Tensor::from_parts(packed_shape, packed), &[self], move |g| {
                vec![Some(Tensor::from_parts(shape.clone(), rfft_adjoint_rows(g.data(), d)))]
            })?;
        let last = packed.shape().len() - 1;
        Ok(ComplexSpectrum {
            real: packed.narrow(last, 0, f)?,
            imag: packed.narrow(last, f, f)?,
            n_bins: f,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use std::f64::consts::PI;

    /// Naive `O(D^2)` one-sided DFT of a single real signal, returning `(re, im)`.
    fn naive_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = x.len();
        let f = d / 2 + 1;
        let mut re = vec![0.0; f];
        let mut im = vec![0.0; f];
        for k in 0..f {
            for (n, &v) in x.iter().enumerate() {
                let theta = -2.0 * PI * (k * n % d) as f64 / d as f64;
                re[k] += v * theta.cos();
                im[k] += v * theta.sin();
            }
        }
        (re, im)
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[8], 1.5));
        let s = x.rfft().unwrap();
        assert_eq!(s.n_bins, 5);
        let re = s.real.value();
        let im = s.imag.value();
        assert!((re.data()[0] - 12.0).abs() < 1e-12);
        for k in 1..5 {
            assert!(re.data()[k].abs() < 1e-12 && im.data()[k].abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_is_flat() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[8], |i| if i[0] == 0 { 1.0 } else { 0.0 }));
        let s = x.rfft().unwrap();
        for k in 0..5 {
            assert!((s.real.value().data()[k] - 1.0).abs() < 1e-15);
            assert!(s.imag.value().data()[k].abs() < 1e-15);
        }
    }

    #[test]
    fn odd_length_bins() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[3, 7]));
        let s = x.rfft().unwrap();
        assert_eq!(s.real.shape(), vec![3, 4]);
        assert_eq!(s.n_bins, 4);
    }

    fn random_signal(d: usize, seed: u64) -> Vec<f64> {
        crate::gradcheck::probe_weights(&[d], seed).into_vec()
    }

    #[test]
    fn matches_naive_dft_random_96() {
        let x = random_signal(96, 5);
        let tape = Tape::new();
        let s = tape.constant(Tensor::new(&[96], x.clone()).unwrap()).rfft().unwrap();
        let (re, im) = naive_dft(&x);
        for k in 0..49 {
            assert!((s.real.value().data()[k] - re[k]).abs() <= 1e-9);
            assert!((s.imag.value().data()[k] - im[k]).abs() <= 1e-9);
        }
    }

    proptest::proptest! {
        #[test]
        fn parseval_and_linearity(d in 1usize..130, seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random_signal(d, seed);
            let y = random_signal(d, seed + 7919);
            let spec = |v: &[f64]| {
                let tape = Tape::new();
                let s = tape.constant(Tensor::new(&[d], v.to_vec()).unwrap()).rfft().unwrap();
                (s.real.value().into_vec(), s.imag.value().into_vec())
            };
            let (re, im) = spec(&x);
            let f = d / 2 + 1;
            let mut energy = 0.0;
            for k in 0..f {
                let m = re[k] * re[k] + im[k] * im[k];
                let mirrored = k != 0 && !(d % 2 == 0 && k == d / 2);
                energy += if mirrored { 2.0 * m } else { m };
            }
            let direct: f64 = x.iter().map(|v| v * v).sum();
            proptest::prop_assert!(((energy / d as f64) - direct).abs() <= 1e-9 * direct.max(1e-300));

            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let (mr, mi) = spec(&mix);
            let (yr, yi) = spec(&y);
            for k in 0..f {
                proptest::prop_assert!((mr[k] - (a * re[k] + b * yr[k])).abs() <= 1e-9);
                proptest::prop_assert!((mi[k] - (a * im[k] + b * yi[k])).abs() <= 1e-9);
            }
        }
    }
}
