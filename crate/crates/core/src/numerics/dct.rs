//! Orthonormal DCT-II and its inverse, computed through an N-point complex
//! FFT of the even/odd reordered input (Makhoul's construction).

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

fn scales(n: usize) -> (f64, f64) {
    ((1.0 / n as f64).sqrt(), (2.0 / n as f64).sqrt())
}

/// Orthonormal DCT-II.
pub fn dct(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Invalid("dct of an empty signal".into()));
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n.div_ceil(2) {
        buf[i].re = x[2 * i];
    }
    for i in 0..n / 2 {
        buf[n - 1 - i].re = x[2 * i + 1];
    }
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (s0, s) = scales(n);
    Ok(buf
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let w = Complex64::from_polar(1.0, -std::f64::consts::PI * k as f64 / (2.0 * n as f64));
            (w * v).re * if k == 0 { s0 } else { s }
        })
        .collect())
}

/// Inverse of [`dct`] (orthonormal DCT-III).
pub fn idct(c: &[f64]) -> Result<Vec<f64>> {
    let n = c.len();
    if n == 0 {
        return Err(Error::Invalid("idct of an empty signal".into()));
    }
    let (s0, s) = scales(n);
    let y = |k: usize| -> f64 {
        if k == n {
            0.0
        } else {
            c[k] / if k == 0 { s0 } else { s }
        }
    };
    let mut buf: Vec<Complex64> = (0..n)
        .map(|k| {
            let w = Complex64::from_polar(1.0, std::f64::consts::PI * k as f64 / (2.0 * n as f64));
            let z = if k == 0 { Complex64::new(y(0), 0.0) } else { Complex64::new(y(k), -y(n - k)) };
            w * z
        })
        .collect();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    let mut x = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        x[2 * i] = buf[i].re / n as f64;
    }
    for i in 0..n / 2 {
        x[2 * i + 1] = buf[n - 1 - i].re / n as f64;
    }
    Ok(x)
}
