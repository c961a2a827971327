//! Exact discrete Fourier transforms.
//!
//! Forward is unnormalized, `X[k] = Σ_t x_t e^{−j2πkt/T}`; the inverse carries `1/T`.
//! Power-of-two lengths go through an iterative radix-2 FFT, every other length
//! through the direct sum.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numcore::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Spectrum of a length-`T` sequence; bin `k` for `k = 0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub bins: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

pub fn dft(x: &[Complex64], direction: Direction) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(Error::input("DFT of an empty sequence"));
    }
    let mut out = if x.len().is_power_of_two() {
        let mut buf = x.to_vec();
        fft_radix2(&mut buf, direction);
        buf
    } else {
        direct_dft(x, direction)
    };
    if direction == Direction::Inverse {
        let inv = 1.0 / x.len() as f64;
        for v in &mut out {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Forward transform of a real sequence.
pub fn dft_real(x: &[f64]) -> Result<ComplexSpectrum> {
    let cx: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    Ok(ComplexSpectrum {
        bins: dft(&cx, Direction::Forward)?,
    })
}

/// The `O(T²)` sum, also used as the reference for the fast path.
pub fn direct_dft(x: &[Complex64], direction: Direction) -> Vec<Complex64> {
    let n = x.len();
    let sign = match direction {
        Direction::Forward => -1.0,
        Direction::Inverse => 1.0,
    };
    // twiddle[m] = e^{±j2πm/T}; indexing by (k·t mod T) keeps angles exact.
    let twiddle: Vec<Complex64> = (0..n)
        .map(|m| Complex64::from_polar(1.0, sign * 2.0 * PI * m as f64 / n as f64))
        .collect();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| v * twiddle[(k * t) % n])
                .sum()
        })
        .collect()
}

fn fft_radix2(buf: &mut [Complex64], direction: Direction) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = match direction {
        Direction::Forward => -1.0,
        Direction::Inverse => 1.0,
    };
    let twiddle: Vec<Complex64> = (0..n / 2)
        .map(|m| Complex64::from_polar(1.0, sign * 2.0 * PI * m as f64 / n as f64))
        .collect();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let w = twiddle[j * stride];
                let u = buf[start + j];
                let v = buf[start + j + half] * w;
                buf[start + j] = u + v;
                buf[start + j + half] = u - v;
            }
        }
        len <<= 1;
    }
}

/// Applies a real per-bin gain to every column of `h` along the row axis:
/// forward DFT, multiply bin `k` by `gains[k]`, inverse DFT.
///
/// With conjugate-symmetric gains (`gains[k] == gains[T−k]`) the output is real;
/// the imaginary residue is checked against `1e-10` and dropped.
pub fn apply_spectral_multiplier(h: &DenseMatrix, gains: &[f64]) -> Result<DenseMatrix> {
    let t = h.rows();
    if gains.len() != t {
        return Err(Error::input(format!(
            "gain table has {} bins but the signal has {t} rows",
            gains.len()
        )));
    }
    let mut out = DenseMatrix::zeros(t, h.cols());
    if t == 0 {
        return Ok(out);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); t];
    for c in 0..h.cols() {
        let mut scale = 0.0f64;
        for (r, slot) in col.iter_mut().enumerate() {
            let v = h[(r, c)];
            scale = scale.max(v.abs());
            *slot = Complex64::new(v, 0.0);
        }
        let mut spec = dft(&col, Direction::Forward)?;
        for (bin, g) in spec.iter_mut().zip(gains) {
            *bin *= *g;
        }
        let back = dft(&spec, Direction::Inverse)?;
        for (r, v) in back.iter().enumerate() {
            if v.im.abs() > 1e-10 * scale.max(1.0) {
                return Err(Error::numeric(format!(
                    "spectral multiplier left imaginary residue {} at row {r}",
                    v.im
                )));
            }
            out[(r, c)] = v.re;
        }
    }
    Ok(out)
}
