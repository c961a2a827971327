//! Temporal frequency modulation: zero-phase Butterworth low-pass filtering of
//! hidden-state sequences along the time axis, and the ring graph whose
//! Laplacian eigenbasis is the DFT basis.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::combinatorial_laplacian;
use crate::numcore::dft::apply_spectral_multiplier;
use crate::numcore::DenseMatrix;
use crate::spectral::SpectralBasis;

/// Cutoff `ω_c ∈ (0, 1]` in units of Nyquist, and filter order `n ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ButterworthSpec {
    pub cutoff: f64,
    pub order: u32,
}

impl ButterworthSpec {
    pub fn new(cutoff: f64, order: u32) -> Result<Self> {
        let spec = Self { cutoff, order };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cutoff == 0.0 {
            return Err(Error::input("cutoff 0 is an all-stop filter"));
        }
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::input(format!("cutoff must lie in (0, 1], got {}", self.cutoff)));
        }
        if self.order == 0 {
            return Err(Error::input("Butterworth order must be at least 1"));
        }
        Ok(())
    }

    /// `|B(ω)| = (1 + (ω/ω_c)^{2n})^{-1/2}`.
    pub fn magnitude(&self, omega: f64) -> f64 {
        let ratio = (omega / self.cutoff).powi(2 * self.order as i32);
        (1.0 / (1.0 + ratio)).sqrt()
    }
}

impl Default for ButterworthSpec {
    fn default() -> Self {
        Self {
            cutoff: 0.3,
            order: 2,
        }
    }
}

/// Normalized frequency of DFT bin `k` out of `t`: `2·min(k, t−k)/t`.
pub fn bin_frequency(k: usize, t: usize) -> f64 {
    2.0 * k.min(t - k) as f64 / t as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub omegas: Vec<f64>,
    pub gains: Vec<f64>,
}

impl GainTable {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,omega,gain\n");
        for (k, (w, g)) in self.omegas.iter().zip(&self.gains).enumerate() {
            writeln!(out, "{k},{w:?},{g:?}").unwrap();
        }
        out
    }
}

pub fn butterworth_gains(spec: &ButterworthSpec, t: usize) -> Result<GainTable> {
    spec.validate()?;
    if t == 0 {
        return Err(Error::input("gain table for an empty sequence"));
    }
    let omegas: Vec<f64> = (0..t).map(|k| bin_frequency(k, t)).collect();
    let gains = omegas.iter().map(|&w| spec.magnitude(w)).collect();
    Ok(GainTable { omegas, gains })
}

/// Filters every column of the `T×d` matrix `h` along its rows.
pub fn tfm_apply(h: &DenseMatrix, spec: &ButterworthSpec) -> Result<DenseMatrix> {
    if !h.is_finite() {
        return Err(Error::input("TFM input contains non-finite values"));
    }
    let t = h.rows();
    if t <= 1 {
        spec.validate()?;
        return Ok(h.clone());
    }
    let table = butterworth_gains(spec, t)?;
    apply_spectral_multiplier(h, &table.gains)
}

/// Prefix-only variant: row `t` of the output is the last row of the filter
/// applied to rows `0..=t`, so no position sees its future.
pub fn tfm_apply_prefix(h: &DenseMatrix, spec: &ButterworthSpec) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(h.rows(), h.cols());
    for t in 0..h.rows() {
        let idx: Vec<usize> = (0..=t).collect();
        let filtered = tfm_apply(&h.select_rows(&idx), spec)?;
        out.row_mut(t).copy_from_slice(filtered.row(t));
    }
    Ok(out)
}

/// `λ_k = 2 − 2cos(2πk/T)` for `k = 0..T`.
pub fn ring_eigenvalues(t: usize) -> Vec<f64> {
    (0..t)
        .map(|k| 2.0 - 2.0 * (2.0 * PI * k as f64 / t as f64).cos())
        .collect()
}

pub fn ring_adjacency(t: usize) -> DenseMatrix {
    DenseMatrix::from_fn(t, t, |i, j| {
        if i != j && ((i + 1) % t == j || (j + 1) % t == i) {
            1.0
        } else {
            0.0
        }
    })
}

/// Numeric eigenbasis of the `T`-node ring's combinatorial Laplacian.
pub fn ring_graph_basis(t: usize) -> Result<SpectralBasis> {
    if t < 3 {
        return Err(Error::input(format!("a ring needs at least 3 nodes, got {t}")));
    }
    SpectralBasis::from_laplacian(&combinatorial_laplacian(&ring_adjacency(t)))
}

/// Largest distance between a numeric ring eigenvector and the span of the
/// real DFT pair `{cos(2πkt/T), sin(2πkt/T)}` whose analytic eigenvalue is
/// nearest its own.
pub fn dft_span_residual(basis: &SpectralBasis) -> f64 {
    let t = basis.len();
    let mut worst = 0.0f64;
    for m in 0..t {
        let lambda = basis.eigenvalues[m];
        let k = (0..=t / 2)
            .min_by(|&a, &b| {
                let da = (2.0 - 2.0 * (2.0 * PI * a as f64 / t as f64).cos() - lambda).abs();
                let db = (2.0 - 2.0 * (2.0 * PI * b as f64 / t as f64).cos() - lambda).abs();
                da.total_cmp(&db)
            })
            .unwrap();
        let mut span: Vec<Vec<f64>> = Vec::new();
        for f in [f64::cos, f64::sin] {
            let v: Vec<f64> = (0..t)
                .map(|n| f(2.0 * PI * (k * n) as f64 / t as f64))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                span.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let u = basis.eigenvectors.col(m);
        let mut resid = u.clone();
        for s in &span {
            let c: f64 = u.iter().zip(s).map(|(a, b)| a * b).sum();
            for (r, b) in resid.iter_mut().zip(s) {
                *r -= c * b;
            }
        }
        worst = worst.max(resid.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gain_landmarks() {
        let spec = ButterworthSpec::new(0.4, 3).unwrap();
        assert!((spec.magnitude(0.4) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(spec.magnitude(0.0), 1.0);
        let sharp = ButterworthSpec::new(0.4, 16).unwrap();
        assert!(sharp.magnitude(0.2) > 0.999);
        assert!(sharp.magnitude(0.8) < 0.001);
    }

    #[test]
    fn gain_table_shape() {
        for t in 1..40 {
            let table = butterworth_gains(&ButterworthSpec::default(), t).unwrap();
            assert_eq!(table.gains[0], 1.0);
            for k in 1..t {
                assert_eq!(table.gains[k], table.gains[t - k]);
                assert!(table.gains[k] > 0.0 && table.gains[k] <= 1.0);
            }
            for k in 1..=t / 2 {
                assert!(table.gains[k] <= table.gains[k - 1]);
            }
        }
        let csv = butterworth_gains(&ButterworthSpec::default(), 2).unwrap().to_csv();
        assert!(csv.starts_with("k,omega,gain\n0,0.0,1.0\n1,1.0,"));
    }

    #[test]
    fn spec_validation() {
        assert!(ButterworthSpec::new(0.0, 2).is_err());
        assert!(ButterworthSpec::new(1.2, 2).is_err());
        assert!(ButterworthSpec::new(0.5, 0).is_err());
        assert!(ButterworthSpec::new(1.0, 1).is_ok());
    }

    #[test]
    fn constant_and_single_row_pass_through() {
        let spec = ButterworthSpec::default();
        let c = DenseMatrix::from_fn(9, 3, |_, c| c as f64 - 1.0);
        assert!(tfm_apply(&c, &spec).unwrap().max_abs_diff(&c) < 1e-12);
        let one = DenseMatrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        assert_eq!(tfm_apply(&one, &spec).unwrap(), one);
    }

    #[test]
    fn nyquist_column_is_scaled() {
        let spec = ButterworthSpec::new(0.25, 2).unwrap();
        let h = DenseMatrix::from_fn(8, 1, |r, _| if r % 2 == 0 { 1.0 } else { -1.0 });
        let out = tfm_apply(&h, &spec).unwrap();
        let g = (1.0f64 / (1.0 + 4f64.powi(4))).sqrt();
        assert!((g - 0.0624).abs() < 1e-4);
        assert!(out.max_abs_diff(&h.scale(g)) < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let mut h = DenseMatrix::zeros(4, 1);
        h[(2, 0)] = f64::INFINITY;
        assert!(tfm_apply(&h, &ButterworthSpec::default()).is_err());
    }

    #[test]
    fn twice_equals_squared_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ButterworthSpec::new(0.35, 2).unwrap();
        for t in [2usize, 5, 8, 13] {
            let h = random(t, 4, &mut rng);
            let twice = tfm_apply(&tfm_apply(&h, &spec).unwrap(), &spec).unwrap();
            let table = butterworth_gains(&spec, t).unwrap();
            let sq: Vec<f64> = table.gains.iter().map(|g| g * g).collect();
            let once = apply_spectral_multiplier(&h, &sq).unwrap();
            assert!(twice.max_abs_diff(&once) < 1e-10);
        }
    }

    #[test]
    fn column_means_and_shift_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ButterworthSpec::default();
        let h = random(11, 3, &mut rng);
        let out = tfm_apply(&h, &spec).unwrap();
        for c in 0..3 {
            let a: f64 = h.col(c).iter().sum();
            let b: f64 = out.col(c).iter().sum();
            assert!((a - b).abs() < 1e-10);
        }
        let rot: Vec<usize> = (0..11).map(|r| (r + 4) % 11).collect();
        let lhs = tfm_apply(&h.select_rows(&rot), &spec).unwrap();
        let rhs = out.select_rows(&rot);
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn prefix_mode_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ButterworthSpec::default();
        let h = random(7, 2, &mut rng);
        let mut h2 = h.clone();
        h2[(5, 0)] += 3.0;
        let a = tfm_apply_prefix(&h, &spec).unwrap();
        let b = tfm_apply_prefix(&h2, &spec).unwrap();
        for r in 0..5 {
            assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn ring_spectra() {
        let b4 = ring_graph_basis(4).unwrap();
        for (got, want) in b4.eigenvalues.iter().zip([0.0, 2.0, 2.0, 4.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        let b3 = ring_graph_basis(3).unwrap();
        for (got, want) in b3.eigenvalues.iter().zip([0.0, 3.0, 3.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        for t in 3..12 {
            let b = ring_graph_basis(t).unwrap();
            let c = b.eigenvectors.col(0);
            assert!(c.iter().all(|v| (v.abs() - 1.0 / (t as f64).sqrt()).abs() < 1e-9));
            assert!(dft_span_residual(&b) < 1e-8);
        }
        assert!(ring_graph_basis(2).is_err());
    }
}
