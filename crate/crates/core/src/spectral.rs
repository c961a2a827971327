//! Graph Fourier transform, Laplacian smoothness and quantile band energies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{sym_eigendecompose, DenseMatrix, Direction};

/// Ascending graph frequencies and their orthonormal eigenvectors (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

impl SpectralBasis {
    pub fn from_laplacian(l: &DenseMatrix) -> Result<Self> {
        let eig = sym_eigendecompose(l)?;
        Ok(Self {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Forward `Uᵀ F` or inverse `U F̂`.
pub fn gft(basis: &SpectralBasis, f: &DenseMatrix, direction: Direction) -> Result<DenseMatrix> {
    if f.rows() != basis.len() {
        return Err(Error::input(format!(
            "signal has {} rows but the basis has {} nodes",
            f.rows(),
            basis.len()
        )));
    }
    Ok(match direction {
        Direction::Forward => basis.eigenvectors.t_matmul(f),
        Direction::Inverse => basis.eigenvectors.matmul(f),
    })
}

/// `trace(Fᵀ L F)`.
pub fn smoothness(l: &DenseMatrix, f: &DenseMatrix) -> Result<f64> {
    if l.rows() != l.cols() || l.rows() != f.rows() {
        return Err(Error::input(format!(
            "Laplacian {}x{} does not match signal with {} rows",
            l.rows(),
            l.cols(),
            f.rows()
        )));
    }
    let lf = l.matmul(f);
    Ok(lf
        .as_slice()
        .iter()
        .zip(f.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

/// `Σ_k λ_k ‖(UᵀF)_k‖²`, the same quantity as [`smoothness`] through the spectrum.
pub fn spectral_smoothness(basis: &SpectralBasis, f: &DenseMatrix) -> Result<f64> {
    let coeffs = gft(basis, f, Direction::Forward)?;
    Ok(row_energies(&coeffs)
        .iter()
        .zip(&basis.eigenvalues)
        .map(|(e, l)| e * l)
        .sum())
}

/// Squared norm of each row.
pub fn row_energies(coeffs: &DenseMatrix) -> Vec<f64> {
    (0..coeffs.rows())
        .map(|r| coeffs.row(r).iter().map(|v| v * v).sum())
        .collect()
}

/// Band of the frequency with ascending rank `rank` among `n`: `⌊rank·B/n⌋`.
///
/// For `n ≥ B` this splits the ranks into `B` contiguous groups whose sizes
/// differ by at most one. For `n < B` some bands stay empty and each frequency
/// lands in the band matching its relative rank.
pub fn band_of_rank(rank: usize, n: usize, n_bands: usize) -> usize {
    rank * n_bands / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandEnergy {
    pub n_bands: usize,
    pub energies: Vec<f64>,
    /// First rank of every band, plus `n` as a terminator.
    pub boundaries: Vec<usize>,
}

impl BandEnergy {
    pub fn total(&self) -> f64 {
        self.energies.iter().sum()
    }

    pub fn shares(&self) -> Vec<f64> {
        let total = self.total();
        self.energies
            .iter()
            .map(|e| if total > 0.0 { e / total } else { 0.0 })
            .collect()
    }
}

/// Energy per quantile band of GFT coefficients whose rows follow ascending
/// eigenvalue order.
pub fn band_energy(coefficients: &DenseMatrix, n_bands: usize) -> Result<BandEnergy> {
    let n = coefficients.rows();
    if n_bands == 0 {
        return Err(Error::input("at least one band is required"));
    }
    if n == 0 {
        return Err(Error::input("no frequencies to band"));
    }
    let mut energies = vec![0.0; n_bands];
    for (rank, e) in row_energies(coefficients).into_iter().enumerate() {
        energies[band_of_rank(rank, n, n_bands)] += e;
    }
    let boundaries = (0..=n_bands).map(|b| (b * n).div_ceil(n_bands)).collect();
    Ok(BandEnergy {
        n_bands,
        energies,
        boundaries,
    })
}
