//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.

use crate::error::{Error, Result};
use crate::numcore::DenseMatrix;

/// Largest matrix order accepted by [`sym_eigendecompose`].
pub const MAX_ORDER: usize = 1024;

const MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-9;

/// Eigenvalues in ascending order with matching orthonormal eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

/// Eigendecomposition of a real symmetric matrix.
///
/// The input is symmetrized by averaging `(M + Mᵀ)/2` before rotating, so tiny
/// asymmetries from floating-point assembly are tolerated. Matrices that are
/// asymmetric beyond `1e-9` (scaled by the largest entry) are rejected.
pub fn sym_eigendecompose(m: &DenseMatrix) -> Result<SymEigen> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::input(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if n > MAX_ORDER {
        return Err(Error::Capability(format!(
            "dense eigendecomposition is capped at n = {MAX_ORDER}, got n = {n}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::input("matrix contains non-finite entries"));
    }
    let scale = m.as_slice().iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if !m.is_symmetric(SYMMETRY_TOL * scale) {
        return Err(Error::input("matrix is not symmetric"));
    }

    let mut a = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    // Rows of `vt` are the eigenvectors; transposed at the end.
    let mut vt = DenseMatrix::identity(n);
    let frob = a.frobenius();
    if frob == 0.0 || n == 1 {
        return Ok(finish(&a, vt));
    }
    let target = 1e-15 * frob;

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= target {
            converged = true;
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE
                    || apq.abs() <= 1e-18 * (a[(p, p)].abs() + a[(q, q)].abs())
                {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                rotate(&mut a, &mut vt, p, q);
                rotated = true;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged && off_diagonal_norm(&a) > 1e-12 * frob {
        return Err(Error::numeric(format!(
            "Jacobi eigensolver did not converge for a {n}x{n} matrix after {MAX_SWEEPS} sweeps"
        )));
    }
    Ok(finish(&a, vt))
}

fn rotate(a: &mut DenseMatrix, vt: &mut DenseMatrix, p: usize, q: usize) {
    let n = a.rows();
    let apq = a[(p, q)];
    let app = a[(p, p)];
    let aqq = a[(q, q)];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    a[(p, p)] = app - t * apq;
    a[(q, q)] = aqq + t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let arp = a[(r, p)];
        let arq = a[(r, q)];
        let new_rp = c * arp - s * arq;
        let new_rq = s * arp + c * arq;
        a[(r, p)] = new_rp;
        a[(p, r)] = new_rp;
        a[(r, q)] = new_rq;
        a[(q, r)] = new_rq;
    }
    // v_p' = c v_p − s v_q ; v_q' = s v_p + c v_q
    let (lo, hi) = vt.as_mut_slice().split_at_mut(q * n);
    let vp = &mut lo[p * n..(p + 1) * n];
    let vq = &mut hi[..n];
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

fn finish(a: &DenseMatrix, vt: DenseMatrix) -> SymEigen {
    let n = a.rows();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps index order among exact ties.
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |r, c| vt[(order[c], r)]);
    SymEigen {
        eigenvalues,
        eigenvectors,
    }
}
