//! Global graph low-pass filtering of the item embedding table.
//!
//! The production path evaluates `Σ_k θ_k L^k E` by Horner's rule, one sparse
//! Laplacian sweep per order. The dense eigenbasis path `U diag(h(λ)) Uᵀ E` is
//! kept for verification and for the hard-truncation probe.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CooccurrenceGraph;
use crate::numcore::{eigen::MAX_ORDER, DenseMatrix};
use crate::spectral::SpectralBasis;

/// Polynomial response `h(λ) = Σ_k θ_k λ^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFilterSpec {
    pub coefficients: Vec<f64>,
}

impl PolyFilterSpec {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::input("polynomial filter needs at least θ_0"));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::input("polynomial coefficients must be finite"));
        }
        Ok(Self { coefficients })
    }

    /// `h(λ) = 1 − αλ`, `α ∈ [0, 1]`.
    pub fn first_order(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::input(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(Self {
            coefficients: vec![1.0, -alpha],
        })
    }

    pub fn order(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn response(&self, lambda: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * lambda + c)
    }
}

const COLUMN_BLOCK: usize = 16;

pub fn polynomial_filter(
    graph: &CooccurrenceGraph,
    spec: &PolyFilterSpec,
    e: &DenseMatrix,
) -> Result<DenseMatrix> {
    if e.rows() != graph.n_items() {
        return Err(Error::input(format!(
            "embedding table has {} rows but the graph has {} items",
            e.rows(),
            graph.n_items()
        )));
    }
    if spec.coefficients.is_empty() {
        return Err(Error::input("polynomial filter needs at least θ_0"));
    }
    let d = e.cols();
    let starts: Vec<usize> = (0..d).step_by(COLUMN_BLOCK).collect();
    let blocks: Vec<DenseMatrix> = starts
        .par_iter()
        .map(|&start| {
            let width = COLUMN_BLOCK.min(d - start);
            let block = e.slice_cols(start, width);
            horner(graph, &spec.coefficients, &block)
        })
        .collect();
    let mut out = DenseMatrix::zeros(e.rows(), d);
    for (block, &start) in blocks.iter().zip(&starts) {
        for r in 0..e.rows() {
            out.row_mut(r)[start..start + block.cols()].copy_from_slice(block.row(r));
        }
    }
    Ok(out)
}

fn horner(graph: &CooccurrenceGraph, theta: &[f64], e: &DenseMatrix) -> DenseMatrix {
    let k = theta.len() - 1;
    let mut acc = e.scale(theta[k]);
    for &c in theta[..k].iter().rev() {
        acc = graph.laplacian_apply(&acc);
        acc.add_assign(&e.scale(c));
    }
    acc
}

/// `U diag(gains) Uᵀ E`.
pub fn filter_with_basis(basis: &SpectralBasis, gains: &[f64], e: &DenseMatrix) -> Result<DenseMatrix> {
    if e.rows() != basis.len() || gains.len() != basis.len() {
        return Err(Error::input("basis, gains and embeddings disagree on size"));
    }
    let mut coeffs = basis.eigenvectors.t_matmul(e);
    for (r, g) in gains.iter().enumerate() {
        for v in coeffs.row_mut(r) {
            *v *= g;
        }
    }
    Ok(basis.eigenvectors.matmul(&coeffs))
}

/// Dense eigenbasis of the graph's normalized Laplacian, refusing graphs
/// beyond the dense solver's range.
pub fn oracle_basis(graph: &CooccurrenceGraph) -> Result<SpectralBasis> {
    if graph.n_items() > MAX_ORDER {
        return Err(Error::Capability(format!(
            "graph has {} items; the spectral oracle handles at most {MAX_ORDER}, use polynomial_filter",
            graph.n_items()
        )));
    }
    SpectralBasis::from_laplacian(&graph.dense_laplacian())
}

/// Exact spectral filtering with an arbitrary response.
pub fn spectral_oracle_filter(
    graph: &CooccurrenceGraph,
    response: impl Fn(f64) -> f64,
    e: &DenseMatrix,
) -> Result<DenseMatrix> {
    if e.rows() != graph.n_items() {
        return Err(Error::input("embedding rows do not match graph size"));
    }
    let basis = oracle_basis(graph)?;
    let gains: Vec<f64> = basis.eigenvalues.iter().map(|&l| response(l)).collect();
    filter_with_basis(&basis, &gains, e)
}

/// Keeps the lowest `floor(p · n)` frequencies by rank.
pub fn truncate_low(basis: &SpectralBasis, fraction: f64, e: &DenseMatrix) -> Result<DenseMatrix> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::input(format!("fraction must lie in [0, 1], got {fraction}")));
    }
    let n = basis.len();
    let keep = ((fraction * n as f64) + 1e-9).floor() as usize;
    let gains: Vec<f64> = (0..n).map(|r| if r < keep { 1.0 } else { 0.0 }).collect();
    filter_with_basis(basis, &gains, e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub metric: f64,
}

/// Ideal low-pass probe: for each `p`, keep the lowest `p`-fraction of graph
/// frequencies of `e` and score the result with `downstream_eval`. At `p = 1`
/// the table is passed through untouched.
pub fn truncation_sweep<F>(
    graph: &CooccurrenceGraph,
    e: &DenseMatrix,
    fractions: &[f64],
    mut downstream_eval: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(&DenseMatrix) -> Result<f64>,
{
    let basis = oracle_basis(graph)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &p in fractions {
        let filtered = if p == 1.0 {
            e.clone()
        } else {
            truncate_low(&basis, p, e)?
        };
        let metric = downstream_eval(&filtered).map_err(|err| {
            Error::Evaluation(format!("truncation sweep failed at p = {p}: {err}"))
        })?;
        rows.push(SweepRow { p, metric });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("p,metric\n");
    for r in rows {
        writeln!(out, "{},{}", r.p, r.metric).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> CooccurrenceGraph {
        let mut t = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.2) {
                    t.push((i, j, rng.random_range(1..6) as f64));
                }
            }
        }
        CooccurrenceGraph::from_triples(n, t).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn alpha_zero_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(20, &mut rng);
        let e = random(20, 7, &mut rng);
        let out = polynomial_filter(&g, &PolyFilterSpec::first_order(0.0).unwrap(), &e).unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn top_eigenvector_flips_sign_at_full_strength() {
        // a bipartite graph (single edge) has λ_max = 2
        let g = CooccurrenceGraph::from_triples(2, [(0, 1, 3.0)]).unwrap();
        let basis = oracle_basis(&g).unwrap();
        assert!((basis.eigenvalues[1] - 2.0).abs() < 1e-12);
        let un = DenseMatrix::column(&basis.eigenvectors.col(1));
        let out = polynomial_filter(&g, &PolyFilterSpec::first_order(1.0).unwrap(), &un).unwrap();
        assert!(out.max_abs_diff(&un.scale(-1.0)) < 1e-12);
    }

    #[test]
    fn polynomial_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = rng.random_range(5..60);
            let g = random_graph(n, &mut rng);
            let e = random(n, 20, &mut rng);
            let spec = PolyFilterSpec::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let fast = polynomial_filter(&g, &spec, &e).unwrap();
            let exact = spectral_oracle_filter(&g, |l| spec.response(l), &e).unwrap();
            assert!(fast.rel_diff(&exact) < 1e-10);
        }
    }

    #[test]
    fn filter_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_graph(30, &mut rng);
        let spec = PolyFilterSpec::new(vec![0.5, -0.3, 0.1]).unwrap();
        let (e1, e2) = (random(30, 4, &mut rng), random(30, 4, &mut rng));
        let combo = e1.scale(2.0).add(&e2.scale(-0.7));
        let lhs = polynomial_filter(&g, &spec, &combo).unwrap();
        let rhs = polynomial_filter(&g, &spec, &e1)
            .unwrap()
            .scale(2.0)
            .add(&polynomial_filter(&g, &spec, &e2).unwrap().scale(-0.7));
        assert!(lhs.rel_diff(&rhs) < 1e-10);
    }

    #[test]
    fn first_order_gain_is_bounded_on_normalized_spectrum() {
        for a in 0..=20 {
            let alpha = a as f64 / 20.0;
            let spec = PolyFilterSpec::first_order(alpha).unwrap();
            for l in 0..=200 {
                let lambda = l as f64 / 100.0;
                assert!(spec.response(lambda).abs() <= 1.0 + 1e-15);
            }
        }
    }

    #[test]
    fn input_validation() {
        assert!(PolyFilterSpec::first_order(1.5).is_err());
        assert!(PolyFilterSpec::first_order(-0.1).is_err());
        assert!(PolyFilterSpec::new(vec![]).is_err());
        let g = CooccurrenceGraph::from_triples(3, [(0, 1, 1.0)]).unwrap();
        let spec = PolyFilterSpec::first_order(0.3).unwrap();
        assert!(polynomial_filter(&g, &spec, &DenseMatrix::zeros(4, 2)).is_err());
        let big = CooccurrenceGraph::from_triples(MAX_ORDER + 1, []).unwrap();
        assert!(matches!(oracle_basis(&big), Err(Error::Capability(_))));
    }

    #[test]
    fn oracle_identity_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_graph(15, &mut rng);
        let e = random(15, 3, &mut rng);
        let out = spectral_oracle_filter(&g, |_| 1.0, &e).unwrap();
        assert!(out.max_abs_diff(&e) < 1e-12);
    }

    #[test]
    fn half_truncation_projects_onto_low_eigenvectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_graph(24, &mut rng);
        let basis = oracle_basis(&g).unwrap();
        let e = random(24, 5, &mut rng);
        let out = truncate_low(&basis, 0.5, &e).unwrap();
        let low = DenseMatrix::from_fn(24, 12, |r, c| basis.eigenvectors[(r, c)]);
        let proj = low.matmul(&low.t_matmul(&out));
        assert!(proj.sub(&out).frobenius() < 1e-9);
        // idempotent
        let again = truncate_low(&basis, 0.5, &out).unwrap();
        assert!(again.max_abs_diff(&out) < 1e-12);
    }

    #[test]
    fn sweep_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = random_graph(16, &mut rng);
        let e = random(16, 4, &mut rng);
        let rows = truncation_sweep(&g, &e, &[0.0, 1.0, 1.0], |m| Ok(m.frobenius())).unwrap();
        assert_eq!(rows[0].metric, 0.0);
        assert_eq!(rows[1].metric, e.frobenius());
        assert_eq!(rows[1].metric, rows[2].metric);
        assert_eq!(sweep_csv(&rows[..1]), "p,metric\n0,0\n");
        let err = truncation_sweep(&g, &e, &[0.5], |_| Err(Error::input("boom"))).unwrap_err();
        assert!(err.to_string().contains("p = 0.5"));
    }
}
