//! Global item co-occurrence graph and per-sequence local graphs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{write_atomic, SplitDataset};
use crate::error::{Error, Result};
use crate::numcore::DenseMatrix;

/// `W = RᵀR` with the diagonal zeroed, stored as symmetric CSR.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceGraph {
    n_items: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    degrees: Vec<f64>,
    /// `D^{-1/2}` with the zero-degree convention `0`.
    inv_sqrt_deg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphHeader {
    pub format: String,
    pub n_items: usize,
    pub nnz: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

const GRAPH_FORMAT: &str = "freqlab-graph/1";

impl CooccurrenceGraph {
    /// Builds from symmetric `(i, j, w)` entries; duplicates are summed and
    /// diagonal entries dropped.
    pub fn from_triples(n_items: usize, triples: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut acc: HashMap<(usize, usize), f64> = HashMap::new();
        for (i, j, w) in triples {
            if i >= n_items || j >= n_items {
                return Err(Error::input(format!("edge ({i}, {j}) outside {n_items} items")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::input(format!("edge ({i}, {j}) has invalid weight {w}")));
            }
            if i == j || w == 0.0 {
                continue;
            }
            let key = (i.min(j), i.max(j));
            *acc.entry(key).or_default() += w;
        }
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_items];
        for (&(i, j), &w) in &acc {
            rows[i].push((j, w));
            rows[j].push((i, w));
        }
        let mut row_ptr = Vec::with_capacity(n_items + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut degrees = Vec::with_capacity(n_items);
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut d = 0.0;
            for (c, w) in row {
                cols.push(c);
                weights.push(w);
                d += w;
            }
            degrees.push(d);
            row_ptr.push(cols.len());
        }
        let inv_sqrt_deg = degrees
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        Ok(Self {
            n_items,
            row_ptr,
            cols,
            weights,
            degrees,
            inv_sqrt_deg,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Stored nonzeros of the symmetric matrix (each edge counted twice).
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().copied().zip(self.weights[span].iter().copied())
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[span.clone()].binary_search(&j) {
            Ok(k) => self.weights[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// `y = L x` with `L = I − D^{-1/2} W D^{-1/2}`.
    pub fn laplacian_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_items);
        (0..self.n_items)
            .map(|i| {
                let s: f64 = self
                    .neighbors(i)
                    .map(|(j, w)| w * self.inv_sqrt_deg[j] * x[j])
                    .sum();
                x[i] - self.inv_sqrt_deg[i] * s
            })
            .collect()
    }

    /// `L E` for an `n_items × d` matrix, one sparse sweep.
    pub fn laplacian_apply(&self, e: &DenseMatrix) -> DenseMatrix {
        assert_eq!(e.rows(), self.n_items);
        let d = e.cols();
        let mut out = e.clone();
        let mut acc = vec![0.0; d];
        for i in 0..self.n_items {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (j, w) in self.neighbors(i) {
                let s = w * self.inv_sqrt_deg[j];
                for (a, v) in acc.iter_mut().zip(e.row(j)) {
                    *a += s * v;
                }
            }
            let si = self.inv_sqrt_deg[i];
            for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
                *o -= si * a;
            }
        }
        out
    }

    pub fn dense_adjacency(&self) -> DenseMatrix {
        let mut w = DenseMatrix::zeros(self.n_items, self.n_items);
        for i in 0..self.n_items {
            for (j, v) in self.neighbors(i) {
                w[(i, j)] = v;
            }
        }
        w
    }

    pub fn dense_laplacian(&self) -> DenseMatrix {
        normalized_laplacian(&self.dense_adjacency())
    }

    /// Header line (JSON) followed by `i \t j \t weight` rows for `i < j`.
    pub fn to_tsv(&self, config_hash: Option<&str>) -> String {
        let header = GraphHeader {
            format: GRAPH_FORMAT.into(),
            n_items: self.n_items,
            nnz: self.nnz(),
            config_hash: config_hash.map(str::to_string),
        };
        let mut out = serde_json::to_string(&header).unwrap();
        out.push('\n');
        for i in 0..self.n_items {
            for (j, w) in self.neighbors(i) {
                if j > i {
                    writeln!(out, "{i}\t{j}\t{w:?}").unwrap();
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        write_atomic(path, self.to_tsv(config_hash).as_bytes())
    }

    pub fn from_tsv(text: &str) -> Result<(Self, GraphHeader)> {
        let mut lines = text.lines();
        let header: GraphHeader = serde_json::from_str(
            lines.next().ok_or_else(|| Error::input("graph file is empty"))?,
        )?;
        if header.format != GRAPH_FORMAT {
            return Err(Error::input(format!("unsupported graph format `{}`", header.format)));
        }
        let mut triples = Vec::new();
        for (k, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                line: k + 2,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(parse_err("expected i, j, weight"));
            }
            let i = f[0].parse().map_err(|_| parse_err("bad row index"))?;
            let j = f[1].parse().map_err(|_| parse_err("bad column index"))?;
            let w = f[2].parse().map_err(|_| parse_err("bad weight"))?;
            triples.push((i, j, w));
        }
        let g = Self::from_triples(header.n_items, triples)?;
        if g.nnz() != header.nnz {
            return Err(Error::input(format!(
                "graph header declares nnz = {} but the body has {}",
                header.nnz,
                g.nnz()
            )));
        }
        Ok((g, header))
    }

    pub fn load(path: &Path) -> Result<(Self, GraphHeader)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Co-occurrence over TRAINING prefixes only. With `binarize`, `W_ij` counts
/// users whose history contains both items; otherwise repeat consumption
/// multiplies (`Σ_u c_ui · c_uj`).
pub fn build_cooccurrence(split: &SplitDataset, binarize: bool) -> Result<CooccurrenceGraph> {
    if split.sequences.is_empty() {
        return Err(Error::input("split has no training sequences"));
    }
    let mut acc: HashMap<(usize, usize), f64> = HashMap::new();
    for seq in &split.sequences {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for &i in seq.train() {
            *counts.entry(i).or_default() += 1.0;
        }
        let mut items: Vec<(usize, f64)> = counts.into_iter().collect();
        items.sort_by_key(|&(i, _)| i);
        for a in 0..items.len() {
            for b in (a + 1)..items.len() {
                let w = if binarize { 1.0 } else { items[a].1 * items[b].1 };
                *acc.entry((items[a].0, items[b].0)).or_default() += w;
            }
        }
    }
    CooccurrenceGraph::from_triples(split.n_items(), acc.into_iter().map(|((i, j), w)| (i, j, w)))
}

/// `I − D^{-1/2} A D^{-1/2}` with `D^{-1/2}_ii = 0` for isolated nodes.
pub fn normalized_laplacian(adjacency: &DenseMatrix) -> DenseMatrix {
    let n = adjacency.rows();
    let inv: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = adjacency.row(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    DenseMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - inv[i] * adjacency[(i, j)] * inv[j]
    })
}

/// `D − A`.
pub fn combinatorial_laplacian(adjacency: &DenseMatrix) -> DenseMatrix {
    let n = adjacency.rows();
    DenseMatrix::from_fn(n, n, |i, j| {
        if i == j {
            adjacency.row(i).iter().sum::<f64>() - adjacency[(i, i)]
        } else {
            -adjacency[(i, j)]
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalGraph {
    pub positions: Vec<usize>,
    pub adjacency: DenseMatrix,
    pub laplacian: DenseMatrix,
}

impl LocalGraph {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// True when no two nodes share weight.
    pub fn is_edgeless(&self) -> bool {
        self.adjacency.as_slice().iter().all(|&w| w == 0.0)
    }
}

/// Dense local graph over an ordered item list. Repeated items occupy distinct
/// nodes and, because `W` has a zero diagonal, share no weight.
pub fn local_subgraph(graph: &CooccurrenceGraph, target_items: &[usize]) -> Result<LocalGraph> {
    let t = target_items.len();
    if t < 2 {
        return Err(Error::input(format!("local graph needs at least 2 nodes, got {t}")));
    }
    if let Some(&bad) = target_items.iter().find(|&&i| i >= graph.n_items()) {
        return Err(Error::input(format!("item index {bad} outside the graph")));
    }
    let adjacency = DenseMatrix::from_fn(t, t, |s, u| {
        if s == u {
            0.0
        } else {
            graph.weight(target_items[s], target_items[u])
        }
    });
    let laplacian = normalized_laplacian(&adjacency);
    Ok(LocalGraph {
        positions: target_items.to_vec(),
        adjacency,
        laplacian,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::sym_eigendecompose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_cooccurrence() {
        // min_interactions = 3 would drop items; build the split by hand instead.
        let split = SplitDataset {
            users: vec!["u1".into(), "u2".into()],
            items: vec!["a".into(), "b".into(), "c".into(), "y".into(), "z".into()],
            item_text: vec![None; 5],
            sequences: vec![
                crate::dataset::UserSequence { user: 0, items: vec![0, 1, 3, 4] },
                crate::dataset::UserSequence { user: 1, items: vec![0, 1, 2, 3, 4] },
            ],
            stats: crate::dataset::SplitStats { users: 2, items: 5, interactions: 9, avg_len: 4.5 },
            max_seq_len: 50,
            filter_trace: vec![],
        };
        let g = build_cooccurrence(&split, true).unwrap();
        let w = g.dense_adjacency();
        let expected = [[0.0, 2.0, 1.0], [2.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(w[(i, j)], expected[i][j]);
            }
        }
        assert_eq!(&g.degrees()[..3], &[3.0, 3.0, 2.0]);
        // valid/test items never enter W
        assert_eq!(g.degrees()[3], 0.0);
        assert_eq!(g.degrees()[4], 0.0);
    }

    #[test]
    fn matches_brute_force_pair_counts_on_random_logs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n_items = rng.random_range(3..12);
            let n_users = rng.random_range(1..8);
            let sequences: Vec<crate::dataset::UserSequence> = (0..n_users)
                .map(|u| crate::dataset::UserSequence {
                    user: u,
                    items: (0..rng.random_range(3..10)).map(|_| rng.random_range(0..n_items)).collect(),
                })
                .collect();
            let split = SplitDataset {
                users: (0..n_users).map(|u| u.to_string()).collect(),
                items: (0..n_items).map(|i| i.to_string()).collect(),
                item_text: vec![None; n_items],
                sequences: sequences.clone(),
                stats: crate::dataset::SplitStats { users: n_users, items: n_items, interactions: 0, avg_len: 0.0 },
                max_seq_len: 50,
                filter_trace: vec![],
            };
            let g = build_cooccurrence(&split, true).unwrap();
            for i in 0..n_items {
                for j in 0..n_items {
                    let brute = if i == j {
                        0
                    } else {
                        sequences
                            .iter()
                            .filter(|s| s.train().contains(&i) && s.train().contains(&j))
                            .count()
                    };
                    assert_eq!(g.weight(i, j), brute as f64);
                    assert_eq!(g.weight(i, j), g.weight(j, i));
                }
            }
        }
    }

    #[test]
    fn single_item_history_is_edgeless() {
        let g = CooccurrenceGraph::from_triples(1, []).unwrap();
        assert_eq!(g.degrees(), &[0.0]);
        assert_eq!(g.laplacian_matvec(&[3.0]), vec![3.0]);
    }

    #[test]
    fn binarize_flag_counts_repeats() {
        let split = SplitDataset {
            users: vec!["u".into()],
            items: vec!["a".into(), "b".into(), "y".into(), "z".into()],
            item_text: vec![None; 4],
            sequences: vec![crate::dataset::UserSequence { user: 0, items: vec![0, 0, 1, 2, 3] }],
            stats: crate::dataset::SplitStats { users: 1, items: 4, interactions: 5, avg_len: 5.0 },
            max_seq_len: 50,
            filter_trace: vec![],
        };
        assert_eq!(build_cooccurrence(&split, true).unwrap().weight(0, 1), 1.0);
        assert_eq!(build_cooccurrence(&split, false).unwrap().weight(0, 1), 2.0);
    }

    fn random_graph(n: usize, density: f64, rng: &mut ChaCha8Rng) -> CooccurrenceGraph {
        let mut t = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(density) {
                    t.push((i, j, rng.random_range(1..5) as f64));
                }
            }
        }
        CooccurrenceGraph::from_triples(n, t).unwrap()
    }

    #[test]
    fn sparse_and_dense_laplacian_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_graph(30, 0.2, &mut rng);
        let x: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = g.dense_laplacian().matvec(&x);
        let sparse = g.laplacian_matvec(&x);
        for (a, b) in dense.iter().zip(&sparse) {
            assert!((a - b).abs() < 1e-13);
        }
        let e = DenseMatrix::column(&x);
        assert!(g.laplacian_apply(&e).max_abs_diff(&DenseMatrix::column(&sparse)) < 1e-13);
    }

    #[test]
    fn degree_scaled_constant_is_in_the_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_graph(25, 0.3, &mut rng);
        let x: Vec<f64> = g.degrees().iter().map(|d| d.sqrt()).collect();
        // isolated nodes have sqrt(0) = 0 entries, so the whole vector is in the kernel
        for v in g.laplacian_matvec(&x) {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn local_graph_copies_weights() {
        let g = CooccurrenceGraph::from_triples(3, [(0, 1, 2.0), (0, 2, 1.0), (1, 2, 1.0)]).unwrap();
        let local = local_subgraph(&g, &[0, 1, 2]).unwrap();
        assert_eq!(local.adjacency, g.dense_adjacency());
        let rep = local_subgraph(&g, &[1, 1]).unwrap();
        assert!(rep.is_edgeless());
        assert_eq!(rep.laplacian, DenseMatrix::identity(2));
        assert!(local_subgraph(&g, &[0]).is_err());
        assert!(local_subgraph(&g, &[0, 9]).is_err());
    }

    #[test]
    fn local_spectrum_lies_in_zero_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = random_graph(40, 0.15, &mut rng);
        for _ in 0..1000 {
            let t = rng.random_range(2..12);
            let items: Vec<usize> = (0..t).map(|_| rng.random_range(0..40)).collect();
            let local = local_subgraph(&g, &items).unwrap();
            let eig = sym_eigendecompose(&local.laplacian).unwrap();
            assert!(eig.eigenvalues[0] >= -1e-9);
            assert!(*eig.eigenvalues.last().unwrap() <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn quadratic_form_edge_sum_equals_eigen_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = random_graph(30, 0.2, &mut rng);
        for _ in 0..50 {
            let items: Vec<usize> = (0..10).map(|_| rng.random_range(0..30)).collect();
            let local = local_subgraph(&g, &items).unwrap();
            let f: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = &local.adjacency;
            let deg: Vec<f64> = (0..10).map(|i| a.row(i).iter().sum()).collect();
            let mut edge_form = 0.0;
            for i in 0..10 {
                if deg[i] == 0.0 {
                    edge_form += f[i] * f[i];
                    continue;
                }
                for j in 0..10 {
                    if a[(i, j)] > 0.0 {
                        let d = f[i] / deg[i].sqrt() - f[j] / deg[j].sqrt();
                        edge_form += 0.5 * a[(i, j)] * d * d;
                    }
                }
            }
            let eig = sym_eigendecompose(&local.laplacian).unwrap();
            let coeffs = eig.eigenvectors.transpose().matvec(&f);
            let spectral: f64 = coeffs.iter().zip(&eig.eigenvalues).map(|(c, l)| l * c * c).sum();
            assert!((edge_form - spectral).abs() <= 1e-9 * edge_form.abs().max(1.0));
        }
    }

    #[test]
    fn relabeling_permutes_local_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g = random_graph(12, 0.4, &mut rng);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..12).collect();
            p.reverse();
            p.swap(0, 5);
            p
        };
        let w = g.dense_adjacency();
        let mut triples = Vec::new();
        for i in 0..12 {
            for j in (i + 1)..12 {
                if w[(i, j)] > 0.0 {
                    triples.push((perm[i], perm[j], w[(i, j)]));
                }
            }
        }
        let gp = CooccurrenceGraph::from_triples(12, triples).unwrap();
        let items = [3, 7, 1, 3, 10];
        let mapped: Vec<usize> = items.iter().map(|&i| perm[i]).collect();
        assert_eq!(
            local_subgraph(&g, &items).unwrap().adjacency,
            local_subgraph(&gp, &mapped).unwrap().adjacency
        );
    }

    #[test]
    fn tsv_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_graph(20, 0.3, &mut rng);
        let text = g.to_tsv(Some("abc"));
        let (back, header) = CooccurrenceGraph::from_tsv(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(header.config_hash.as_deref(), Some("abc"));
        let broken = text.replacen(&format!("\"nnz\":{}", g.nnz()), "\"nnz\":1", 1);
        assert!(CooccurrenceGraph::from_tsv(&broken).is_err());
    }
}
