//! Coupling matrices for the estimate exchange.
//!
//! `L` is symmetric with nonnegative off-diagonal weights on graph edges and
//! zero row sums, so `1^T L = 0` and `L 1 = 0`. Its eigenvalues satisfy
//! `rho_m <= ... <= rho_2 < rho_1 = 0` on a connected graph and
//! `||I + L - 11^T/m||_2 = max(|1 + rho_2|, |1 + rho_m|)`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::PolySchedule;

const EIGEN_TOL: f64 = 1e-10;

/// Undirected simple graph on `m` nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    m: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Adjacency {
    /// Builds the graph from an edge list; edges are unordered pairs.
    pub fn from_edges(m: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if m == 0 {
            return Err(Error::Graph("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= m || b >= m {
                return Err(Error::Graph(format!("edge ({a}, {b}) references a node outside 0..{m}")));
            }
            if a == b {
                return Err(Error::Graph(format!("self loop at node {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self { m, edges: set })
    }

    /// Builds the graph from a dense 0/1 matrix, which must be symmetric with zero diagonal.
    pub fn from_matrix(adj: &[Vec<u8>]) -> Result<Self> {
        let m = adj.len();
        let mut edges = Vec::new();
        for (i, row) in adj.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Graph("adjacency matrix is not square".into()));
            }
            if row[i] != 0 {
                return Err(Error::Graph(format!("nonzero diagonal at node {i}")));
            }
            for (j, &a) in row.iter().enumerate() {
                if a > 1 {
                    return Err(Error::Graph(format!("entry ({i}, {j}) is not 0/1")));
                }
                if a != adj[j][i] {
                    return Err(Error::Graph(format!("adjacency not symmetric at ({i}, {j})")));
                }
                if a == 1 && i < j {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(m, &edges)
    }

    pub fn path(m: usize) -> Result<Self> {
        let edges: Vec<_> = (1..m).map(|i| (i - 1, i)).collect();
        Self::from_edges(m, &edges)
    }

    pub fn ring(m: usize) -> Result<Self> {
        let mut edges: Vec<_> = (1..m).map(|i| (i - 1, i)).collect();
        if m > 2 {
            edges.push((m - 1, 0));
        }
        Self::from_edges(m, &edges)
    }

    pub fn complete(m: usize) -> Result<Self> {
        let edges: Vec<_> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
        Self::from_edges(m, &edges)
    }

    /// Seeded connected random graph: a random spanning tree (each node in a
    /// shuffled order attaches to a uniformly chosen earlier node) plus every
    /// remaining pair independently with probability `extra_edge_prob`.
    pub fn random_connected(m: usize, extra_edge_prob: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&extra_edge_prob) {
            return Err(Error::invalid("extra_edge_prob must lie in [0, 1]"));
        }
        let mut rng = rng::stream(seed, rng::domain::TOPOLOGY, m as u64, 0);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let mut edges = Vec::new();
        for i in 1..m {
            let j = rng.random_range(0..i);
            edges.push((order[i], order[j]));
        }
        let mut g = Self::from_edges(m, &edges)?;
        for a in 0..m {
            for b in a + 1..m {
                let p: f64 = rng.random();
                if p < extra_edge_prob {
                    g.edges.insert((a, b));
                }
            }
        }
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.m
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.m];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.m];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.m];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &nb in &adj[n] {
                if !seen[nb] {
                    seen[nb] = true;
                    stack.push(nb);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum WeightRule {
    /// Every edge gets weight `w`.
    Uniform { w: f64 },
    /// `L_ij = 1 / (1 + max(deg_i, deg_j))` on edges.
    #[default]
    Metropolis,
}

/// Symmetric coupling matrix with zero row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    m: usize,
    entries: Vec<f64>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl WeightMatrix {
    /// Wraps a dense row-major matrix without validating it; see [`validate_coupling`].
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("weight matrix must be square and nonempty"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("weight matrix has non-finite entries"));
        }
        let entries = rows.concat();
        let neighbors = (0..m)
            .map(|i| {
                (0..m)
                    .filter(|&j| j != i && entries[i * m + j] != 0.0)
                    .map(|j| (j, entries[i * m + j]))
                    .collect()
            })
            .collect();
        Ok(Self { m, entries, neighbors })
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    /// Off-diagonal nonzeros of row `i` as `(j, L_ij)`.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.m).map(<[f64]>::to_vec).collect()
    }

    fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.m, &self.entries)
    }

    /// `I + scale * L - 11^T/m`.
    fn mixing_deviation(&self, scale: f64) -> DMatrix<f64> {
        let m = self.m;
        let inv = 1.0 / m as f64;
        DMatrix::from_fn(m, m, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id + scale * self.get(i, j) - inv
        })
    }

    /// `||I + scale * L - 11^T/m||_2` via symmetric eigen-decomposition.
    pub fn mixing_norm(&self, scale: f64) -> Result<f64> {
        let eig = SymmetricEigen::try_new(self.mixing_deviation(scale), f64::EPSILON, 0).ok_or(Error::EigenSolver)?;
        Ok(eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())))
    }

    fn eigenvalues(&self) -> Result<Vec<f64>> {
        let eig = SymmetricEigen::try_new(self.to_dmatrix(), f64::EPSILON, 0).ok_or(Error::EigenSolver)?;
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        Ok(ev)
    }

    pub fn trace(&self) -> f64 {
        (0..self.m).map(|i| self.get(i, i)).sum()
    }
}

/// Builds `L` from a connected graph and a weight rule.
pub fn build_weights(adjacency: &Adjacency, rule: WeightRule) -> Result<WeightMatrix> {
    let m = adjacency.num_nodes();
    if !adjacency.is_connected() {
        return Err(Error::Graph("graph is disconnected".into()));
    }
    let deg = adjacency.degrees();
    let mut rows = vec![vec![0.0; m]; m];
    for (a, b) in adjacency.edges() {
        let w = match rule {
            WeightRule::Uniform { w } => {
                if !(w > 0.0 && w.is_finite()) {
                    return Err(Error::invalid(format!("uniform weight {w} must be positive and finite")));
                }
                w
            }
            WeightRule::Metropolis => 1.0 / (1.0 + deg[a].max(deg[b]) as f64),
        };
        rows[a][b] = w;
        rows[b][a] = w;
    }
    for (i, row) in rows.iter_mut().enumerate() {
        let s: f64 = row.iter().sum();
        row[i] = -s;
    }
    let l = WeightMatrix::from_rows(&rows)?;
    let report = validate_coupling(&l)?;
    if !report.norm_below_one {
        // spectrum of the unit-weight Laplacian bounds the admissible uniform weight
        let unit: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.iter()
                    .enumerate()
                    .map(|(j, v)| if i == j { -(deg[i] as f64) } else if *v != 0.0 { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let unit_max = WeightMatrix::from_rows(&unit)?
            .eigenvalues()?
            .first()
            .map(|v| v.abs())
            .unwrap_or(1.0);
        return Err(Error::Weight {
            norm: report.norm_value,
            suggested_max: 2.0 / unit_max,
        });
    }
    if !report.pass() {
        return Err(Error::Graph(format!("constructed matrix failed validation: {report:?}")));
    }
    Ok(l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingReport {
    pub symmetric: bool,
    pub zero_row_sums: bool,
    pub nonnegative_off_diagonal: bool,
    pub norm_value: f64,
    pub norm_below_one: bool,
    /// Exactly one eigenvalue at zero.
    pub connected: bool,
    pub zero_eigenvalues: usize,
}

impl CouplingReport {
    pub fn pass(&self) -> bool {
        self.symmetric && self.zero_row_sums && self.nonnegative_off_diagonal && self.norm_below_one && self.connected
    }
}

/// Checks each coupling condition independently.
pub fn validate_coupling(l: &WeightMatrix) -> Result<CouplingReport> {
    let m = l.size();
    let scale = l.entries.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-12 * scale;
    let symmetric = (0..m).all(|i| (0..m).all(|j| (l.get(i, j) - l.get(j, i)).abs() <= tol));
    let zero_row_sums = (0..m).all(|i| (0..m).map(|j| l.get(i, j)).sum::<f64>().abs() <= tol * m as f64);
    let nonnegative_off_diagonal = (0..m).all(|i| (0..m).all(|j| i == j || l.get(i, j) >= 0.0));
    // eigen-decompose the symmetric part so the remaining checks stay meaningful
    let sym = DMatrix::from_fn(m, m, |i, j| 0.5 * (l.get(i, j) + l.get(j, i)));
    let ev = SymmetricEigen::try_new(sym, f64::EPSILON, 0).ok_or(Error::EigenSolver)?.eigenvalues;
    let zero_eigenvalues = ev.iter().filter(|v| v.abs() <= EIGEN_TOL * scale).count();
    let norm_value = l.mixing_norm(1.0)?;
    Ok(CouplingReport {
        symmetric,
        zero_row_sums,
        nonnegative_off_diagonal,
        norm_value,
        norm_below_one: norm_value < 1.0,
        connected: zero_eigenvalues == 1,
        zero_eigenvalues,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    /// Ascending: `rho_m, ..., rho_2, rho_1`.
    pub eigenvalues: Vec<f64>,
    /// `|rho_2|`, the spectral gap.
    pub rho2_abs: f64,
    /// `|rho_m|`, the largest magnitude.
    pub rho_m_abs: f64,
    /// `||I + L - 11^T/m||_2`.
    pub norm_check: f64,
}

pub fn spectral_gap(l: &WeightMatrix) -> Result<SpectralReport> {
    let eigenvalues = l.eigenvalues()?;
    let m = eigenvalues.len();
    let rho_m_abs = eigenvalues[0].abs();
    let rho2_abs = if m >= 2 { eigenvalues[m - 2].abs() } else { 0.0 };
    Ok(SpectralReport {
        rho2_abs,
        rho_m_abs,
        norm_check: l.mixing_norm(1.0)?,
        eigenvalues,
    })
}

/// Least `k` with `gamma^k |rho_m| <= 1`. From that index on, the weakened
/// mixing matrix contracts: `||I + gamma^k L - 11^T/m|| = 1 - gamma^k |rho_2|`.
pub fn contraction_threshold(l: &WeightMatrix, gamma: &PolySchedule) -> Result<u64> {
    if !gamma.is_non_increasing() {
        return Err(Error::invalid("contraction threshold needs a non-increasing gamma schedule"));
    }
    let rho_m = spectral_gap(l)?.rho_m_abs;
    contraction_index(rho_m, gamma)
}

pub(crate) fn contraction_index(rho_m_abs: f64, gamma: &PolySchedule) -> Result<u64> {
    let ok = |k: u64| gamma.value(k as f64) * rho_m_abs <= 1.0;
    let start = gamma.first_index();
    if ok(start) {
        return Ok(start);
    }
    let mut hi = start.max(1);
    while !ok(hi) {
        if hi >= 1 << 62 {
            return Err(Error::invalid("gamma never falls below 1/|rho_m|"));
        }
        hi *= 2;
    }
    let mut lo = start;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn path_two_uniform_half() {
        let l = build_weights(&Adjacency::path(2).unwrap(), WeightRule::Uniform { w: 0.5 }).unwrap();
        assert_eq!(l.rows(), vec![vec![-0.5, 0.5], vec![0.5, -0.5]]);
        let r = validate_coupling(&l).unwrap();
        assert!(r.pass());
        assert!(r.norm_value < 1e-15);
        let s = spectral_gap(&l).unwrap();
        assert!(approx(s.rho2_abs, 1.0, 1e-12));
    }

    #[test]
    fn complete_three_spectrum() {
        let l = build_weights(&Adjacency::complete(3).unwrap(), WeightRule::Uniform { w: 1.0 / 3.0 }).unwrap();
        let s = spectral_gap(&l).unwrap();
        assert!(approx(s.eigenvalues[0], -1.0, 1e-12));
        assert!(approx(s.eigenvalues[1], -1.0, 1e-12));
        assert!(approx(s.eigenvalues[2], 0.0, 1e-12));
        assert!(approx(s.rho2_abs, 1.0, 1e-12));
    }

    #[test]
    fn ring_four_gap() {
        let l = build_weights(&Adjacency::ring(4).unwrap(), WeightRule::Uniform { w: 0.25 }).unwrap();
        // circulant spectrum 0.25 (2 cos(2 pi k / 4) - 2)
        let expected: Vec<f64> = (0..4)
            .map(|k| 0.25 * (2.0 * (2.0 * std::f64::consts::PI * k as f64 / 4.0).cos() - 2.0))
            .collect();
        let s = spectral_gap(&l).unwrap();
        let mut e = expected.clone();
        e.sort_by(|a, b| a.total_cmp(b));
        for (a, b) in s.eigenvalues.iter().zip(&e) {
            assert!(approx(*a, *b, 1e-12));
        }
        assert!(approx(s.rho2_abs, 0.5, 1e-12));
    }

    #[test]
    fn norm_condition_failure() {
        let l = WeightMatrix::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let r = validate_coupling(&l).unwrap();
        assert!(approx(r.norm_value, 1.0, 1e-12));
        assert!(!r.norm_below_one);
        assert!(r.symmetric && r.zero_row_sums && r.connected);
        let err = build_weights(&Adjacency::path(2).unwrap(), WeightRule::Uniform { w: 1.0 }).unwrap_err();
        match err {
            Error::Weight { suggested_max, .. } => assert!(approx(suggested_max, 1.0, 1e-12)),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn block_diagonal_is_disconnected() {
        let rows = vec![
            vec![-0.5, 0.5, 0.0, 0.0],
            vec![0.5, -0.5, 0.0, 0.0],
            vec![0.0, 0.0, -0.5, 0.5],
            vec![0.0, 0.0, 0.5, -0.5],
        ];
        let r = validate_coupling(&WeightMatrix::from_rows(&rows).unwrap()).unwrap();
        assert!(!r.connected);
        assert_eq!(r.zero_eigenvalues, 2);
        assert!(!r.pass());
        let g = Adjacency::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(matches!(build_weights(&g, WeightRule::Metropolis), Err(Error::Graph(_))));
    }

    #[test]
    fn asymmetric_and_negative_entries_reported() {
        let rows = vec![vec![-0.3, 0.3], vec![0.2, -0.2]];
        let r = validate_coupling(&WeightMatrix::from_rows(&rows).unwrap()).unwrap();
        assert!(!r.symmetric);
        let rows = vec![vec![0.3, -0.3], vec![-0.3, 0.3]];
        let r = validate_coupling(&WeightMatrix::from_rows(&rows).unwrap()).unwrap();
        assert!(!r.nonnegative_off_diagonal);
    }

    #[test]
    fn adjacency_matrix_input() {
        let g = Adjacency::from_matrix(&[vec![0, 1, 0], vec![1, 0, 1], vec![0, 1, 0]]).unwrap();
        assert_eq!(g, Adjacency::path(3).unwrap());
        assert!(Adjacency::from_matrix(&[vec![0, 1], vec![0, 0]]).is_err());
        assert!(Adjacency::from_matrix(&[vec![1, 0], vec![0, 0]]).is_err());
    }

    #[test]
    fn contraction_threshold_examples() {
        let l = build_weights(&Adjacency::path(2).unwrap(), WeightRule::Uniform { w: 0.5 }).unwrap();
        assert_eq!(contraction_threshold(&l, &PolySchedule::rational(1.0, 1.0, 1.0)).unwrap(), 0);
        assert_eq!(contraction_threshold(&l, &PolySchedule::rational(2.0, 1.0, 1.0)).unwrap(), 1);

        let g = PolySchedule::rational(1.0, 0.1, 0.9);
        let t = contraction_index(2.0, &g).unwrap();
        let brute = (0..).find(|&k| g.eval(k).unwrap() <= 0.5).unwrap();
        assert_eq!(t, brute);
        assert!(contraction_threshold(&l, &PolySchedule::monomial(1.0, 0.5, 0.0)).is_err());
    }

    #[test]
    fn metropolis_random_graphs_valid() {
        for seed in 0..20 {
            let g = Adjacency::random_connected(20, 0.1, seed).unwrap();
            assert!(g.is_connected());
            let l = build_weights(&g, WeightRule::Metropolis).unwrap();
            let r = validate_coupling(&l).unwrap();
            assert!(r.pass(), "seed {seed}: {r:?}");
            for i in 0..20 {
                let row: f64 = (0..20).map(|j| l.get(i, j)).sum();
                let col: f64 = (0..20).map(|j| l.get(j, i)).sum();
                assert!(row.abs() < 1e-12 && col.abs() < 1e-12);
            }
            let s = spectral_gap(&l).unwrap();
            let sum: f64 = s.eigenvalues.iter().sum();
            assert!((sum - l.trace()).abs() <= 1e-9 * l.trace().abs());
        }
    }

    #[test]
    fn contraction_holds_beyond_threshold() {
        let g = Adjacency::random_connected(12, 0.2, 3).unwrap();
        let l = build_weights(&g, WeightRule::Uniform { w: 0.3 }).unwrap_or_else(|_| build_weights(&g, WeightRule::Metropolis).unwrap());
        let gamma = PolySchedule::rational(3.0, 0.1, 0.9);
        let s = spectral_gap(&l).unwrap();
        let t = contraction_threshold(&l, &gamma).unwrap();
        for k in (t..t + 5000).step_by(97) {
            let gk = gamma.eval(k).unwrap();
            let n = l.mixing_norm(gk).unwrap();
            assert!(n <= 1.0 - gk * s.rho2_abs + 1e-10, "k={k}: {n}");
        }
    }
}
