//! Gossip mixing matrices: construction, validation and spectra.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

const ROW_SUM_TOL: f64 = 1e-12;
const CONNECTIVITY_TOL: f64 = 1e-12;

/// How a topology is described in configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum TopologySpec {
    Ring,
    Complete,
    Edges { edges: Vec<[usize; 2]> },
}

impl TopologySpec {
    pub fn build(&self, n: usize) -> Result<MixingMatrix> {
        match self {
            TopologySpec::Ring => build_ring(n),
            TopologySpec::Complete => build_complete(n),
            TopologySpec::Edges { edges } => {
                let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e[0], e[1])).collect();
                build_from_edges(n, &pairs)
            }
        }
    }
}

/// Symmetric doubly stochastic weight matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    entries: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Asymmetric { i: usize, j: usize },
    RowSum { row: usize, sum: f64 },
    NegativeEntry { i: usize, j: usize, value: f64 },
    Disconnected { lambda2: f64 },
    Shape,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Asymmetric { i, j } => write!(f, "asymmetric at ({i},{j})"),
            Violation::RowSum { row, sum } => write!(f, "row {row} sums to {sum}"),
            Violation::NegativeEntry { i, j, value } => {
                write!(f, "negative entry {value} at ({i},{j})")
            }
            Violation::Disconnected { lambda2 } => {
                write!(f, "disconnected (lambda2 = {lambda2})")
            }
            Violation::Shape => write!(f, "entries do not form an n x n matrix"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralInfo {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    pub lambda2: f64,
    pub lambda_n: f64,
    pub gap: f64,
}

impl SpectralInfo {
    fn from_eigenvalues(eigenvalues: Vec<f64>) -> Self {
        // a single node has no second eigenvalue; its gap is complete
        let lambda2 = eigenvalues.get(1).copied().unwrap_or(0.0);
        let lambda_n = *eigenvalues.last().unwrap_or(&1.0);
        SpectralInfo { gap: 1.0 - lambda2, eigenvalues, lambda2, lambda_n }
    }

    /// `max(|λ₂|, |λₙ|)`: the per-step contraction of disagreement.
    pub fn lambda_bar(&self) -> f64 {
        self.lambda2.abs().max(self.lambda_n.abs())
    }
}

impl MixingMatrix {
    /// Wraps raw row-major entries without validating them.
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Self {
        MixingMatrix { n, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Column indices `j` with a nonzero weight in row `i`, ascending (includes `i` when
    /// the self weight is nonzero).
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.get(i, j) != 0.0)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.entries)
    }

    /// Checks every invariant and reports each one that fails.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let n = self.n;
        if n == 0 || self.entries.len() != n * n {
            return Err(vec![Violation::Shape]);
        }
        let mut violations = Vec::new();
        'sym: for i in 0..n {
            for j in (i + 1)..n {
                if self.get(i, j) != self.get(j, i) {
                    violations.push(Violation::Asymmetric { i, j });
                    break 'sym;
                }
            }
        }
        for row in 0..n {
            let sum: f64 = self.entries[row * n..(row + 1) * n].iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                violations.push(Violation::RowSum { row, sum });
                break;
            }
        }
        if let Some((idx, &value)) = self.entries.iter().enumerate().find(|(_, v)| **v < 0.0) {
            violations.push(Violation::NegativeEntry { i: idx / n, j: idx % n, value });
        }
        if n > 1 && violations.is_empty() {
            let lambda2 = linalg::sym_eigenvalues(&self.to_dmatrix())[1];
            if lambda2 >= 1.0 - CONNECTIVITY_TOL {
                violations.push(Violation::Disconnected { lambda2 });
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    fn validated(self) -> Result<Self> {
        self.validate().map_err(|v| {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            Error::InvalidTopology(msgs.join("; "))
        })?;
        Ok(self)
    }

    pub fn spectral(&self) -> Result<SpectralInfo> {
        let ev = linalg::sym_eigenvalues(&self.to_dmatrix());
        if ev.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("symmetric eigensolver returned non-finite values".into()));
        }
        Ok(SpectralInfo::from_eigenvalues(ev))
    }

    /// `(1 - η) I + η W`.
    pub fn effective(&self, eta: f64) -> Result<MixingMatrix> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Parameter(format!("averaging rate {eta} outside [0, 1]")));
        }
        let n = self.n;
        let entries = (0..n * n)
            .map(|idx| {
                let id = if idx / n == idx % n { 1.0 } else { 0.0 };
                (1.0 - eta) * id + eta * self.entries[idx]
            })
            .collect();
        Ok(MixingMatrix { n, entries })
    }
}

/// Ring with uniform weight 1/3 on self and both neighbours.
pub fn build_ring(n: usize) -> Result<MixingMatrix> {
    if n < 2 {
        return Err(Error::InvalidTopology(format!("ring needs at least 2 nodes, got {n}")));
    }
    let w = 1.0 / 3.0;
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        entries[i * n + i] += w;
        entries[i * n + (i + 1) % n] += w;
        entries[i * n + (i + n - 1) % n] += w;
    }
    MixingMatrix { n, entries }.validated()
}

pub fn build_complete(n: usize) -> Result<MixingMatrix> {
    if n < 1 {
        return Err(Error::InvalidTopology("complete graph needs at least 1 node".into()));
    }
    MixingMatrix { n, entries: vec![1.0 / n as f64; n * n] }.validated()
}

/// Metropolis-Hastings weights on an undirected graph.
pub fn build_from_edges(n: usize, edges: &[(usize, usize)]) -> Result<MixingMatrix> {
    if n < 1 {
        return Err(Error::InvalidTopology("graph needs at least 1 node".into()));
    }
    let mut adj = vec![Vec::<usize>::new(); n];
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(Error::InvalidTopology(format!("edge ({a},{b}) out of range for n = {n}")));
        }
        if a == b {
            return Err(Error::InvalidTopology(format!("self-loop edge ({a},{a})")));
        }
        if !adj[a].contains(&b) {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    if !is_connected(&adj) {
        return Err(Error::InvalidTopology("graph is disconnected".into()));
    }
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for &j in &adj[i] {
            entries[i * n + j] = 1.0 / (1.0 + adj[i].len().max(adj[j].len()) as f64);
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| entries[i * n + j]).sum();
        entries[i * n + i] = 1.0 - off;
    }
    MixingMatrix { n, entries }.validated()
}

fn is_connected(adj: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const THIRD: f64 = 1.0 / 3.0;

    #[test]
    fn ring_of_three_is_complete() {
        let w = build_ring(3).unwrap();
        assert!(w.entries().iter().all(|&v| (v - THIRD).abs() < 1e-15));
    }

    #[test]
    fn ring_of_two_merges_neighbor_slots() {
        let w = build_ring(2).unwrap();
        assert_eq!(w.entries(), &[THIRD, 2.0 * THIRD, 2.0 * THIRD, THIRD]);
    }

    #[test]
    fn ring_of_four_row_zero() {
        let w = build_ring(4).unwrap();
        assert_eq!(&w.entries()[0..4], &[THIRD, THIRD, 0.0, THIRD]);
    }

    #[test]
    fn ring_rejects_single_node() {
        assert!(matches!(build_ring(1), Err(Error::InvalidTopology(_))));
    }

    #[test]
    fn complete_spectra() {
        let s = build_complete(4).unwrap().spectral().unwrap();
        for (got, want) in s.eigenvalues.iter().zip([1.0, 0.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let s2 = build_complete(2).unwrap().spectral().unwrap();
        assert!(s2.lambda2.abs() < 1e-12 && (s2.gap - 1.0).abs() < 1e-12);
        assert_eq!(build_complete(1).unwrap().entries(), &[1.0]);
    }

    #[test]
    fn ring_spectra() {
        let s4 = build_ring(4).unwrap().spectral().unwrap();
        for (got, want) in s4.eigenvalues.iter().zip([1.0, THIRD, THIRD, -THIRD]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let s8 = build_ring(8).unwrap().spectral().unwrap();
        assert!((s8.lambda2 - (1.0 + 2f64.sqrt()) / 3.0).abs() < 1e-12);
        assert!((s8.lambda2 - 0.804738).abs() < 1e-6);
        assert!((s8.lambda_n + THIRD).abs() < 1e-12);
    }

    #[test]
    fn metropolis_two_nodes() {
        let w = build_from_edges(2, &[(0, 1)]).unwrap();
        assert_eq!(w.entries(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn metropolis_path_of_three() {
        let w = build_from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert!((w.get(0, 1) - THIRD).abs() < 1e-15);
        assert!((w.get(1, 2) - THIRD).abs() < 1e-15);
        assert!((w.get(0, 0) - 2.0 * THIRD).abs() < 1e-15);
        assert!((w.get(2, 2) - 2.0 * THIRD).abs() < 1e-15);
        assert!((w.get(1, 1) - THIRD).abs() < 1e-15);
    }

    #[test]
    fn metropolis_star() {
        let w = build_from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        for leaf in 1..4 {
            assert!((w.get(0, leaf) - 0.25).abs() < 1e-15);
            assert!((w.get(leaf, leaf) - 0.75).abs() < 1e-15);
        }
        assert!((w.get(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn edges_reject_disconnected_and_self_loops() {
        assert!(build_from_edges(4, &[(0, 1), (2, 3)]).is_err());
        assert!(build_from_edges(2, &[(0, 0), (0, 1)]).is_err());
    }

    #[test]
    fn validate_examples() {
        let id = MixingMatrix::from_entries(2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(id.validate().unwrap_err()[0], Violation::Disconnected { .. }));
        assert!(MixingMatrix::from_entries(2, vec![0.6, 0.4, 0.4, 0.6]).validate().is_ok());
        let bad = MixingMatrix::from_entries(2, vec![0.7, 0.4, 0.4, 0.6]);
        assert!(matches!(bad.validate().unwrap_err()[0], Violation::RowSum { row: 0, .. }));
        let asym = MixingMatrix::from_entries(2, vec![0.6, 0.4, 0.3, 0.7]);
        assert!(asym.validate().unwrap_err().iter().any(|v| matches!(v, Violation::Asymmetric { .. })));
        let neg = MixingMatrix::from_entries(2, vec![1.2, -0.2, -0.2, 1.2]);
        assert!(neg.validate().unwrap_err().iter().any(|v| matches!(v, Violation::NegativeEntry { .. })));
    }

    #[test]
    fn effective_endpoints_and_ring4() {
        let w = build_ring(4).unwrap();
        let e0 = w.effective(0.0).unwrap();
        assert_eq!(e0.to_dmatrix(), DMatrix::identity(4, 4));
        assert_eq!(w.effective(1.0).unwrap(), w);
        let s = w.effective(0.5).unwrap().spectral().unwrap();
        assert!((s.lambda_n - THIRD).abs() < 1e-12);
        assert!(w.effective(1.5).is_err());
        assert!(w.effective(-0.1).is_err());
    }
}
