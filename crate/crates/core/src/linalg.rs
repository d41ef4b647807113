//! Small dense helpers over `&[f64]` vectors and node-stacked matrices.

use nalgebra::{DMatrix, SymmetricEigen};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm2(a: &[f64]) -> f64 {
    norm2_sq(a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn dist2_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Column mean of node vectors.
pub fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let n = vs.len() as f64;
    let d = vs.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    for v in vs {
        axpy(1.0, v, &mut out);
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Stack node vectors as the columns of a `d x n` matrix.
pub fn stack_columns(vs: &[Vec<f64>]) -> DMatrix<f64> {
    let d = vs.first().map_or(0, Vec::len);
    DMatrix::from_fn(d, vs.len(), |r, c| vs[c][r])
}

pub fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

/// Eigenvalues of a symmetric matrix, sorted descending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Largest eigenvalue of `AᵀA / scale` for a row-major `rows x d` matrix.
pub fn gram_lambda_max(a: &[f64], rows: usize, d: usize, scale: f64) -> f64 {
    let m = DMatrix::from_row_slice(rows, d, a);
    let g = m.transpose() * &m / scale;
    sym_eigenvalues(&g).first().copied().unwrap_or(0.0)
}

/// `||X (I - 11ᵀ/n)||²_F` for node vectors `X`.
pub fn consensus_sq(vs: &[Vec<f64>]) -> f64 {
    let m = mean(vs);
    vs.iter().map(|v| dist2_sq(v, &m)).sum()
}

pub fn centering(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consensus_matches_matrix_form() {
        let vs = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.0]];
        let x = stack_columns(&vs);
        let direct = (x * centering(3)).norm_squared();
        assert!((consensus_sq(&vs) - direct).abs() < 1e-12);
    }

    #[test]
    fn eigenvalues_sorted_descending() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let ev = sym_eigenvalues(&m);
        assert!((ev[0] - 3.0).abs() < 1e-12 && (ev[1] - 1.0).abs() < 1e-12);
    }
}
