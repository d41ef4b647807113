//! Local objectives `f_i`, their stochastic gradients, and measured problem constants.
//!
//! The global objective is `f(x) = (1/n) Σᵢ fᵢ(x)`.

mod libsvm;

pub use libsvm::{load_libsvm, parse_libsvm, partition, synth_two_class, Dataset, PartitionStrategy};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, axpy, dist2_sq, norm2_sq};
use crate::rng::{seeded, Purpose};

/// Draws used to estimate the injected-noise part of the inner variance.
const NOISE_DRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Quadratic,
    Logistic,
}

/// One node's samples: a row-major `m x d` design and one target (or ±1 label) per row.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeData {
    pub a: Vec<f64>,
    pub targets: Vec<f64>,
}

impl NodeData {
    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    fn row(&self, r: usize, d: usize) -> &[f64] {
        &self.a[r * d..(r + 1) * d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    kind: ProblemKind,
    d: usize,
    nodes: Vec<NodeData>,
    l2_reg: f64,
    noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProblemConstants {
    #[serde(rename = "L")]
    pub l: f64,
    pub sigma2_hat: f64,
    pub zeta2_hat: f64,
    pub x_star: Option<Vec<f64>>,
    pub f_star: Option<f64>,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ProblemSpec {
    fn new(kind: ProblemKind, d: usize, nodes: Vec<NodeData>, l2_reg: f64) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Parameter("problem needs at least one node".into()));
        }
        for (i, nd) in nodes.iter().enumerate() {
            if nd.rows() == 0 {
                return Err(Error::Parameter(format!("node {i} has no samples")));
            }
            if nd.a.len() != nd.rows() * d {
                return Err(Error::Parameter(format!("node {i} design is not {} x {d}", nd.rows())));
            }
        }
        if l2_reg < 0.0 {
            return Err(Error::Parameter("l2_reg must be nonnegative".into()));
        }
        Ok(ProblemSpec { kind, d, nodes, l2_reg, noise_sigma: 0.0 })
    }

    /// `fᵢ(x) = ||Aᵢx − bᵢ||² / (2mᵢ)` per node.
    pub fn quadratic(d: usize, nodes: Vec<NodeData>) -> Result<Self> {
        Self::new(ProblemKind::Quadratic, d, nodes, 0.0)
    }

    /// `fᵢ(x) = mean log(1 + exp(−y aᵀx)) + (l2/2)||x||²` per node; labels must be ±1.
    pub fn logistic(d: usize, nodes: Vec<NodeData>, l2_reg: f64) -> Result<Self> {
        if nodes.iter().flat_map(|n| &n.targets).any(|y| *y != 1.0 && *y != -1.0) {
            return Err(Error::Parameter("logistic labels must be +1 or -1".into()));
        }
        Self::new(ProblemKind::Logistic, d, nodes, l2_reg)
    }

    /// Logistic problem over a partitioned dataset. Positive labels map to +1, all
    /// others to -1.
    pub fn logistic_from_dataset(data: &Dataset, parts: &[Vec<usize>], l2_reg: f64) -> Result<Self> {
        let nodes = parts
            .iter()
            .map(|rows| NodeData {
                a: rows.iter().flat_map(|&r| data.rows[r].iter().copied()).collect(),
                targets: rows.iter().map(|&r| if data.labels[r] > 0.0 { 1.0 } else { -1.0 }).collect(),
            })
            .collect();
        Self::logistic(data.dim, nodes, l2_reg)
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma.max(0.0);
        self
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, i: usize) -> &NodeData {
        &self.nodes[i]
    }

    pub fn rows(&self, i: usize) -> usize {
        self.nodes[i].rows()
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn l2_reg(&self) -> f64 {
        self.l2_reg
    }

    pub fn local_loss(&self, i: usize, x: &[f64]) -> f64 {
        let nd = &self.nodes[i];
        let m = nd.rows() as f64;
        let s: f64 = (0..nd.rows())
            .map(|r| {
                let z = linalg::dot(nd.row(r, self.d), x);
                match self.kind {
                    ProblemKind::Quadratic => 0.5 * (z - nd.targets[r]).powi(2),
                    ProblemKind::Logistic => softplus(-nd.targets[r] * z),
                }
            })
            .sum();
        s / m + 0.5 * self.l2_reg * norm2_sq(x)
    }

    /// Adds the data-term gradient of row `r` of node `i` into `out`.
    fn add_row_grad(&self, i: usize, r: usize, x: &[f64], out: &mut [f64]) {
        let nd = &self.nodes[i];
        let a = nd.row(r, self.d);
        let z = linalg::dot(a, x);
        let coef = match self.kind {
            ProblemKind::Quadratic => z - nd.targets[r],
            ProblemKind::Logistic => {
                let y = nd.targets[r];
                -y * sigmoid(-y * z)
            }
        };
        axpy(coef, a, out);
    }

    fn batch_grad(&self, i: usize, rows: impl Iterator<Item = usize>, count: usize, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.d];
        for r in rows {
            self.add_row_grad(i, r, x, &mut g);
        }
        let inv = 1.0 / count as f64;
        for (gj, xj) in g.iter_mut().zip(x) {
            *gj = *gj * inv + self.l2_reg * xj;
        }
        g
    }

    /// Exact `∇fᵢ(x)`.
    pub fn local_grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let m = self.rows(i);
        self.batch_grad(i, 0..m, m, x)
    }

    /// Mean gradient over a batch drawn without replacement, plus optional Gaussian
    /// noise. A full batch without noise is exactly [`Self::local_grad`] and draws nothing.
    pub fn grad_stochastic<R: Rng + ?Sized>(
        &self,
        i: usize,
        x: &[f64],
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let m = self.rows(i);
        if batch_size < 1 || batch_size > m {
            return Err(Error::Parameter(format!("batch size {batch_size} outside [1, {m}] for node {i}")));
        }
        let mut g = if batch_size == m {
            self.local_grad(i, x)
        } else {
            let mut idx = index::sample(rng, m, batch_size).into_vec();
            idx.sort_unstable();
            self.batch_grad(i, idx.into_iter(), batch_size, x)
        };
        if self.noise_sigma > 0.0 {
            for gj in &mut g {
                *gj += self.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(g)
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        (0..self.n_nodes()).map(|i| self.local_loss(i, x)).sum::<f64>() / self.n_nodes() as f64
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let grads: Vec<Vec<f64>> = (0..self.n_nodes()).map(|i| self.local_grad(i, x)).collect();
        linalg::mean(&grads)
    }

    /// `(1/n) Σᵢ ||∇fᵢ(x) − ∇f(x)||²`.
    pub fn zeta2_at(&self, x: &[f64]) -> f64 {
        let grads: Vec<Vec<f64>> = (0..self.n_nodes()).map(|i| self.local_grad(i, x)).collect();
        let g = linalg::mean(&grads);
        grads.iter().map(|gi| dist2_sq(gi, &g)).sum::<f64>() / self.n_nodes() as f64
    }

    /// Largest per-node variance of a single-sample stochastic gradient at `x`. The data
    /// part is enumerated exactly; the injected-noise part is estimated from draws.
    pub fn sigma2_at<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> f64 {
        let noise = if self.noise_sigma > 0.0 {
            (0..NOISE_DRAWS)
                .map(|_| {
                    (0..self.d)
                        .map(|_| (self.noise_sigma * rng.sample::<f64, _>(StandardNormal)).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / NOISE_DRAWS as f64
        } else {
            0.0
        };
        (0..self.n_nodes())
            .map(|i| {
                let full = self.local_grad(i, x);
                let m = self.rows(i);
                let data: f64 = (0..m)
                    .map(|r| dist2_sq(&self.batch_grad(i, std::iter::once(r), 1, x), &full))
                    .sum::<f64>()
                    / m as f64;
                data + noise
            })
            .fold(0.0, f64::max)
    }

    /// Smoothness constant: exact for quadratics, the standard `λmax/4 + l2` bound for
    /// logistic losses.
    pub fn smoothness(&self) -> f64 {
        (0..self.n_nodes())
            .map(|i| {
                let m = self.rows(i);
                let lam = linalg::gram_lambda_max(&self.nodes[i].a, m, self.d, m as f64);
                match self.kind {
                    ProblemKind::Quadratic => lam,
                    ProblemKind::Logistic => lam / 4.0 + self.l2_reg,
                }
            })
            .fold(0.0, f64::max)
    }

    /// Minimizer of the global quadratic via its normal equations; `None` for logistic
    /// problems or a singular pooled Gram matrix.
    pub fn optimum(&self) -> Option<Vec<f64>> {
        if self.kind != ProblemKind::Quadratic {
            return None;
        }
        let d = self.d;
        let mut h = DMatrix::<f64>::zeros(d, d);
        let mut rhs = DVector::<f64>::zeros(d);
        for nd in &self.nodes {
            let m = nd.rows();
            let a = DMatrix::from_row_slice(m, d, &nd.a);
            let b = DVector::from_column_slice(&nd.targets);
            h += a.transpose() * &a / m as f64;
            rhs += a.transpose() * b / m as f64;
        }
        let chol = h.cholesky()?;
        let x = chol.solve(&rhs);
        // one refinement step against the pooled gradient
        let x0: Vec<f64> = x.iter().copied().collect();
        let g = DVector::from_vec(self.grad(&x0)) * self.n_nodes() as f64;
        let x = x - chol.solve(&g);
        Some(x.iter().copied().collect())
    }

    /// Measures `L`, `σ̂²`, `ζ̂²` and (for quadratics) `x*`, `f*`. Variances are maxima
    /// over the origin, `x*` when known, and `probe_points` standard-normal points.
    pub fn constants<R: Rng + ?Sized>(&self, probe_points: usize, rng: &mut R) -> ProblemConstants {
        let x_star = self.optimum();
        let f_star = x_star.as_ref().map(|x| self.loss(x));
        let mut probes = vec![vec![0.0; self.d]];
        probes.extend(x_star.clone());
        for _ in 0..probe_points {
            probes.push((0..self.d).map(|_| rng.sample(StandardNormal)).collect());
        }
        let zeta2_hat = probes.iter().map(|x| self.zeta2_at(x)).fold(0.0, f64::max);
        let sigma2_hat = probes.iter().map(|x| self.sigma2_at(x, rng)).fold(0.0, f64::max);
        ProblemConstants { l: self.smoothness(), sigma2_hat, zeta2_hat, x_star, f_star }
    }
}

/// Synthetic least squares: node `i` has standard-normal `Aᵢ` and `bᵢ = Aᵢ(x₀* + h·uᵢ)`
/// with random unit `uᵢ`, so `h = 0` makes every node share one optimum.
pub fn synth_quadratic(n_nodes: usize, d: usize, m_per_node: usize, heterogeneity: f64, seed: u64) -> Result<ProblemSpec> {
    if n_nodes == 0 || d == 0 || m_per_node == 0 || heterogeneity < 0.0 {
        return Err(Error::Parameter("synthetic quadratic needs positive sizes and h >= 0".into()));
    }
    let mut rng = seeded(seed, Purpose::Data);
    let x0: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let nodes = (0..n_nodes)
        .map(|_| {
            let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let un = linalg::norm2(&u);
            u.iter_mut().for_each(|v| *v /= un);
            let xi: Vec<f64> = x0.iter().zip(&u).map(|(a, b)| a + heterogeneity * b).collect();
            let a: Vec<f64> = (0..m_per_node * d).map(|_| rng.sample(StandardNormal)).collect();
            let targets = (0..m_per_node).map(|r| linalg::dot(&a[r * d..(r + 1) * d], &xi)).collect();
            NodeData { a, targets }
        })
        .collect();
    ProblemSpec::quadratic(d, nodes)
}

/// Logistic problem on a synthetic two-class set split across nodes.
pub fn synth_logistic(
    n_nodes: usize,
    d: usize,
    m_per_node: usize,
    separation: f64,
    strategy: PartitionStrategy,
    l2_reg: f64,
    seed: u64,
) -> Result<ProblemSpec> {
    let data = synth_two_class(n_nodes * m_per_node, d, separation, seed);
    let parts = partition(&data, n_nodes, strategy, seed)?;
    ProblemSpec::logistic_from_dataset(&data, &parts, l2_reg)
}
