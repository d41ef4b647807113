//! Node-wise simulation of DeepSqueeze and its baselines in synchronized rounds.
//!
//! Each step has two phases. The local phase computes every node's gradient and
//! outgoing message from the time-`t` snapshot; the combine phase builds every node's
//! time-`t+1` state from those messages. Both phases only read the previous snapshot,
//! so the result does not depend on node evaluation order or thread count.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::compression::{self, message_bits, CompressorSpec, FLOAT_BITS};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{self, axpy, dist2_sq, norm2_sq};
use crate::problems::ProblemSpec;
use crate::rng::{keyed, Purpose};
use crate::topology::{MixingMatrix, TopologySpec};
use crate::trace::{Trace, TraceRecord};

/// Any coordinate above this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "deepsqueeze")]
    DeepSqueeze,
    #[serde(rename = "dpsgd")]
    DPSGD,
    #[serde(rename = "dcd_psgd")]
    DCDPSGD,
    ChocoSgd,
    CentralSgd,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::DeepSqueeze => "deepsqueeze",
            Algorithm::DPSGD => "dpsgd",
            Algorithm::DCDPSGD => "dcd_psgd",
            Algorithm::ChocoSgd => "choco_sgd",
            Algorithm::CentralSgd => "central_sgd",
        }
    }

    /// Whether the algorithm sends compressed messages at all.
    pub fn uses_compressor(self) -> bool {
        matches!(self, Algorithm::DeepSqueeze | Algorithm::DCDPSGD | Algorithm::ChocoSgd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub eta: f64,
    pub iterations: usize,
    /// `None` means full local batches.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub topology: TopologySpec,
    pub compressor: CompressorSpec,
    pub eval_every: usize,
    pub lr_decay: Option<LrDecay>,
    /// Keep `X_t`, `G_t` and `Δ_t` for every step (needed by the oracle and monitors).
    pub record_artifacts: bool,
    pub exec: Exec,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, gamma: f64, eta: f64, iterations: usize) -> Self {
        RunConfig {
            algorithm,
            gamma,
            eta,
            iterations,
            batch_size: None,
            seed: 0,
            topology: TopologySpec::Ring,
            compressor: CompressorSpec::identity(),
            eval_every: 1,
            lr_decay: None,
            record_artifacts: false,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be positive", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Parameter(format!("averaging rate {} outside [0, 1]", self.eta)));
        }
        if self.iterations < 1 {
            return Err(Error::Parameter("iteration count must be at least 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Parameter("eval_every must be at least 1".into()));
        }
        if let Some(dec) = self.lr_decay {
            if dec.every < 1 || !(dec.factor > 0.0) {
                return Err(Error::Parameter("lr_decay needs every >= 1 and factor > 0".into()));
            }
        }
        Ok(())
    }

    /// Step size in effect at iteration `t`.
    pub fn gamma_at(&self, t: usize) -> f64 {
        match self.lr_decay {
            Some(dec) => self.gamma * dec.factor.powi((t / dec.every) as i32),
            None => self.gamma,
        }
    }

    pub fn batch_for(&self, problem: &ProblemSpec, node: usize) -> usize {
        self.batch_size.unwrap_or_else(|| problem.rows(node))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub x: Vec<f64>,
    /// Residual of the node's last compression (DeepSqueeze only).
    pub delta: Vec<f64>,
    /// Publicly known replica `x̂ᵢ`, identical at every holder (DCD-PSGD, CHOCO-SGD).
    pub hat: Vec<f64>,
}

impl NodeState {
    pub fn zeros(d: usize) -> Self {
        NodeState { x: vec![0.0; d], delta: vec![0.0; d], hat: vec![0.0; d] }
    }

    fn is_sane(&self) -> bool {
        [&self.x, &self.delta, &self.hat]
            .iter()
            .all(|v| v.iter().all(|c| c.is_finite() && c.abs() <= DIVERGENCE_LIMIT))
    }
}

pub fn initial_states(problem: &ProblemSpec) -> Vec<NodeState> {
    vec![NodeState::zeros(problem.dim()); problem.n_nodes()]
}

/// Everything a step needs besides the states and the gossip weights.
#[derive(Clone, Copy)]
pub struct Round<'a> {
    pub problem: &'a ProblemSpec,
    pub t: usize,
    pub seed: u64,
    pub gamma: f64,
    pub batch_size: Option<usize>,
    pub exec: Exec,
}

impl Round<'_> {
    /// Stochastic gradient of node `i`, keyed by `(seed, i, t)`.
    pub fn gradient(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        let b = self.batch_size.unwrap_or_else(|| self.problem.rows(i));
        self.problem.grad_stochastic(i, x, b, &mut keyed(self.seed, i, self.t, Purpose::Gradient))
    }

    pub fn compress(&self, spec: &CompressorSpec, i: usize, v: &[f64]) -> Result<compression::CompressedMessage> {
        compression::compress(spec, v, &mut keyed(self.seed, i, self.t, Purpose::Compress))
    }
}

/// New states plus per-round by-products.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub states: Vec<NodeState>,
    pub grads: Vec<Vec<f64>>,
    /// Bits sent by all nodes this round.
    pub bits: u64,
    /// Largest `||C[v] − v||² / ||v||²` among this round's compressions.
    pub max_compress_ratio: f64,
}

fn collect<T>(v: Vec<Result<T>>) -> Result<Vec<T>> {
    v.into_iter().collect()
}

fn ratio(err2: f64, v2: f64) -> f64 {
    if v2 > 0.0 {
        err2 / v2
    } else {
        0.0
    }
}

struct Local {
    g: Vec<f64>,
    y: Vec<f64>,
    msg: Vec<f64>,
    ratio: f64,
}

/// One DeepSqueeze round.
///
/// `v = x − γg + δ`, `m = C[v]`, `δ' = v − m`, then
/// `x' = x − γg + η Σⱼ (Wᵢⱼ − Iᵢⱼ) mⱼ` with the self term using the node's own
/// compressed message.
pub fn step_deepsqueeze(
    states: &[NodeState],
    w: &MixingMatrix,
    eta: f64,
    compressor: &CompressorSpec,
    round: &Round,
) -> Result<StepOutput> {
    let n = states.len();
    let locals = collect(round.exec.map(n, |i| {
        let s = &states[i];
        let g = round.gradient(i, &s.x)?;
        let mut y = s.x.clone();
        axpy(-round.gamma, &g, &mut y);
        let v: Vec<f64> = y.iter().zip(&s.delta).map(|(a, b)| a + b).collect();
        let m = round.compress(compressor, i, &v)?;
        let r = ratio(dist2_sq(&m.decoded, &v), norm2_sq(&v));
        let delta: Vec<f64> = v.iter().zip(&m.decoded).map(|(a, b)| a - b).collect();
        Ok((Local { g, y, msg: m.decoded, ratio: r }, delta))
    }))?;
    let new = round.exec.map(n, |i| {
        let mut x = locals[i].0.y.clone();
        for j in w.neighbors(i) {
            let coef = w.get(i, j) - if i == j { 1.0 } else { 0.0 };
            if coef != 0.0 {
                axpy(eta * coef, &locals[j].0.msg, &mut x);
            }
        }
        NodeState { x, delta: locals[i].1.clone(), hat: states[i].hat.clone() }
    });
    let d = states.first().map_or(0, |s| s.x.len());
    Ok(StepOutput {
        bits: n as u64 * message_bits(compressor, d),
        max_compress_ratio: locals.iter().map(|l| l.0.ratio).fold(0.0, f64::max),
        grads: locals.into_iter().map(|l| l.0.g).collect(),
        states: new,
    })
}

#[inline]
fn w_eff(w: &MixingMatrix, eta: f64, i: usize, j: usize) -> f64 {
    eta * w.get(i, j) + if i == j { 1.0 - eta } else { 0.0 }
}

/// One D-PSGD round: `xᵢ' = Σⱼ (W_eff)ᵢⱼ (xⱼ − γgⱼ)` with exact vectors.
pub fn step_dpsgd(states: &[NodeState], w: &MixingMatrix, eta: f64, round: &Round) -> Result<StepOutput> {
    let n = states.len();
    let locals = collect(round.exec.map(n, |i| {
        let g = round.gradient(i, &states[i].x)?;
        let mut y = states[i].x.clone();
        axpy(-round.gamma, &g, &mut y);
        Ok((g, y))
    }))?;
    let d = states.first().map_or(0, |s| s.x.len());
    let new = round.exec.map(n, |i| {
        let mut x = vec![0.0; d];
        for j in 0..n {
            let c = w_eff(w, eta, i, j);
            if c != 0.0 {
                axpy(c, &locals[j].1, &mut x);
            }
        }
        NodeState { x, delta: states[i].delta.clone(), hat: states[i].hat.clone() }
    });
    Ok(StepOutput {
        bits: n as u64 * FLOAT_BITS * d as u64,
        max_compress_ratio: 0.0,
        grads: locals.into_iter().map(|l| l.0).collect(),
        states: new,
    })
}

/// Shared local phase of the replica-based baselines: `y = x − γg`,
/// `q = C[y − x̂]`, `x̂ ← x̂ + q`.
fn replica_local(states: &[NodeState], compressor: &CompressorSpec, round: &Round) -> Result<Vec<(Local, Vec<f64>)>> {
    collect(round.exec.map(states.len(), |i| {
        let s = &states[i];
        let g = round.gradient(i, &s.x)?;
        let mut y = s.x.clone();
        axpy(-round.gamma, &g, &mut y);
        let diff = linalg::sub(&y, &s.hat);
        let q = round.compress(compressor, i, &diff)?;
        let r = ratio(dist2_sq(&q.decoded, &diff), norm2_sq(&diff));
        let mut hat = s.hat.clone();
        axpy(1.0, &q.decoded, &mut hat);
        Ok((Local { g, y, msg: q.decoded, ratio: r }, hat))
    }))
}

fn replica_step(
    states: &[NodeState],
    w: &MixingMatrix,
    eta: f64,
    compressor: &CompressorSpec,
    round: &Round,
    keep_local: bool,
) -> Result<StepOutput> {
    let n = states.len();
    let locals = replica_local(states, compressor, round)?;
    let new = round.exec.map(n, |i| {
        let hat_i = &locals[i].1;
        let mut x = if keep_local { locals[i].0.y.clone() } else { hat_i.clone() };
        for j in w.neighbors(i) {
            if j != i {
                let diff = linalg::sub(&locals[j].1, hat_i);
                axpy(eta * w.get(i, j), &diff, &mut x);
            }
        }
        NodeState { x, delta: states[i].delta.clone(), hat: hat_i.clone() }
    });
    let d = states.first().map_or(0, |s| s.x.len());
    Ok(StepOutput {
        bits: n as u64 * message_bits(compressor, d),
        max_compress_ratio: locals.iter().map(|l| l.0.ratio).fold(0.0, f64::max),
        grads: locals.into_iter().map(|l| l.0.g).collect(),
        states: new,
    })
}

/// One DCD-PSGD round.
///
/// Each node descends locally, sends the compressed difference between its new model
/// and its public replica, and then adopts the gossip average of the updated replicas:
/// `xᵢ' = x̂ᵢ + η Σⱼ Wᵢⱼ (x̂ⱼ − x̂ᵢ)`. The uncompressed half-step is discarded, so
/// compression error is never fed back.
pub fn step_dcd_psgd(
    states: &[NodeState],
    w: &MixingMatrix,
    eta: f64,
    compressor: &CompressorSpec,
    round: &Round,
) -> Result<StepOutput> {
    replica_step(states, w, eta, compressor, round, false)
}

/// One CHOCO-SGD round: `y = x − γg`, `q = C[y − x̂]`, `x̂ ← x̂ + q`,
/// `x' = y + η Σⱼ Wᵢⱼ (x̂ⱼ − x̂ᵢ)`.
pub fn step_choco_sgd(
    states: &[NodeState],
    w: &MixingMatrix,
    eta: f64,
    compressor: &CompressorSpec,
    round: &Round,
) -> Result<StepOutput> {
    replica_step(states, w, eta, compressor, round, true)
}

/// One AllReduce round: every node adopts `x̄ − (γ/n) Σᵢ gᵢ`.
pub fn step_central(states: &[NodeState], round: &Round) -> Result<StepOutput> {
    let n = states.len();
    let grads = collect(round.exec.map(n, |i| round.gradient(i, &states[i].x)))?;
    let xs: Vec<Vec<f64>> = states.iter().map(|s| s.x.clone()).collect();
    let mut x = linalg::mean(&xs);
    axpy(-round.gamma, &linalg::mean(&grads), &mut x);
    let d = x.len();
    let new = states
        .iter()
        .map(|s| NodeState { x: x.clone(), delta: s.delta.clone(), hat: s.hat.clone() })
        .collect();
    Ok(StepOutput { bits: n as u64 * FLOAT_BITS * d as u64, max_compress_ratio: 0.0, grads, states: new })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged { t: usize },
}

/// Stacked `d x n` snapshots of a run.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    /// `X_0 ..= X_T`
    pub xs: Vec<DMatrix<f64>>,
    /// `G_0 .. G_{T-1}`
    pub grads: Vec<DMatrix<f64>>,
    /// `Δ_0 .. Δ_{T-1}`
    pub deltas: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trace: Trace,
    pub status: RunStatus,
    pub final_states: Vec<NodeState>,
    pub artifacts: Option<Artifacts>,
    /// `max_t ||x̄_{t+1} − (x̄_t − γ_t ḡ_t)||∞`
    pub max_mean_law_dev: f64,
    /// Largest compression ratio observed along the run.
    pub max_compress_ratio: f64,
}

pub(crate) fn record(problem: &ProblemSpec, t: usize, xs: &[Vec<f64>], deltas: &[Vec<f64>], bits_cum: u64) -> TraceRecord {
    let xbar = linalg::mean(xs);
    TraceRecord {
        t,
        loss: problem.loss(&xbar),
        grad_norm2: norm2_sq(&problem.grad(&xbar)),
        consensus2: linalg::consensus_sq(xs),
        delta_mass: deltas.iter().map(|d| norm2_sq(d)).sum(),
        bits_cum,
    }
}

pub(crate) fn should_record(t: usize, every: usize, total: usize) -> bool {
    t == 0 || t == total || t % every == 0
}

/// Executes `config.iterations` synchronized rounds from `X_0 = 0`.
///
/// Divergence is a recorded outcome: the trace up to the last finite state is kept and
/// `status` says where it stopped.
pub fn run(config: &RunConfig, problem: &ProblemSpec) -> Result<RunOutput> {
    config.validate()?;
    let n = problem.n_nodes();
    let d = problem.dim();
    if config.algorithm.uses_compressor() {
        config.compressor.validate(d)?;
    }
    for i in 0..n {
        let b = config.batch_for(problem, i);
        if b < 1 || b > problem.rows(i) {
            return Err(Error::Parameter(format!("batch size {b} outside [1, {}] for node {i}", problem.rows(i))));
        }
    }
    let w = if config.algorithm == Algorithm::CentralSgd {
        crate::topology::build_complete(n)?
    } else {
        config.topology.build(n)?
    };
    let mut states = initial_states(problem);
    let tracks_delta = config.algorithm == Algorithm::DeepSqueeze;
    let mut trace = Trace::default();
    let mut bits_cum = 0u64;
    let mut artifacts = config.record_artifacts.then(Artifacts::default);
    let mut max_dev = 0.0f64;
    let mut max_ratio = 0.0f64;
    let mut status = RunStatus::Ok;

    let snapshot = |states: &[NodeState]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (states.iter().map(|s| s.x.clone()).collect(), states.iter().map(|s| s.delta.clone()).collect())
    };
    let (xs, ds) = snapshot(&states);
    trace.records.push(record(problem, 0, &xs, &ds, 0));
    if let Some(a) = artifacts.as_mut() {
        a.xs.push(linalg::stack_columns(&xs));
    }

    for t in 0..config.iterations {
        let gamma = config.gamma_at(t);
        let round = Round { problem, t, seed: config.seed, gamma, batch_size: config.batch_size, exec: config.exec };
        let out = match config.algorithm {
            Algorithm::DeepSqueeze => step_deepsqueeze(&states, &w, config.eta, &config.compressor, &round),
            Algorithm::DPSGD => step_dpsgd(&states, &w, config.eta, &round),
            Algorithm::DCDPSGD => step_dcd_psgd(&states, &w, config.eta, &config.compressor, &round),
            Algorithm::ChocoSgd => step_choco_sgd(&states, &w, config.eta, &config.compressor, &round),
            Algorithm::CentralSgd => step_central(&states, &round),
        };
        let out = match out {
            Ok(o) => o,
            Err(Error::Numeric(_)) => {
                status = RunStatus::Diverged { t: t + 1 };
                break;
            }
            Err(e) => return Err(e),
        };
        if !out.states.iter().all(NodeState::is_sane) {
            status = RunStatus::Diverged { t: t + 1 };
            break;
        }
        let old_mean = linalg::mean(&states.iter().map(|s| s.x.clone()).collect::<Vec<_>>());
        let (xs, ds) = snapshot(&out.states);
        let new_mean = linalg::mean(&xs);
        let gbar = linalg::mean(&out.grads);
        let dev = (0..d)
            .map(|k| (new_mean[k] - (old_mean[k] - gamma * gbar[k])).abs())
            .fold(0.0, f64::max);
        max_dev = max_dev.max(dev);
        max_ratio = max_ratio.max(out.max_compress_ratio);
        bits_cum += out.bits;
        if let Some(a) = artifacts.as_mut() {
            a.grads.push(linalg::stack_columns(&out.grads));
            a.deltas.push(if tracks_delta { linalg::stack_columns(&ds) } else { DMatrix::zeros(d, n) });
            a.xs.push(linalg::stack_columns(&xs));
        }
        states = out.states;
        if should_record(t + 1, config.eval_every, config.iterations) {
            trace.records.push(record(problem, t + 1, &xs, &ds, bits_cum));
        }
    }

    Ok(RunOutput {
        trace,
        status,
        final_states: states,
        artifacts,
        max_mean_law_dev: max_dev,
        max_compress_ratio: max_ratio,
    })
}
