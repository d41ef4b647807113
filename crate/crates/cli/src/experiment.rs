//! Running (algorithm, gamma, seed) cells and persisting their outputs.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use deepsqueeze::rng::{seeded, Purpose};
use deepsqueeze::theory::{self, eta_star};
use deepsqueeze::{
    desk, engine, Algorithm, CompressorSpec, Exec, ProblemConstants, ProblemSpec, RunConfig, RunStatus,
    TheoryConstants, Trace, TraceRecord,
};
use serde::Serialize;

use crate::config::{EtaSetting, ExperimentConfig};
use crate::error::{io_err, CliError, Result};

/// Probe points used for the measured problem constants in the manifest.
const PROBES: usize = 8;

#[derive(Clone, Debug)]
pub struct Cell {
    pub block: usize,
    pub run: RunConfig,
    pub alpha2_hat: f64,
}

impl Cell {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.csv", self.run.algorithm.name(), self.run.gamma, self.run.seed)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CellRecord {
    pub block: usize,
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub eta: f64,
    pub seed: u64,
    pub csv: String,
    #[serde(flatten)]
    pub status: RunStatus,
    #[serde(rename = "final")]
    pub last: Option<TraceRecord>,
    pub alpha2_hat: f64,
    pub max_compress_ratio: f64,
    pub max_mean_law_dev: f64,
    pub theory: TheoryEntry,
    #[serde(skip)]
    pub trace: Trace,
}

#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum TheoryEntry {
    Constants {
        #[serde(flatten)]
        constants: TheoryConstants,
        remainder_one_over_t: f64,
        remainder_with_c2: f64,
    },
    Unavailable {
        error: String,
    },
}

#[derive(Serialize)]
struct Epochs {
    /// `ceil(m_i / batch)` rounds per epoch for each node, per algorithm block.
    rounds_per_epoch: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    problem_constants: &'a ProblemConstants,
    topology_spectrum: &'a deepsqueeze::SpectralInfo,
    epochs: Epochs,
    cells: &'a [CellRecord],
    timestamp_unix: u64,
}

pub struct Outcome {
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
    pub outdir: PathBuf,
}

impl Outcome {
    pub fn any_diverged(&self) -> bool {
        self.cells.iter().any(|c| c.status != RunStatus::Ok)
    }
}

pub fn resolve_outdir(cli: Option<&Path>, cfg: &ExperimentConfig, base: &Path) -> PathBuf {
    match (cli, &cfg.outdir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => base.join(p),
        (None, None) => PathBuf::from("out"),
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn compressor_for(cfg: &ExperimentConfig, block: usize) -> CompressorSpec {
    cfg.algorithms[block].compressor.unwrap_or(cfg.compressor).spec()
}

pub fn build_cells(cfg: &ExperimentConfig, problem: &ProblemSpec) -> Result<Vec<Cell>> {
    let d = problem.dim();
    let mut cells = Vec::new();
    let mut names = HashSet::new();
    for (b, block) in cfg.algorithms.iter().enumerate() {
        let comp = compressor_for(cfg, b);
        comp.validate(d)?;
        let alpha2_hat = if block.name.uses_compressor() { desk::calibrated_alpha2(&comp, d)? } else { 0.0 };
        let eta = match block.eta {
            EtaSetting::Value(v) => v,
            EtaSetting::Auto(_) => eta_star(alpha2_hat.sqrt()).map_err(|e| {
                CliError::Config(format!("algorithm[{b}]: cannot choose eta automatically: {e}"))
            })?,
        };
        for &gamma in &block.gamma {
            for &seed in &block.seeds {
                let mut run = RunConfig::new(block.name, gamma, eta, block.iterations);
                run.batch_size = block.batch_size;
                run.seed = seed;
                run.topology = cfg.topology.clone();
                run.compressor = comp;
                run.eval_every = block.eval_every;
                run.lr_decay = cfg.lr_decay;
                // cells already run concurrently
                run.exec = Exec::Sequential;
                run.validate()?;
                let cell = Cell { block: b, run, alpha2_hat };
                if !names.insert(cell.file_name()) {
                    return Err(CliError::Config(format!("two cells would both write {}", cell.file_name())));
                }
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

fn theory_entry(cell: &Cell, spectral: &deepsqueeze::SpectralInfo, l: f64) -> TheoryEntry {
    match theory::constants(cell.alpha2_hat, cell.run.eta, spectral, l, cell.run.gamma) {
        Ok(c) => {
            let (a, b) = theory::corollary_remainders(c.C2, cell.run.iterations);
            TheoryEntry::Constants { constants: c, remainder_one_over_t: a, remainder_with_c2: b }
        }
        Err(e) => TheoryEntry::Unavailable { error: e.to_string() },
    }
}

/// Runs every cell, writes one trace CSV per cell and `manifest.json`.
pub fn run_experiment(cfg: ExperimentConfig, base: &Path, outdir: &Path) -> Result<Outcome> {
    let problem = cfg.problem.build(base)?;
    let constants = problem.constants(PROBES, &mut seeded(0, Purpose::Probe));
    let w = cfg.topology.build(problem.n_nodes())?;
    let spectral = w.spectral()?;
    let cells = build_cells(&cfg, &problem)?;
    fs::create_dir_all(outdir).map_err(io_err(outdir))?;

    let outputs = Exec::default().map(cells.len(), |i| engine::run(&cells[i].run, &problem));
    let mut records = Vec::with_capacity(cells.len());
    for (cell, out) in cells.iter().zip(outputs) {
        let out = out?;
        let name = cell.file_name();
        write_atomic(&outdir.join(&name), out.trace.to_csv().as_bytes())?;
        records.push(CellRecord {
            block: cell.block,
            algorithm: cell.run.algorithm,
            gamma: cell.run.gamma,
            eta: cell.run.eta,
            seed: cell.run.seed,
            csv: name,
            status: out.status.clone(),
            last: out.trace.last().cloned(),
            alpha2_hat: cell.alpha2_hat,
            max_compress_ratio: out.max_compress_ratio,
            max_mean_law_dev: out.max_mean_law_dev,
            theory: theory_entry(cell, &spectral, constants.l),
            trace: out.trace,
        });
    }

    let rounds_per_epoch = cfg
        .algorithms
        .iter()
        .map(|b| {
            (0..problem.n_nodes())
                .map(|i| {
                    let m = problem.rows(i);
                    m.div_ceil(b.batch_size.unwrap_or(m).max(1))
                })
                .collect()
        })
        .collect();
    let manifest = Manifest {
        config: &cfg,
        problem_constants: &constants,
        topology_spectrum: &spectral,
        epochs: Epochs { rounds_per_epoch },
        cells: &records,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    write_atomic(&outdir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(Outcome { config: cfg, cells: records, outdir: outdir.to_path_buf() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub algo: String,
    pub gamma: f64,
    pub final_loss: f64,
    pub iters_to_target: Option<f64>,
    pub bits_to_target: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per algorithm block, the gamma with the best seed-averaged final loss. Diverged cells
/// count as infinite loss; target columns are filled only if every seed reaches the target.
pub fn compare(outcome: &Outcome) -> Vec<ComparisonRow> {
    let target = outcome.config.target_loss;
    outcome
        .config
        .algorithms
        .iter()
        .enumerate()
        .map(|(b, block)| {
            let mut best: Option<ComparisonRow> = None;
            for &gamma in &block.gamma {
                let cells: Vec<&CellRecord> =
                    outcome.cells.iter().filter(|c| c.block == b && c.gamma == gamma).collect();
                let finals: Vec<f64> = cells
                    .iter()
                    .map(|c| match (&c.status, &c.last) {
                        (RunStatus::Ok, Some(r)) => r.loss,
                        _ => f64::INFINITY,
                    })
                    .collect();
                let hits: Option<Vec<&TraceRecord>> =
                    target.and_then(|t| cells.iter().map(|c| c.trace.iters_to_loss(t)).collect());
                let row = ComparisonRow {
                    algo: block.name.name().to_string(),
                    gamma,
                    final_loss: mean(&finals),
                    iters_to_target: hits.as_ref().map(|h| mean(&h.iter().map(|r| r.t as f64).collect::<Vec<_>>())),
                    bits_to_target: hits.as_ref().map(|h| mean(&h.iter().map(|r| r.bits_cum as f64).collect::<Vec<_>>())),
                };
                if best.as_ref().is_none_or(|b| row.final_loss < b.final_loss) {
                    best = Some(row);
                }
            }
            best.expect("validated: gamma grid is nonempty")
        })
        .collect()
}

pub fn write_comparison(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["algo", "gamma", "final_loss", "iters_to_target", "bits_to_target"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.algo.clone(),
            r.gamma.to_string(),
            r.final_loss.to_string(),
            opt(r.iters_to_target),
            opt(r.bits_to_target),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(format!("csv buffer: {e}")))?;
    write_atomic(path, &bytes)
}
