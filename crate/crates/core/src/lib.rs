//! Deterministic simulation of error-compensated decentralized SGD (DeepSqueeze)
//! and its baselines: D-PSGD, DCD-PSGD, CHOCO-SGD and centralized AllReduce SGD.
//!
//! The crate is organised by concern:
//!
//! * [`topology`]: mixing matrices, validation and spectra.
//! * [`compression`]: compression operators, exact payload encodings and bit accounting.
//! * [`problems`]: local objectives, data ingestion and measured problem constants.
//! * [`engine`]: per-node state machines driven in synchronized rounds.
//! * [`oracle`]: an independent global-matrix replay used to certify engine runs.
//! * [`theory`]: convergence constants, step-size schedules and pathwise lemma monitors.
//!
//! Every random draw is keyed by `(seed, node, iteration, purpose)` (see [`rng`]), so a
//! run is bit-reproducible regardless of how per-node work is scheduled.

pub mod compression;
pub mod desk;
pub mod engine;
mod error;
pub mod exec;
pub mod linalg;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod theory;
pub mod topology;
pub mod trace;

pub use compression::{CompressedMessage, CompressorKind, CompressorSpec};
pub use engine::{Algorithm, NodeState, RunConfig, RunOutput, RunStatus};
pub use error::{Error, Result};
pub use exec::Exec;
pub use problems::{ProblemConstants, ProblemKind, ProblemSpec};
pub use theory::TheoryConstants;
pub use topology::{MixingMatrix, SpectralInfo, TopologySpec};
pub use trace::{Trace, TraceRecord};
