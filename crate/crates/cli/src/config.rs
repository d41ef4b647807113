//! TOML experiment description.

use std::fs;
use std::path::{Path, PathBuf};

use deepsqueeze::engine::LrDecay;
use deepsqueeze::problems::{load_libsvm, partition, synth_logistic, synth_quadratic, PartitionStrategy};
use deepsqueeze::{Algorithm, CompressorSpec, ProblemSpec, TopologySpec};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default = "ring")]
    pub topology: TopologySpec,
    #[serde(default)]
    pub compressor: CompressorConfig,
    #[serde(rename = "algorithm")]
    pub algorithms: Vec<AlgorithmBlock>,
    #[serde(default)]
    pub outdir: Option<PathBuf>,
    #[serde(default)]
    pub lr_decay: Option<LrDecay>,
    /// Loss threshold for `iters_to_target` / `bits_to_target` in comparisons.
    #[serde(default)]
    pub target_loss: Option<f64>,
}

fn ring() -> TopologySpec {
    TopologySpec::Ring
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemConfig {
    Quadratic {
        nodes: usize,
        dim: usize,
        rows_per_node: usize,
        #[serde(default)]
        heterogeneity: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        noise_sigma: f64,
    },
    Logistic {
        nodes: usize,
        /// LIBSVM file, relative to the config file. Synthetic two-class data otherwise.
        #[serde(default)]
        libsvm: Option<PathBuf>,
        #[serde(default)]
        dim: Option<usize>,
        #[serde(default)]
        rows_per_node: Option<usize>,
        #[serde(default = "one")]
        separation: f64,
        #[serde(default = "label_sorted")]
        partition: PartitionStrategy,
        #[serde(default = "default_l2")]
        l2: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        noise_sigma: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn label_sorted() -> PartitionStrategy {
    PartitionStrategy::LabelSorted
}

fn default_l2() -> f64 {
    1e-3
}

impl ProblemConfig {
    pub fn build(&self, base: &Path) -> Result<ProblemSpec> {
        let p = match self {
            ProblemConfig::Quadratic { nodes, dim, rows_per_node, heterogeneity, seed, noise_sigma } => {
                synth_quadratic(*nodes, *dim, *rows_per_node, *heterogeneity, *seed)?.with_noise(*noise_sigma)
            }
            ProblemConfig::Logistic {
                nodes,
                libsvm,
                dim,
                rows_per_node,
                separation,
                partition: strategy,
                l2,
                seed,
                noise_sigma,
            } => match libsvm {
                Some(path) => {
                    let data = load_libsvm(base.join(path))?;
                    let parts = partition(&data, *nodes, *strategy, *seed)?;
                    ProblemSpec::logistic_from_dataset(&data, &parts, *l2)?.with_noise(*noise_sigma)
                }
                None => {
                    let (Some(d), Some(m)) = (dim, rows_per_node) else {
                        return Err(CliError::Config(
                            "synthetic logistic problems need `dim` and `rows_per_node`".into(),
                        ));
                    };
                    synth_logistic(*nodes, *d, *m, *separation, *strategy, *l2, *seed)?.with_noise(*noise_sigma)
                }
            },
        };
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CompressorConfig {
    #[default]
    Identity,
    Topk {
        k: usize,
    },
    Randk {
        k: usize,
    },
    Bitquant {
        bits: u32,
    },
}

impl CompressorConfig {
    pub fn spec(self) -> CompressorSpec {
        match self {
            CompressorConfig::Identity => CompressorSpec::identity(),
            CompressorConfig::Topk { k } => CompressorSpec::top_k(k),
            CompressorConfig::Randk { k } => CompressorSpec::rand_k(k),
            CompressorConfig::Bitquant { bits } => CompressorSpec::bit_quant(bits),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Auto {
    Auto,
}

/// Either a number or `"auto"`, which picks the largest admissible rate for the
/// calibrated compression ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSetting {
    Value(f64),
    Auto(Auto),
}

fn auto() -> EtaSetting {
    EtaSetting::Auto(Auto::Auto)
}

fn zero_seed() -> Vec<u64> {
    vec![0]
}

fn every_step() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmBlock {
    pub name: Algorithm,
    pub gamma: Vec<f64>,
    #[serde(default = "auto")]
    pub eta: EtaSetting,
    pub iterations: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "zero_seed")]
    pub seeds: Vec<u64>,
    #[serde(default = "every_step")]
    pub eval_every: usize,
    /// Overrides the top-level compressor for this block.
    #[serde(default)]
    pub compressor: Option<CompressorConfig>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|source| CliError::Parse { path: path.to_owned(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; returns it with the directory relative paths resolve against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg = Self::parse(&text, path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(CliError::Config("at least one [[algorithm]] block is required".into()));
        }
        for (i, b) in self.algorithms.iter().enumerate() {
            let name = b.name.name();
            if b.gamma.is_empty() {
                return Err(CliError::Config(format!("algorithm[{i}] ({name}): gamma grid is empty")));
            }
            if b.gamma.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
                return Err(CliError::Config(format!("algorithm[{i}] ({name}): gamma values must be positive")));
            }
            if b.seeds.is_empty() {
                return Err(CliError::Config(format!("algorithm[{i}] ({name}): seeds is empty")));
            }
            if b.iterations < 1 {
                return Err(CliError::Config(format!("algorithm[{i}] ({name}): iterations must be >= 1")));
            }
            if let EtaSetting::Value(v) = b.eta {
                if !(0.0..=1.0).contains(&v) {
                    return Err(CliError::Config(format!("algorithm[{i}] ({name}): eta = {v} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[problem]
kind = "quadratic"
nodes = 4
dim = 3
rows_per_node = 5

[[algorithm]]
name = "deepsqueeze"
gamma = [0.1]
iterations = 10
"#;

    #[test]
    fn minimal_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.topology, TopologySpec::Ring);
        assert_eq!(cfg.compressor, CompressorConfig::Identity);
        let b = &cfg.algorithms[0];
        assert_eq!(b.eta, EtaSetting::Auto(Auto::Auto));
        assert_eq!(b.seeds, vec![0]);
        assert_eq!(b.eval_every, 1);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = MINIMAL.replace("rows_per_node = 5", "rows_per_node = 5\nwidth = 2");
        let err = ExperimentConfig::parse(&text, Path::new("x.toml")).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
        let text = format!("{MINIMAL}\nbogus = 1\n");
        let err = ExperimentConfig::parse(&text, Path::new("x.toml")).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let text = MINIMAL.replace("iterations = 10", "iterations = 10\nmomentum = 0.9");
        let err = ExperimentConfig::parse(&text, Path::new("x.toml")).unwrap_err().to_string();
        assert!(err.contains("momentum"), "{err}");
    }

    #[test]
    fn eta_forms_and_blocks() {
        let text = MINIMAL.replace("iterations = 10", "iterations = 10\neta = 0.25\nseeds = [1, 2]")
            + "\n[compressor]\nkind = \"bitquant\"\nbits = 2\n\n[topology]\nkind = \"edges\"\nedges = [[0, 1], [1, 2], [2, 3]]\n\n[lr_decay]\nevery = 60\nfactor = 0.2\n";
        let cfg = ExperimentConfig::parse(&text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.algorithms[0].eta, EtaSetting::Value(0.25));
        assert_eq!(cfg.compressor.spec(), CompressorSpec::bit_quant(2));
        assert_eq!(cfg.lr_decay, Some(LrDecay { every: 60, factor: 0.2 }));
        assert!(matches!(cfg.topology, TopologySpec::Edges { .. }));
        let bad = MINIMAL.replace("iterations = 10", "iterations = 10\neta = \"fast\"");
        assert!(ExperimentConfig::parse(&bad, Path::new("x.toml")).is_err());
    }

    #[test]
    fn validation_rules() {
        let no_algo = "algorithm = []\n[problem]\nkind = \"quadratic\"\nnodes = 2\ndim = 2\nrows_per_node = 2\n";
        assert!(matches!(ExperimentConfig::parse(no_algo, Path::new("x")), Err(CliError::Config(_))));
        let empty_grid = MINIMAL.replace("gamma = [0.1]", "gamma = []");
        assert!(matches!(ExperimentConfig::parse(&empty_grid, Path::new("x")), Err(CliError::Config(_))));
        let no_seeds = MINIMAL.replace("iterations = 10", "iterations = 10\nseeds = []");
        assert!(matches!(ExperimentConfig::parse(&no_seeds, Path::new("x")), Err(CliError::Config(_))));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("x.toml")).unwrap();
        let back: ExperimentConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
