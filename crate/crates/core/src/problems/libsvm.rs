//! LIBSVM text ingestion and row partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, Purpose};

/// Dense rows with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn load_libsvm(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_libsvm(&fs::read_to_string(path)?)
}

/// Parses `label idx:val idx:val ...` lines. Indices are 1-based; the dimension is the
/// largest index seen. Text after `#` is ignored.
pub fn parse_libsvm(text: &str) -> Result<Dataset> {
    let mut sparse: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: lineno + 1, msg };
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok.parse().map_err(|_| err(format!("bad label `{label_tok}`")))?;
        let mut feats = Vec::new();
        for tok in tokens {
            let (i, v) = tok.split_once(':').ok_or_else(|| err(format!("expected idx:val, got `{tok}`")))?;
            let idx: usize = i.parse().map_err(|_| err(format!("bad index `{i}`")))?;
            if idx == 0 {
                return Err(err("feature indices are 1-based".into()));
            }
            let val: f64 = v.parse().map_err(|_| err(format!("bad value `{v}`")))?;
            dim = dim.max(idx);
            feats.push((idx - 1, val));
        }
        labels.push(label);
        sparse.push(feats);
    }
    if sparse.is_empty() {
        return Err(Error::Parse { line: 0, msg: "no data rows".into() });
    }
    let rows = sparse
        .into_iter()
        .map(|feats| {
            let mut row = vec![0.0; dim];
            for (i, v) in feats {
                row[i] = v;
            }
            row
        })
        .collect();
    Ok(Dataset { rows, labels, dim })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    /// Uniform random balanced split (low outer variance).
    Shuffled,
    /// Contiguous split of label-sorted rows (high outer variance).
    LabelSorted,
}

/// Splits row indices across nodes; sizes differ by at most one.
pub fn partition(
    data: &Dataset,
    n_nodes: usize,
    strategy: PartitionStrategy,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let rows = data.len();
    if n_nodes == 0 || n_nodes > rows {
        return Err(Error::Parameter(format!("cannot split {rows} rows across {n_nodes} nodes")));
    }
    let mut order: Vec<usize> = (0..rows).collect();
    match strategy {
        PartitionStrategy::Shuffled => order.shuffle(&mut seeded(seed, Purpose::Partition)),
        PartitionStrategy::LabelSorted => {
            order.sort_by(|&a, &b| data.labels[a].total_cmp(&data.labels[b]).then(a.cmp(&b)))
        }
    }
    let base = rows / n_nodes;
    let extra = rows % n_nodes;
    let mut parts = Vec::with_capacity(n_nodes);
    let mut start = 0;
    for i in 0..n_nodes {
        let len = base + usize::from(i < extra);
        parts.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(parts)
}

/// Two Gaussian classes separated along a random unit direction, labels ±1 alternating.
pub fn synth_two_class(rows: usize, dim: usize, separation: f64, seed: u64) -> Dataset {
    let mut rng = seeded(seed, Purpose::Data);
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let nrm = crate::linalg::norm2(&dir).max(f64::MIN_POSITIVE);
    dir.iter_mut().for_each(|v| *v /= nrm);
    let mut out_rows = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for r in 0..rows {
        let y = if r % 2 == 0 { 1.0 } else { -1.0 };
        let row: Vec<f64> = dir
            .iter()
            .map(|u| rng.sample::<f64, _>(StandardNormal) + y * separation * u)
            .collect();
        out_rows.push(row);
        labels.push(y);
    }
    Dataset { rows: out_rows, labels, dim }
}
