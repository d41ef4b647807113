//! Compression operators with exact wire payloads and bit accounting.
//!
//! The operator output is always `decode(payload)`: whatever a receiver can
//! reconstruct is what the sender's error memory must be measured against.
//!
//! Payload layouts (all multi-byte fields big-endian, bit fields packed MSB-first):
//!
//! * `BitQuant`: `[norm: f32][d level indices of b bits each]`, zero-padded to a byte.
//! * `TopK` / `RandK`: `[32-bit zero placeholder][k x (index: ceil(log2 d) bits, value: f32)]`,
//!   entries in ascending index order, zero-padded to a byte.
//! * `Identity`: `d x f64`. Bit accounting charges the 32-bit dense baseline, so for this
//!   kind `bit_size` is the accounted size rather than `8 * payload.len()`.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dist2_sq, norm2, norm2_sq};

/// Width of a dense float on the wire, for savings accounting.
pub const FLOAT_BITS: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressorKind {
    Identity,
    TopK,
    RandK,
    BitQuant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressorSpec {
    pub kind: CompressorKind,
    /// Kept coordinates (TopK / RandK).
    pub k: usize,
    /// Bits per element (BitQuant).
    pub bits: u32,
    /// Known bound on `α²`, when one is available analytically.
    pub analytic_alpha2: Option<f64>,
}

impl CompressorSpec {
    pub fn identity() -> Self {
        CompressorSpec { kind: CompressorKind::Identity, k: 0, bits: 0, analytic_alpha2: Some(0.0) }
    }

    pub fn top_k(k: usize) -> Self {
        CompressorSpec { kind: CompressorKind::TopK, k, bits: 0, analytic_alpha2: None }
    }

    pub fn rand_k(k: usize) -> Self {
        CompressorSpec { kind: CompressorKind::RandK, k, bits: 0, analytic_alpha2: None }
    }

    pub fn bit_quant(bits: u32) -> Self {
        CompressorSpec { kind: CompressorKind::BitQuant, k: 0, bits, analytic_alpha2: None }
    }

    /// `RandK` consumes randomness; everything else is a deterministic map.
    pub fn is_deterministic(&self) -> bool {
        self.kind != CompressorKind::RandK
    }

    /// Known `α²` bound at dimension `d`, if any.
    pub fn alpha2_bound(&self, d: usize) -> Option<f64> {
        self.analytic_alpha2.or(match self.kind {
            CompressorKind::Identity => Some(0.0),
            CompressorKind::TopK | CompressorKind::RandK if d > 0 => {
                Some(1.0 - self.k as f64 / d as f64)
            }
            _ => None,
        })
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self.kind {
            CompressorKind::Identity => {}
            CompressorKind::TopK | CompressorKind::RandK => {
                if self.k < 1 || self.k > d {
                    return Err(Error::Parameter(format!(
                        "k = {} must lie in [1, {d}] for dimension {d}",
                        self.k
                    )));
                }
            }
            CompressorKind::BitQuant => {
                if !(1..=16).contains(&self.bits) {
                    return Err(Error::Parameter(format!("bits = {} must lie in [1, 16]", self.bits)));
                }
            }
        }
        if let Some(a2) = self.analytic_alpha2 {
            if !(0.0..1.0).contains(&a2) {
                return Err(Error::Parameter(format!("analytic alpha^2 = {a2} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedMessage {
    pub payload: Vec<u8>,
    pub decoded: Vec<f64>,
    pub bit_size: u64,
}

fn index_bits(d: usize) -> u32 {
    if d <= 1 {
        0
    } else {
        usize::BITS - (d - 1).leading_zeros()
    }
}

/// Bits one message of `spec` occupies for a `d`-vector.
pub fn message_bits(spec: &CompressorSpec, d: usize) -> u64 {
    let d64 = d as u64;
    match spec.kind {
        CompressorKind::Identity => FLOAT_BITS * d64,
        CompressorKind::BitQuant => spec.bits as u64 * d64 + FLOAT_BITS,
        CompressorKind::TopK | CompressorKind::RandK => {
            spec.k as u64 * (FLOAT_BITS + index_bits(d) as u64) + FLOAT_BITS
        }
    }
}

pub fn compress<R: Rng + ?Sized>(spec: &CompressorSpec, x: &[f64], rng: &mut R) -> Result<CompressedMessage> {
    let d = x.len();
    spec.validate(d)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input to compressor".into()));
    }
    let payload = match spec.kind {
        CompressorKind::Identity => x.iter().flat_map(|v| v.to_be_bytes()).collect(),
        CompressorKind::TopK => encode_sparse(x, &top_k_indices(x, spec.k)),
        CompressorKind::RandK => {
            let mut idx = index::sample(rng, d, spec.k).into_vec();
            idx.sort_unstable();
            encode_sparse(x, &idx)
        }
        CompressorKind::BitQuant => encode_bitquant(x, spec.bits),
    };
    let decoded = decode(spec, d, &payload)?;
    Ok(CompressedMessage { payload, decoded, bit_size: message_bits(spec, d) })
}

/// Reconstructs the dense vector a receiver sees.
pub fn decode(spec: &CompressorSpec, d: usize, payload: &[u8]) -> Result<Vec<f64>> {
    let short = || Error::Numeric("payload too short".into());
    match spec.kind {
        CompressorKind::Identity => {
            if payload.len() != 8 * d {
                return Err(short());
            }
            Ok(payload
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
                .collect())
        }
        CompressorKind::TopK | CompressorKind::RandK => {
            let mut r = BitReader::new(payload);
            r.read(32).ok_or_else(short)?;
            let ib = index_bits(d);
            let mut out = vec![0.0; d];
            for _ in 0..spec.k {
                let i = r.read(ib).ok_or_else(short)? as usize;
                let v = f32::from_bits(r.read(32).ok_or_else(short)? as u32);
                if i >= d {
                    return Err(Error::Numeric(format!("sparse index {i} out of range")));
                }
                out[i] = v as f64;
            }
            Ok(out)
        }
        CompressorKind::BitQuant => {
            let mut r = BitReader::new(payload);
            let norm = f32::from_bits(r.read(32).ok_or_else(short)? as u32) as f64;
            let q = (0..d)
                .map(|_| r.read(spec.bits).map(|j| level(j, spec.bits)))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(short)?;
            Ok(rescale(q, norm))
        }
    }
}

/// Indices of the `k` largest magnitudes; ties go to the lower index. Returned ascending.
pub fn top_k_indices(x: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

fn encode_sparse(x: &[f64], idx: &[usize]) -> Vec<u8> {
    let ib = index_bits(x.len());
    let mut w = BitWriter::default();
    w.write(0, 32);
    for &i in idx {
        w.write(i as u64, ib);
        w.write((x[i] as f32).to_bits() as u64, 32);
    }
    w.finish()
}

#[inline]
fn level(j: u64, bits: u32) -> f64 {
    let top = ((1u64 << bits) - 1) as f64;
    -1.0 + 2.0 * j as f64 / top
}

/// Level index for `u ∈ [-1, 1]`: nearest level, ties toward the level nearer zero.
fn level_index(u: f64, bits: u32) -> u64 {
    let top = (1u64 << bits) - 1;
    let t = (u + 1.0) * top as f64 / 2.0;
    let lo = t.floor();
    let frac = t - lo;
    let lo = lo as u64;
    let j = if frac > 0.5 {
        lo + 1
    } else if frac < 0.5 || lo >= top {
        lo
    } else if level(lo + 1, bits).abs() < level(lo, bits).abs() {
        lo + 1
    } else {
        // equal magnitude only at u = 0; keep the lower level
        lo
    };
    j.min(top)
}

fn quantize_levels(x: &[f64], bits: u32) -> Vec<u64> {
    let s = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if s == 0.0 {
        // an all-zero vector has no scale; its indices are irrelevant after rescaling
        return vec![level_index(0.0, bits); x.len()];
    }
    x.iter().map(|v| level_index(v / s, bits)).collect()
}

fn rescale(mut q: Vec<f64>, norm: f64) -> Vec<f64> {
    let qn = norm2(&q);
    if qn == 0.0 || norm == 0.0 {
        q.iter_mut().for_each(|v| *v = 0.0);
        return q;
    }
    let scale = norm / qn;
    q.iter_mut().for_each(|v| *v *= scale);
    q
}

fn encode_bitquant(x: &[f64], bits: u32) -> Vec<u8> {
    let mut w = BitWriter::default();
    w.write((norm2(x) as f32).to_bits() as u64, 32);
    for j in quantize_levels(x, bits) {
        w.write(j, bits);
    }
    w.finish()
}

/// Norm-preserving uniform quantizer in exact arithmetic.
///
/// Scales by the max magnitude, rounds each coordinate to one of `2^b` uniform signed
/// levels and rescales the result to the Euclidean norm of `x`. The wire form differs
/// only in carrying the norm as an `f32`.
pub fn bit_quantize(x: &[f64], bits: u32) -> Result<Vec<f64>> {
    if bits < 1 {
        return Err(Error::Parameter("bit quantizer needs at least 1 bit".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input to bit quantizer".into()));
    }
    let q = quantize_levels(x, bits).into_iter().map(|j| level(j, bits)).collect();
    Ok(rescale(q, norm2(x)))
}

/// Mean and max of `||C[x] - x||² / ||x||²` over standard-normal draws.
pub fn empirical_alpha<R: Rng + ?Sized>(
    spec: &CompressorSpec,
    d: usize,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if samples < 1 {
        return Err(Error::Parameter("empirical_alpha needs at least one sample".into()));
    }
    spec.validate(d)?;
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for _ in 0..samples {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let m = compress(spec, &x, rng)?;
        let r = dist2_sq(&m.decoded, &x) / norm2_sq(&x);
        sum += r;
        max = max.max(r);
    }
    Ok((sum / samples as f64, max))
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    n: u32,
}

impl BitWriter {
    fn write(&mut self, value: u64, bits: u32) {
        for b in (0..bits).rev() {
            self.acc = (self.acc << 1) | ((value >> b) & 1);
            self.n += 1;
            if self.n == 8 {
                self.bytes.push(self.acc as u8);
                self.acc = 0;
                self.n = 0;
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            self.bytes.push((self.acc << (8 - self.n)) as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    fn read(&mut self, bits: u32) -> Option<u64> {
        let mut v = 0u64;
        for _ in 0..bits {
            let byte = *self.bytes.get(self.pos / 8)?;
            let bit = (byte >> (7 - self.pos % 8)) & 1;
            v = (v << 1) | bit as u64;
            self.pos += 1;
        }
        Some(v)
    }
}
