//! Update compressors and their wire-cost accounting.
//!
//! Deterministic compressors (TopK, grouped Sign, heavy-Sign) are biased but
//! q-deviate: `||C(x) - x||^2 <= q^2 ||x||^2` with `q^2` given by
//! [`deviation_bound`]. The stochastic quantizer is unbiased and carries no
//! such bound.
//!
//! Bit accounting, with full-precision scalars counted as 32 bits:
//!
//! | encoding            | bits                                       |
//! |---------------------|--------------------------------------------|
//! | dense               | `32 d`                                     |
//! | sparse values       | `(32 + ceil(log2 d)) nnz`                  |
//! | group scaled signs  | `32 M + support`                           |
//! | quantized levels    | `32 + (b + 1) nnz + ceil(log2 d) nnz`      |

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_space::{GroupLayout, ParamVector};

/// Bits charged for one full-precision scalar.
pub const FLOAT_BITS: u64 = 32;

/// Largest supported quantizer width; keeps `2^(b-1)` levels in range.
pub const MAX_QUANT_BITS: u32 = 31;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CompressorSpec {
    Identity,
    /// Keep the `max(1, floor(k d_i))` largest-magnitude entries of each group.
    TopK {
        k: f64,
    },
    /// Per group, the mean absolute value times the sign pattern.
    GroupedSign,
    /// TopK followed by grouped Sign on the survivors.
    HeavySign {
        k: f64,
    },
    /// Unbiased stochastic quantization with `b` bits per non-zero entry.
    StocQuant {
        bits: u32,
    },
}

impl CompressorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CompressorSpec::TopK { k } | CompressorSpec::HeavySign { k } => {
                if !(k > 0.0 && k <= 1.0) {
                    return Err(Error::config("k", format!("must lie in (0, 1], got {k}")));
                }
            }
            CompressorSpec::StocQuant { bits } => {
                if !(1..=MAX_QUANT_BITS).contains(&bits) {
                    return Err(Error::config(
                        "bits",
                        format!("must lie in [1, {MAX_QUANT_BITS}], got {bits}"),
                    ));
                }
            }
            CompressorSpec::Identity | CompressorSpec::GroupedSign => {}
        }
        Ok(())
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, CompressorSpec::StocQuant { .. })
    }
}

impl fmt::Display for CompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorSpec::Identity => write!(f, "identity"),
            CompressorSpec::TopK { k } => write!(f, "topk:{k}"),
            CompressorSpec::GroupedSign => write!(f, "sign"),
            CompressorSpec::HeavySign { k } => write!(f, "heavysign:{k}"),
            CompressorSpec::StocQuant { bits } => write!(f, "stoc:{bits}"),
        }
    }
}

impl FromStr for CompressorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let bad = |reason: String| Error::config("compressor", reason);
        let parse_k = |arg: Option<&str>| -> Result<f64> {
            let a = arg.ok_or_else(|| bad(format!("`{name}` needs a rate, e.g. `{name}:0.1`")))?;
            a.parse::<f64>().map_err(|_| bad(format!("invalid rate `{a}`")))
        };
        let spec = match name {
            "identity" | "none" | "full" => CompressorSpec::Identity,
            "topk" => CompressorSpec::TopK { k: parse_k(arg)? },
            "sign" => CompressorSpec::GroupedSign,
            "heavysign" | "heavy-sign" => CompressorSpec::HeavySign { k: parse_k(arg)? },
            "stoc" | "qsgd" => {
                let a = arg.ok_or_else(|| bad("`stoc` needs a bit width, e.g. `stoc:2`".into()))?;
                let bits = a.parse::<u32>().map_err(|_| bad(format!("invalid bit width `{a}`")))?;
                CompressorSpec::StocQuant { bits }
            }
            other => return Err(bad(format!("unknown compressor `{other}`"))),
        };
        if arg.is_some() && matches!(spec, CompressorSpec::Identity | CompressorSpec::GroupedSign) {
            return Err(bad(format!("`{name}` takes no parameter")));
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for CompressorSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CompressorSpec> for String {
    fn from(spec: CompressorSpec) -> String {
        spec.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(Vec<f64>),
    SparseValues {
        indices: Vec<usize>,
        values: Vec<f64>,
    },
    /// One scale per group plus the signs on the transmitted support.
    GroupScaledSigns {
        scales: Vec<f64>,
        indices: Vec<usize>,
        negative: Vec<bool>,
    },
    /// `value_j = norm * level_j / 2^(bits-1)`; the level carries the sign.
    QuantLevels {
        norm: f64,
        bits: u32,
        indices: Vec<usize>,
        levels: Vec<i64>,
    },
}

/// An encoded update together with its exact wire cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedUpdate {
    layout: Arc<GroupLayout>,
    payload: Payload,
    bit_cost: u64,
}

fn index_bits(d: usize) -> u64 {
    // ceil(log2 d), zero for d <= 1
    d.next_power_of_two().trailing_zeros() as u64
}

impl CompressedUpdate {
    /// Wraps a payload without validating it; [`CompressedUpdate::materialize`]
    /// rejects malformed encodings.
    pub fn new(layout: Arc<GroupLayout>, payload: Payload) -> Self {
        let d = layout.dim();
        let m = layout.num_groups() as u64;
        let bit_cost = match &payload {
            Payload::Dense(v) => FLOAT_BITS * v.len() as u64,
            Payload::SparseValues { indices, .. } => (FLOAT_BITS + index_bits(d)) * indices.len() as u64,
            Payload::GroupScaledSigns { indices, .. } => FLOAT_BITS * m + indices.len() as u64,
            Payload::QuantLevels { bits, indices, .. } => {
                let nnz = indices.len() as u64;
                FLOAT_BITS + (*bits as u64 + 1) * nnz + index_bits(d) * nnz
            }
        };
        Self {
            layout,
            payload,
            bit_cost,
        }
    }

    pub fn layout(&self) -> &Arc<GroupLayout> {
        &self.layout
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn bit_cost(&self) -> u64 {
        self.bit_cost
    }

    /// Number of explicitly transmitted coordinates.
    pub fn nnz(&self) -> usize {
        match &self.payload {
            Payload::Dense(v) => v.len(),
            Payload::SparseValues { indices, .. }
            | Payload::GroupScaledSigns { indices, .. }
            | Payload::QuantLevels { indices, .. } => indices.len(),
        }
    }

    fn check_indices(&self, indices: &[usize], payload_len: usize) -> Result<()> {
        if indices.len() != payload_len {
            return Err(Error::CorruptEncoding(format!(
                "{} indices but {} payload entries",
                indices.len(),
                payload_len
            )));
        }
        let d = self.layout.dim();
        let mut prev: Option<usize> = None;
        for &i in indices {
            if i >= d {
                return Err(Error::CorruptEncoding(format!("index {i} out of bounds for d={d}")));
            }
            if prev.is_some_and(|p| p >= i) {
                return Err(Error::CorruptEncoding(format!(
                    "indices not strictly increasing at {i}"
                )));
            }
            prev = Some(i);
        }
        Ok(())
    }

    /// The dense vector this encoding denotes.
    pub fn materialize(&self) -> Result<ParamVector> {
        let d = self.layout.dim();
        let mut out = vec![0.0; d];
        match &self.payload {
            Payload::Dense(v) => {
                if v.len() != d {
                    return Err(Error::CorruptEncoding(format!(
                        "dense payload has {} entries, layout has {d}",
                        v.len()
                    )));
                }
                out.copy_from_slice(v);
            }
            Payload::SparseValues { indices, values } => {
                self.check_indices(indices, values.len())?;
                for (&i, &v) in indices.iter().zip(values) {
                    out[i] = v;
                }
            }
            Payload::GroupScaledSigns {
                scales,
                indices,
                negative,
            } => {
                if scales.len() != self.layout.num_groups() {
                    return Err(Error::CorruptEncoding(format!(
                        "{} scales for {} groups",
                        scales.len(),
                        self.layout.num_groups()
                    )));
                }
                self.check_indices(indices, negative.len())?;
                for (&i, &neg) in indices.iter().zip(negative) {
                    let g = self.layout.group_of(i).expect("index checked above");
                    out[i] = if neg { -scales[g] } else { scales[g] };
                }
            }
            Payload::QuantLevels {
                norm,
                bits,
                indices,
                levels,
            } => {
                self.check_indices(indices, levels.len())?;
                if !(1..=MAX_QUANT_BITS).contains(bits) {
                    return Err(Error::CorruptEncoding(format!("bit width {bits}")));
                }
                let s = (1u64 << (bits - 1)) as i64;
                for (&i, &l) in indices.iter().zip(levels) {
                    if l.abs() > s {
                        return Err(Error::CorruptEncoding(format!("level {l} exceeds {s}")));
                    }
                    out[i] = norm * l as f64 / s as f64;
                }
            }
        }
        Ok(ParamVector::from_raw(self.layout.clone(), out))
    }
}

/// Kept-coordinate count for one group of size `d_i`.
pub fn topk_count(k: f64, group_size: usize) -> usize {
    ((k * group_size as f64).floor() as usize).clamp(1, group_size)
}

/// Ascending indices of the TopK support of `x`, group by group. Ties in
/// magnitude go to the lower index.
fn topk_support(k: f64, x: &ParamVector) -> Vec<usize> {
    let values = x.values();
    let mut support = Vec::new();
    for range in x.layout().group_ranges() {
        let keep = topk_count(k, range.len());
        let mut idx: Vec<usize> = range.collect();
        if keep < idx.len() {
            idx.select_nth_unstable_by(keep - 1, |&a, &b| {
                values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b))
            });
            idx.truncate(keep);
            idx.sort_unstable();
        }
        support.extend(idx);
    }
    support
}

fn signs_on(x: &ParamVector, candidates: impl Iterator<Item = usize>) -> (Vec<usize>, Vec<bool>) {
    let values = x.values();
    candidates
        .filter(|&i| values[i] != 0.0)
        .map(|i| (i, values[i] < 0.0))
        .unzip()
}

/// Encodes `x` under `spec`. Only the stochastic quantizer draws from `rng`,
/// one uniform per non-zero coordinate in index order.
pub fn compress<R: Rng + ?Sized>(spec: &CompressorSpec, x: &ParamVector, rng: &mut R) -> Result<CompressedUpdate> {
    if !x.is_finite() {
        return Err(Error::NonFinite("compressor input"));
    }
    spec.validate()?;
    let layout = x.shared_layout().clone();
    let values = x.values();
    let payload = match *spec {
        CompressorSpec::Identity => Payload::Dense(values.to_vec()),
        CompressorSpec::TopK { k } => {
            let (indices, vals): (Vec<usize>, Vec<f64>) = topk_support(k, x)
                .into_iter()
                .filter(|&i| values[i] != 0.0)
                .map(|i| (i, values[i]))
                .unzip();
            Payload::SparseValues { indices, values: vals }
        }
        CompressorSpec::GroupedSign => {
            let scales = x
                .group_l1_norms()
                .into_iter()
                .zip(layout.group_sizes())
                .map(|(l1, &di)| l1 / di as f64)
                .collect();
            let (indices, negative) = signs_on(x, 0..x.dim());
            Payload::GroupScaledSigns {
                scales,
                indices,
                negative,
            }
        }
        CompressorSpec::HeavySign { k } => {
            let support = topk_support(k, x);
            let mut l1 = vec![0.0; layout.num_groups()];
            for &i in &support {
                let g = layout.group_of(i).expect("support index in bounds");
                l1[g] += values[i].abs();
            }
            // divided by the full group size, not by the support size
            let scales = l1
                .into_iter()
                .zip(layout.group_sizes())
                .map(|(s, &di)| s / di as f64)
                .collect();
            let (indices, negative) = signs_on(x, support.into_iter());
            Payload::GroupScaledSigns {
                scales,
                indices,
                negative,
            }
        }
        CompressorSpec::StocQuant { bits } => {
            let norm = x.norm();
            let s = (1u64 << (bits - 1)) as f64;
            let mut indices = Vec::new();
            let mut levels = Vec::new();
            if norm > 0.0 {
                for (i, &v) in values.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let a = (v.abs() / norm).min(1.0);
                    let scaled = a * s;
                    let low = scaled.floor().min(s - 1.0);
                    let round_up = rng.random::<f64>() < scaled - low;
                    let level = low as i64 + i64::from(round_up);
                    if level != 0 {
                        indices.push(i);
                        levels.push(if v < 0.0 { -level } else { level });
                    }
                }
            }
            Payload::QuantLevels {
                norm,
                bits,
                indices,
                levels,
            }
        }
    };
    Ok(CompressedUpdate::new(layout, payload))
}

/// `compress` followed by `materialize`.
pub fn compress_dense<R: Rng + ?Sized>(
    spec: &CompressorSpec,
    x: &ParamVector,
    rng: &mut R,
) -> Result<(CompressedUpdate, ParamVector)> {
    let c = compress(spec, x, rng)?;
    let dense = c.materialize()?;
    Ok((c, dense))
}

/// Certified `q_C^2` for the deterministic compressors; `None` for the
/// unbiased quantizer.
pub fn deviation_bound(spec: &CompressorSpec, layout: &GroupLayout) -> Option<f64> {
    let max_group = *layout.group_sizes().iter().max().expect("layout non-empty") as f64;
    match *spec {
        CompressorSpec::Identity => Some(0.0),
        CompressorSpec::TopK { k } => Some(1.0 - k),
        CompressorSpec::GroupedSign => Some(1.0 - 1.0 / max_group),
        CompressorSpec::HeavySign { k } => Some(1.0 - k / max_group),
        CompressorSpec::StocQuant { .. } => None,
    }
}

/// `||C(x) - x||^2 / ||x||^2` for one draw of the compressor.
pub fn measure_deviation<R: Rng + ?Sized>(spec: &CompressorSpec, x: &ParamVector, rng: &mut R) -> Result<f64> {
    let denom = x.sq_norm();
    if denom == 0.0 {
        return Err(Error::UndefinedRatio("compressor input"));
    }
    let (_, dense) = compress_dense(spec, x, rng)?;
    Ok(dense.sub(x)?.sq_norm() / denom)
}
