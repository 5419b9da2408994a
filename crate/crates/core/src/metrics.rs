//! Per-round measurements and their on-disk formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::compressors::{compress_dense, CompressorSpec};
use crate::error::{Error, Result};
use crate::param_space::ParamVector;
use crate::problems::Problem;

pub const CSV_HEADER: &str = "round,grad_norm_sq,train_loss,bits_up_cum,bits_down_cum,q_a_sq,participants,restarts";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `‖∇f(θ)‖²` of the global model once round `round` has been applied.
    pub grad_norm_sq: f64,
    pub train_loss: f64,
    pub bits_up_cum: u64,
    pub bits_down_cum: u64,
    /// Measured compression discrepancy; `None` when the mean update is zero.
    pub q_a_sq: Option<f64>,
    pub participants: usize,
    pub restarts: usize,
}

/// Full-data `(‖∇f(θ)‖², f(θ))`.
pub fn grad_metrics(problem: &Problem, theta: &ParamVector) -> Result<(f64, f64)> {
    let g = problem.global_gradient(theta)?;
    Ok((g.sq_norm(), problem.global_loss(theta)?))
}

/// Discrepancy from already-compressed vectors:
/// `‖mean(compressed) − mean(adjusted)‖² / ‖mean(adjusted)‖²`.
pub fn q_a_from_parts(adjusted: &[&ParamVector], compressed: &[&ParamVector]) -> Result<f64> {
    let mean_u = ParamVector::mean(adjusted)?;
    let denom = mean_u.sq_norm();
    if denom == 0.0 {
        return Err(Error::UndefinedRatio("mean adjusted update"));
    }
    let mean_c = ParamVector::mean(compressed)?;
    Ok(mean_c.sub(&mean_u)?.sq_norm() / denom)
}

/// Compresses each `Δ_i + e_i` independently and measures how far the average
/// of compressions lands from the true average, relative to its norm.
pub fn measure_q_a<R: Rng + ?Sized>(
    adjusted_updates: &[ParamVector],
    spec: &CompressorSpec,
    rng: &mut R,
) -> Result<f64> {
    let compressed = adjusted_updates
        .iter()
        .map(|u| compress_dense(spec, u, rng).map(|(_, d)| d))
        .collect::<Result<Vec<_>>>()?;
    q_a_from_parts(
        &adjusted_updates.iter().collect::<Vec<_>>(),
        &compressed.iter().collect::<Vec<_>>(),
    )
}

/// Lossless 17-significant-digit rendering.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn render_csv(records: &[RoundRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let q = r.q_a_sq.map(fmt_float).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            fmt_float(r.grad_norm_sq),
            fmt_float(r.train_loss),
            r.bits_up_cum,
            r.bits_down_cum,
            q,
            r.participants,
            r.restarts
        );
    }
    out
}

pub fn write_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    fs::write(path, render_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn write_summary_json<T: Serialize>(summary: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Parses a CSV produced by [`render_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<RoundRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::config("csv", "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::config("csv", format!("malformed row {}", i + 1));
            if f.len() != 8 {
                return Err(bad());
            }
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let int = |s: &str| s.parse::<u64>().map_err(|_| bad());
            Ok(RoundRecord {
                round: int(f[0])? as usize,
                grad_norm_sq: float(f[1])?,
                train_loss: float(f[2])?,
                bits_up_cum: int(f[3])?,
                bits_down_cum: int(f[4])?,
                q_a_sq: if f[5].is_empty() { None } else { Some(float(f[5])?) },
                participants: int(f[6])? as usize,
                restarts: int(f[7])? as usize,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressors::measure_deviation;
    use crate::problems::Problem;
    use crate::streams::{stream, Purpose};
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_slice(v).unwrap()
    }

    fn record(round: usize, q: Option<f64>) -> RoundRecord {
        RoundRecord {
            round,
            grad_norm_sq: 0.1 + round as f64,
            train_loss: 1.0 / 3.0,
            bits_up_cum: 64 * round as u64,
            bits_down_cum: 0,
            q_a_sq: q,
            participants: 2,
            restarts: 0,
        }
    }

    #[test]
    fn grad_metrics_quadratic() {
        let p = Problem::quadratic(vec![pv(&[0.0]), pv(&[2.0])], 0.0).unwrap();
        assert_eq!(grad_metrics(&p, &pv(&[1.0])).unwrap(), (0.0, 0.5));
        let (g, l) = grad_metrics(&p, &pv(&[0.0])).unwrap();
        assert_eq!(g, 1.0);
        assert!(l.is_finite());
    }

    #[test]
    fn q_a_identity_is_zero() {
        let u = vec![pv(&[1.0, -2.0]), pv(&[0.5, 0.5])];
        let mut r = stream(0, Purpose::Diagnostics, 0, 0);
        assert_eq!(measure_q_a(&u, &CompressorSpec::Identity, &mut r).unwrap(), 0.0);
    }

    #[test]
    fn q_a_single_client_matches_deviation() {
        let x = pv(&[0.3, -1.2, 2.2, 0.05, -0.7]);
        for spec in [
            CompressorSpec::TopK { k: 0.4 },
            CompressorSpec::GroupedSign,
            CompressorSpec::HeavySign { k: 0.4 },
        ] {
            let mut r = stream(0, Purpose::Diagnostics, 0, 0);
            let qa = measure_q_a(std::slice::from_ref(&x), &spec, &mut r).unwrap();
            let dev = measure_deviation(&spec, &x, &mut r).unwrap();
            assert!((qa - dev).abs() <= 1e-12);
        }
    }

    #[test]
    fn q_a_zero_mean_is_undefined() {
        let u = vec![pv(&[1.0, -2.0]), pv(&[-1.0, 2.0])];
        let mut r = stream(0, Purpose::Diagnostics, 0, 0);
        assert!(matches!(
            measure_q_a(&u, &CompressorSpec::GroupedSign, &mut r),
            Err(Error::UndefinedRatio(_))
        ));
    }

    #[test]
    fn empty_csv_is_header_only() {
        assert_eq!(render_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn missing_q_a_is_empty_field() {
        let csv = render_csv(&[record(1, None)]);
        let row = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[5], "");
        assert_eq!(fields[0], "1");
    }

    #[test]
    fn files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let recs = vec![record(1, Some(0.25)), record(2, None)];
        write_csv(&recs, &path).unwrap();
        let first = fs::read(&path).unwrap();
        write_csv(&recs, &path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
        assert_eq!(parse_csv(std::str::from_utf8(&first).unwrap()).unwrap(), recs);

        let json = dir.path().join("s.json");
        write_summary_json(&recs[0], &json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(v["round"], 1);

        let err = write_csv(&recs, &dir.path().join("missing/dir/m.csv")).unwrap_err();
        assert!(err.to_string().contains("missing/dir/m.csv"));
    }

    proptest! {
        #[test]
        fn float_rendering_round_trips(v in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
            let s = fmt_float(v);
            prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
