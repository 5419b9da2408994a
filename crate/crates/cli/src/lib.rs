//! Command implementations behind the `fedef` binary.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fedef_core::compressors::{deviation_bound, CompressorSpec};
use fedef_core::error::Error;
use fedef_core::federation_engine::{run_experiment, ExperimentOutcome, RunConfig};
use fedef_core::metrics::{fmt_float, measure_q_a, write_csv, write_summary_json};
use fedef_core::param_space::GroupLayout;
use fedef_core::problems::{synth_client_gradients, GradientDist};
use fedef_core::streams::{stream, Purpose};
use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("invalid argument `{arg}`: {reason}")]
    Usage { arg: &'static str, reason: String },

    #[error(transparent)]
    Sim(#[from] Error),
}

impl CliError {
    /// Process exit status: 2 for bad input, 1 for failed runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Usage { .. } | CliError::Sim(Error::Config { .. }) => 2,
            _ => 1,
        }
    }
}

/// Writes `metrics{suffix}.csv` and `summary{suffix}.json` into `dir`.
fn write_outputs(out: &ExperimentOutcome, dir: &Path, suffix: &str) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let csv = dir.join(format!("metrics{suffix}.csv"));
    let json = dir.join(format!("summary{suffix}.json"));
    write_csv(&out.records, &csv)?;
    write_summary_json(&out.summary, &json)?;
    Ok(vec![csv, json])
}

/// Runs one experiment and writes its CSV and JSON summary. Nothing is
/// written unless the whole run succeeds.
pub fn cmd_run(config: &RunConfig, out_dir: &Path) -> Result<(ExperimentOutcome, Vec<PathBuf>), CliError> {
    let outcome = run_experiment(config.clone())?;
    let files = write_outputs(&outcome, out_dir, "")?;
    Ok((outcome, files))
}

/// Which quantity a speedup sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Number of clients, all participating.
    Clients,
    /// Participants per round at fixed client count.
    Participants,
}

/// Server rate `0.1·√count` used by the speedup presets.
pub fn speedup_eta(count: usize) -> f64 {
    0.1 * (count as f64).sqrt()
}

/// One configuration per sweep entry, with `η = 0.1√n` (or `0.1√m`) and
/// `η_l = 0.1`. All entries are validated before anything runs.
pub fn speedup_configs(base: &RunConfig, axis: SweepAxis, values: &[usize]) -> Result<Vec<RunConfig>, CliError> {
    if values.is_empty() {
        return Err(CliError::Usage {
            arg: "--n/--m",
            reason: "list must not be empty".into(),
        });
    }
    values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            match axis {
                SweepAxis::Clients => {
                    cfg.problem.set_num_clients(v);
                    cfg.participants = v;
                }
                SweepAxis::Participants => cfg.participants = v,
            }
            cfg.hp.eta = speedup_eta(v);
            cfg.hp.eta_l = 0.1;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

pub fn cmd_speedup(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[usize],
    out_dir: &Path,
) -> Result<Vec<(usize, ExperimentOutcome)>, CliError> {
    let configs = speedup_configs(base, axis, values)?;
    let tag = match axis {
        SweepAxis::Clients => "n",
        SweepAxis::Participants => "m",
    };
    let mut results = Vec::with_capacity(configs.len());
    for (cfg, &v) in configs.into_iter().zip(values) {
        results.push((v, run_experiment(cfg)?));
    }
    for (v, out) in &results {
        write_outputs(out, out_dir, &format!("_{tag}{v}"))?;
    }
    Ok(results)
}

/// Settings of the synthetic discrepancy study.
#[derive(Debug, Clone)]
pub struct QaStudy {
    pub dist: GradientDist,
    pub scales: Vec<f64>,
    pub spec: CompressorSpec,
    pub trials: usize,
    pub clients: usize,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaRow {
    pub scale: f64,
    pub mean: f64,
    pub max: f64,
    /// Deviation bound of the compressor, when it has one.
    pub q_c_sq: Option<f64>,
    /// Trials whose mean update was zero and so had no defined ratio.
    pub undefined: usize,
}

pub const QA_CSV_HEADER: &str = "s,mean_q_a_sq,max_q_a_sq,q_c_sq,trials,undefined";

pub fn cmd_measure_qa(study: &QaStudy) -> Result<Vec<QaRow>, CliError> {
    if study.trials == 0 {
        return Err(CliError::Usage {
            arg: "--trials",
            reason: "must be >= 1".into(),
        });
    }
    if study.scales.is_empty() {
        return Err(CliError::Usage {
            arg: "--s",
            reason: "list must not be empty".into(),
        });
    }
    study.spec.validate().map_err(|e| CliError::Usage {
        arg: "--compressor",
        reason: e.to_string(),
    })?;
    let layout = GroupLayout::single(study.dim)?;
    let q_c_sq = deviation_bound(&study.spec, &layout);
    study
        .scales
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut rng = stream(study.seed, Purpose::Diagnostics, i as u64, 0);
            let (mut sum, mut max, mut defined) = (0.0, 0.0f64, 0usize);
            for _ in 0..study.trials {
                let grads = synth_client_gradients(study.dist, study.clients, study.dim, s, &mut rng)?;
                match measure_q_a(&grads, &study.spec, &mut rng) {
                    Ok(q) => {
                        sum += q;
                        max = max.max(q);
                        defined += 1;
                    }
                    Err(Error::UndefinedRatio(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            Ok(QaRow {
                scale: s,
                mean: if defined > 0 { sum / defined as f64 } else { f64::NAN },
                max,
                q_c_sq,
                undefined: study.trials - defined,
            })
        })
        .collect()
}

pub fn render_qa_csv(rows: &[QaRow], trials: usize) -> String {
    let mut out = format!("{QA_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{trials},{}",
            r.scale,
            fmt_float(r.mean),
            fmt_float(r.max),
            r.q_c_sq.map(fmt_float).unwrap_or_default(),
            r.undefined
        );
    }
    out
}

/// Parses a comma-separated list such as `4,8,16`.
pub fn parse_list<T: std::str::FromStr>(arg: &'static str, text: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| CliError::Usage {
                arg,
                reason: format!("cannot parse `{s}`"),
            })
        })
        .collect()
}
