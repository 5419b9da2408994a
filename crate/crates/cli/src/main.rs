use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedef_cli::{
    cmd_measure_qa, cmd_run, cmd_speedup, parse_list, render_qa_csv, CliError, ExperimentConfig, QaStudy, SweepAxis,
};
use fedef_core::compressors::CompressorSpec;
use fedef_core::federation_engine::RunConfig;
use fedef_core::problems::GradientDist;

#[derive(Parser)]
#[command(
    name = "fedef",
    version,
    about = "Compressed federated optimization with error feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Override the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory of the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep the client count or participants per round with η = 0.1·√(n or m), η_l = 0.1.
    Speedup {
        config: PathBuf,
        /// Comma-separated client counts, e.g. 4,8,16,32.
        #[arg(long, conflicts_with = "m", required_unless_present = "m")]
        n: Option<String>,
        /// Comma-separated participant counts at the config's n.
        #[arg(long)]
        m: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Measure the compression discrepancy on synthetic heterogeneous gradients.
    MeasureQa {
        #[arg(long, value_enum, default_value_t = Dist::Gaussian)]
        dist: Dist,
        /// Scale of the distribution (standard deviation or Laplace scale).
        #[arg(long, default_value_t = 0.01)]
        scale: f64,
        /// Comma-separated strong-signal factors.
        #[arg(long, default_value = "2,10,100")]
        s: String,
        #[arg(long, default_value = "topk:0.1")]
        compressor: CompressorSpec,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        clients: usize,
        #[arg(long, default_value_t = 1100)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write `qa.csv` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Dist {
    Gaussian,
    Laplace,
}

fn load(path: &Path, common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let file = ExperimentConfig::load(path)?;
    let mut run = file.to_run_config()?;
    if let Some(seed) = common.seed {
        run.master_seed = seed;
    }
    Ok((run, common.out.clone().unwrap_or(file.output.dir)))
}

fn report(label: &str, summary: &fedef_core::federation_engine::ExperimentSummary) {
    println!(
        "{label}rounds={} grad_norm_sq={:.6e} loss={:.6e} bits_up={} bits_down={} restarts={}",
        summary.rounds_run,
        summary.final_grad_norm_sq,
        summary.final_train_loss,
        summary.bits_up_total,
        summary.bits_down_total,
        summary.restarts_total
    );
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, common } => {
            let (run, dir) = load(&config, &common)?;
            let (outcome, files) = cmd_run(&run, &dir)?;
            report("", &outcome.summary);
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Speedup { config, n, m, common } => {
            let (run, dir) = load(&config, &common)?;
            let (axis, list, tag) = match (n, m) {
                (Some(n), _) => (SweepAxis::Clients, parse_list("--n", &n)?, "n"),
                (None, Some(m)) => (SweepAxis::Participants, parse_list("--m", &m)?, "m"),
                (None, None) => unreachable!("clap requires one of --n/--m"),
            };
            for (v, outcome) in cmd_speedup(&run, axis, &list, &dir)? {
                report(&format!("{tag}={v} "), &outcome.summary);
            }
            println!("wrote {}", dir.display());
        }
        Command::MeasureQa {
            dist,
            scale,
            s,
            compressor,
            trials,
            clients,
            dim,
            seed,
            out,
        } => {
            let dist = match dist {
                Dist::Gaussian => GradientDist::Gaussian { std: scale },
                Dist::Laplace => GradientDist::Laplace { scale },
            };
            let study = QaStudy {
                dist,
                scales: parse_list("--s", &s)?,
                spec: compressor,
                trials,
                clients,
                dim,
                seed,
            };
            let csv = render_qa_csv(&cmd_measure_qa(&study)?, trials);
            print!("{csv}");
            if let Some(dir) = out {
                let path = dir.join("qa.csv");
                std::fs::create_dir_all(&dir)
                    .and_then(|()| std::fs::write(&path, &csv))
                    .map_err(|source| fedef_core::error::Error::Io { path, source })?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
