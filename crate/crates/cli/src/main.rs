use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use qcalib::quorum::{HomodyneQuorum, KernelGrid};
use qcalib::scenario::{self, ErrorBarSource, RunReport, ScenarioConfig};

/// Detector POVM calibration against a known tomographer.
#[derive(Parser)]
#[command(name = "qcalib", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario from a TOML file or a builtin name.
    Run {
        /// Path to a TOML config, or the name of a builtin scenario.
        scenario: String,
        /// Where to write report.json and friends (overrides the config).
        #[arg(short, long)]
        output_dir: Option<PathBuf>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of records.
        #[arg(long)]
        records: Option<usize>,
        /// Override the bootstrap repetitions.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Print the full JSON report instead of the summary table.
        #[arg(long)]
        json: bool,
    },
    /// Check a config file without running it.
    Validate { config: PathBuf },
    /// Print the documented default config.
    PrintDefaults,
    /// List the builtin scenarios.
    ListScenarios,
    /// Print a builtin scenario as TOML.
    Show { name: String },
    /// Write the homodyne pattern-function table as CSV.
    ExportKernels {
        #[arg(long, default_value_t = 0.9)]
        eta_h: f64,
        #[arg(long, default_value_t = 54)]
        fock_cutoff: usize,
        #[arg(long, default_value_t = 0.0)]
        ridge: f64,
        /// Output file; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { scenario, output_dir, seed, records, bootstrap, json } => {
            let mut cfg = load_scenario(&scenario)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = Some(dir);
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = records {
                cfg.n_records = n;
            }
            if let Some(b) = bootstrap {
                cfg.bootstrap_reps = b;
            }
            cfg.validate()?;
            let out = scenario::run(&cfg).with_context(|| format!("running scenario `{}`", cfg.name))?;
            let stdout = io::stdout();
            let mut w = stdout.lock();
            if json {
                writeln!(w, "{}", out.report.to_json()?)?;
            } else {
                print_summary(&mut w, &out.report)?;
                if let Some(dir) = &cfg.output_dir {
                    writeln!(w, "artifacts written to {}", dir.display())?;
                }
            }
            if out.report.violations.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for v in &out.report.violations {
                    eprintln!("violation: {v}");
                }
                Ok(ExitCode::from(2))
            }
        }
        Command::Validate { config } => {
            let cfg = ScenarioConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            println!("{}: ok ({})", config.display(), cfg.name);
            Ok(ExitCode::SUCCESS)
        }
        Command::PrintDefaults => {
            print!("{}", scenario::DEFAULT_CONFIG_TOML);
            Ok(ExitCode::SUCCESS)
        }
        Command::ListScenarios => {
            for name in scenario::builtin_names() {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Show { name } => {
            print!("{}", scenario::builtin(&name)?.to_toml()?);
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportKernels { eta_h, fock_cutoff, ridge, out } => {
            let hq = HomodyneQuorum::new(eta_h, fock_cutoff, KernelGrid::default(), ridge)?;
            eprintln!("kernel residual {:.3e}", hq.kernels.residual);
            match out {
                Some(path) => {
                    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    hq.kernels.write_csv(BufWriter::new(f))?;
                }
                None => hq.kernels.write_csv(io::stdout().lock())?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_scenario(arg: &str) -> Result<ScenarioConfig> {
    let path = Path::new(arg);
    if path.exists() {
        ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))
    } else {
        scenario::builtin(arg).map_err(Into::into)
    }
}

fn print_summary(w: &mut impl Write, report: &RunReport) -> io::Result<()> {
    let f = &report.faithfulness;
    writeln!(w, "scenario {} (seed {})", report.scenario, report.seed)?;
    writeln!(w, "state map: {:?} subspace, condition number {:.3e}", f.subspace, f.condition_number)?;
    if let Some(d) = &report.dataset {
        writeln!(w, "records: {}", d.n_records)?;
    } else {
        writeln!(w, "records: exact probabilities")?;
    }
    for rec in &report.reconstructions {
        writeln!(w)?;
        writeln!(w, "{:?} reconstruction ({:?} error bars)", rec.method, rec.error_bars)?;
        if let Some(ml) = &rec.ml {
            writeln!(
                w,
                "  iterations {} converged {} logL {:.6} monotone {} constraints {}",
                ml.iterations, ml.converged, ml.final_log_likelihood, ml.monotone, ml.constraints_satisfied
            )?;
        }
        writeln!(w, "  {:>3} {:>3} {:>3} {:>2} {:>12} {:>10} {:>12} {:>8}", "k", "row", "col", "", "estimate", "stderr", "truth", "z")?;
        for e in &rec.entries {
            writeln!(
                w,
                "  {:>3} {:>3} {:>3} {:>2} {:>12.6} {:>10.2e} {:>12.6} {:>8.2}",
                e.outcome,
                e.row,
                e.col,
                format!("{:?}", e.part).to_lowercase(),
                e.estimate,
                e.stderr,
                e.theory,
                e.z
            )?;
        }
        if rec.error_bars != ErrorBarSource::None {
            writeln!(w, "  within 3 stderr: {:.1}%", 100.0 * rec.fraction_within_3_stderr)?;
        }
    }
    for n in &report.notes {
        writeln!(w, "note: {n}")?;
    }
    Ok(())
}
