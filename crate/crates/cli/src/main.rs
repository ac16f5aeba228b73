use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use modadc::checks::{run_check, QUICK};
use modadc::harness::{
    parse_axis_value, run_experiment, sweep, write_outputs, write_sweep_csv, ExperimentConfig, Summary,
};

/// Monte Carlo experiments for modulo ADCs.
///
/// Set MODADC_THREADS to fix the worker count; results do not depend on it.
#[derive(Parser)]
#[command(name = "modadc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write trials.csv, summary.csv and timing.csv.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's output_path, then out/<config name>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config once per value of one parameter and write sweep.csv.
    Sweep {
        config: PathBuf,
        /// Dotted config path, or one of R, D, alpha, N, delta.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run acceptance criteria: the quick ones by default.
    Selftest {
        /// Run all thirteen criteria (the ring-oscillator sweep takes minutes).
        #[arg(long)]
        full: bool,
        /// Run only these criteria.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
    },
}

fn out_dir(explicit: Option<PathBuf>, cfg: &ExperimentConfig, config: &Path) -> PathBuf {
    explicit.or_else(|| cfg.output_path.clone()).unwrap_or_else(|| {
        let stem = config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        PathBuf::from("out").join(stem)
    })
}

fn print_summary(label: &str, s: &Summary) {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    println!(
        "{label}: {} trials ({} failed), block errors {} (P_e {:.2e}, Wilson [{:.2e}, {:.2e}]), overloads {}/{}, SNR {} dB, R {:.3}",
        s.trials,
        s.failed_trials,
        s.block_errors,
        s.pe_hat,
        s.pe_lo,
        s.pe_hi,
        s.overloads,
        s.samples,
        fmt(s.snr_db),
        s.rate_bits
    );
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MODADC_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("MODADC_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let result = run_experiment(&cfg)?;
            let dir = out_dir(out, &cfg, &config);
            write_outputs(&result, &dir)?;
            print_summary(cfg.experiment.name(), &result.summary);
            for (k, v) in &result.summary.extra {
                println!("  {k} = {v}");
            }
            println!("wrote {}", dir.display());
            Ok(true)
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            if values.is_empty() {
                bail!("--values needs at least one value");
            }
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let base: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            let cfg = ExperimentConfig::from_toml_str(&text)?;
            let parsed: Vec<toml::Value> = values.iter().map(|v| parse_axis_value(v)).collect();
            let result = sweep(&base, &axis, &parsed)?;
            for (v, r) in values.iter().zip(&result.results) {
                print_summary(&format!("{}={v}", result.axis), &r.summary);
            }
            let dir = out_dir(out, &cfg, &config);
            fs::create_dir_all(&dir)?;
            let path = dir.join("sweep.csv");
            write_sweep_csv(&result, fs::File::create(&path)?)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Selftest { full, criteria } => {
            let ids: Vec<u8> = if !criteria.is_empty() {
                criteria
            } else if full {
                (1..=13).collect()
            } else {
                QUICK.to_vec()
            };
            let mut ok = true;
            for id in ids {
                match run_check(id) {
                    Ok(r) => {
                        ok &= r.pass;
                        println!("{}", r.line());
                        for d in &r.details {
                            println!("    {d}");
                        }
                    }
                    Err(e) => {
                        ok = false;
                        println!("criterion {id}: FAIL error: {e}");
                    }
                }
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
