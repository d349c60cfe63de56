//! `qctc` batch frontend: every command reads a TOML config and writes CSV
//! tables plus a `summary.json` (with the resolved config as "manifest")
//! into the output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qctc::commands::{self, exit, RunOptions};
use qctc::config::Config;
use qctc::Error;

#[derive(Parser, Debug)]
#[command(name = "qctc", version, about = "Driven-dissipative spin-1 lattice simulations")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads for sweeps; 0 uses all cores.
    #[arg(long, global = true, value_name = "K", default_value_t = 0)]
    workers: usize,
    /// Global seed; falls back to `run.seed`, then 0.
    #[arg(long, global = true, value_name = "S")]
    seed: Option<u64>,
    /// Continue a sweep from its journal.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Single trajectory with the configured solver (trace.csv).
    Trace,
    /// Mean-field classification with cumulant overlay on a (Δ, Ω) grid (scan.csv).
    Scan,
    /// Steady-state fluctuations versus lattice size (scaling.csv).
    Scaling,
    /// Random-start mean-field and cumulant-drop checks (falsify.csv).
    Falsify,
    /// Fourier spectrum of a stored trace (spectrum.csv).
    Spectrum,
}

fn load(path: Option<&Path>) -> Result<Config, Error> {
    let path = path.ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Config::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn run(cli: &Cli) -> Result<i32, Error> {
    let cfg = load(cli.config.as_deref())?;
    let opts = RunOptions {
        out: cli.out.clone(),
        workers: cli.workers,
        seed: cli.seed.or(cfg.run.seed).unwrap_or(0),
        resume: cli.resume,
    };
    std::fs::create_dir_all(&opts.out)?;
    match cli.command {
        Command::Trace => {
            let t = commands::cmd_trace(&cfg, &opts)?;
            let d2 = t.summary.get("delta2").copied().unwrap_or(f64::NAN);
            println!("trace: {} δ²={d2:.3e} ({})", cfg.run.solver.name(), t.label.name());
        }
        Command::Scan => {
            let g = commands::cmd_scan(&cfg, &opts)?;
            let failed = g.cells.iter().filter(|c| c.status == qctc::engine::CellStatus::Failed).count();
            println!("scan: {} cells, {failed} failed", g.cells.len());
            if failed > 0 {
                return Ok(exit::SOLVER);
            }
        }
        Command::Scaling => {
            let r = commands::cmd_scaling(&cfg, &opts)?;
            if let Some(f) = &r.fit {
                println!("scaling: exponent {:.4}, power rms {:.3e}, linear rms {:.3e}", f.exponent, f.power_rms, f.linear_rms);
            }
        }
        Command::Falsify => {
            let r = commands::cmd_falsify(&cfg, &opts)?;
            let v = |b: bool| if b { "PASS" } else { "FAIL" };
            println!("mean-field random starts: {}", v(r.mf_stationary));
            println!("cumulant drop: {} (post-drop δ²={:.3e})", v(r.post_drop_stationary), r.post_drop_delta2);
            if !r.passed() {
                return Ok(exit::CHECK_FAILED);
            }
        }
        Command::Spectrum => {
            let dir = cli.config.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
            let s = commands::cmd_spectrum(&cfg, &opts, dir)?;
            match s.dominant {
                Some(w) => println!("spectrum: dominant angular frequency {w:.6}"),
                None => println!("spectrum: no dominant frequency"),
            }
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            commands::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
