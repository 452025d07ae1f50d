use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctcma::runner::{
    self, export, parse_grid, run_scenario, write_sweep_summary, ExportKind, RunStatus,
    ScenarioConfig, SweepAxis,
};
use ctcma::Error;

/// DP-QPSK coherent link with a continuous-time analog CMA equalizer.
#[derive(Parser)]
#[command(name = "ctcma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its report and artifacts.
    Run(Common),
    /// Simulate a grid of scenarios around a base scenario.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// TOML file mapping key paths to arrays of values.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Inline axis, `path=[v1, v2, ...]`; repeatable.
        #[arg(long = "param")]
        params: Vec<String>,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Built-in scenario: b2b_40g, smf5km_40g, smf10km_40g or smf5km_100g.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total symbols to simulate.
    #[arg(long)]
    symbols: Option<usize>,
    /// Samples per symbol.
    #[arg(long)]
    sps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    export: ExportKind,
}

/// Exit codes beyond the usual 0/1.
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;
const EXIT_NO_LOCK: u8 = 5;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
                Error::Divergence { .. } => EXIT_DIVERGED,
                Error::Stage { ref source, .. } if matches!(**source, Error::Divergence { .. }) => {
                    EXIT_DIVERGED
                }
                _ => 1,
            })
        }
    }
}

fn load(common: &Common) -> Result<ScenarioConfig, Error> {
    let mut cfg = match (&common.scenario, &common.preset) {
        (Some(path), preset) => {
            let mut text = std::fs::read_to_string(path)?;
            if let Some(p) = preset {
                // the flag overrides a preset named in the file
                let mut table: toml::Table = text
                    .parse()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                table.insert("preset".into(), toml::Value::String(p.clone()));
                text = table.to_string();
            }
            ScenarioConfig::from_toml(&text)?
        }
        (None, Some(p)) => ScenarioConfig::preset(p)?,
        (None, None) => ScenarioConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.symbols {
        cfg.n_symbols = n;
        // keep the measurement window inside a shortened run
        let m = &mut cfg.metrics;
        if n <= m.warmup_symbols + m.measure_symbols {
            m.measure_symbols = m.measure_symbols.min(n / 2);
            m.warmup_symbols = n - m.measure_symbols - 1;
        }
    }
    if let Some(sps) = common.sps {
        cfg.sps = sps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ScenarioConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(&cfg.name))
}

fn dispatch(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let dir = out_dir(&common, &cfg);
            let outcome = run_scenario(&cfg)?;
            export(&outcome, &dir, common.export)?;
            let r = &outcome.report;
            for s in &r.metrics.stages {
                match (&s.evm, &s.ber_estimate, &s.ber_counted) {
                    (Some(e), Some(b), Some(c)) => println!(
                        "{:<10} evm {:6.2}%  ber(est) {:.2e}  ber(count) {:.2e}  eye {:.3}",
                        s.stage, e.evm_percent, b.ber, c.ber, s.eye_height
                    ),
                    _ => println!("{:<10} unaligned  eye {:.3}", s.stage, s.eye_height),
                }
            }
            match r.equalizer.converged_at_symbols {
                Some(n) => println!("equalizer converged after {n:.0} symbols"),
                None => println!("equalizer did not converge"),
            }
            println!("status {:?}, output in {}", r.status, dir.display());
            Ok(match r.status {
                RunStatus::Ok => 0,
                RunStatus::NotConverged => EXIT_NOT_CONVERGED,
                RunStatus::NoLock => EXIT_NO_LOCK,
            })
        }
        Command::Sweep {
            common,
            grid,
            params,
        } => {
            let cfg = load(&common)?;
            let mut axes: Vec<SweepAxis> = match grid {
                Some(p) => parse_grid(&std::fs::read_to_string(p)?)?,
                None => Vec::new(),
            };
            for p in &params {
                axes.extend(parse_grid(p)?);
            }
            let dir = out_dir(&common, &cfg);
            let results = runner::sweep(&cfg, &axes)?;
            std::fs::create_dir_all(&dir)?;
            let mut failed = 0;
            for r in &results {
                match &r.outcome {
                    Ok(o) => export(
                        o,
                        &dir.join(format!("run_{:03}", r.point.index)),
                        common.export,
                    )?,
                    Err(e) => {
                        failed += 1;
                        eprintln!("run {} failed: {e}", r.point.index);
                    }
                }
            }
            write_sweep_summary(&results, &axes, &dir.join("summary.csv"))?;
            println!(
                "{} runs ({failed} failed), summary in {}",
                results.len(),
                dir.join("summary.csv").display()
            );
            Ok(if failed > 0 { 1 } else { 0 })
        }
    }
}
