//! `lamperti`: command-line front end.
//!
//! Exit codes: 0 on success, 1 when a stage fails (or, for `verify`, when a
//! check fails), 2 on usage or config errors.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lamperti_core::analysis::FitWindow;
use lamperti_core::chain::{moments, validate_assumptions, Chain};
use lamperti_core::harmonic::harmonic_solve;
use lamperti_core::htransform::{transform, transformed_moments};
use lamperti_core::lyapunov::classify;
use lamperti_core::mc::{simulate, SimConfig};
use lamperti_core::pipeline::{
    analysis_grid, log_grid, run_pipeline, solve_stationary, Config, Overrides,
};
use lamperti_core::Error;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(
    name = "lamperti",
    version,
    about = "Markov chains with asymptotically zero drift"
)]
struct Cli {
    /// TOML config declaring the chain and run settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for Monte Carlo stages.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Truncation level N.
    #[arg(long = "trunc-N", global = true)]
    trunc_n: Option<u64>,
    /// Directory for CSV/JSON artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Tail fit window as lo:hi.
    #[arg(long, global = true, value_parser = parse_window)]
    fit_window: Option<FitWindow>,
    /// Agreement tolerance between product-formula and global-balance tables.
    #[arg(long, global = true)]
    gb_tol: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Check the moment and jump conditions on a grid.
    Validate,
    /// Drift classification of the chain.
    Classify,
    /// Stationary distribution on [0, N].
    Solve,
    /// Harmonic function V of the chain killed on B.
    Harmonic,
    /// Transformed kernel, entrance law and moments.
    Transform,
    /// Simulate trajectories; one JSON line per replica.
    Simulate {
        #[arg(long, default_value_t = 10_000)]
        steps: u64,
        #[arg(long, default_value_t = 100)]
        replicas: u64,
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// Record every k-th state in `paths.csv` (0 disables).
        #[arg(long, default_value_t = 0)]
        stride: u64,
        /// Simulate the transformed chain from its entrance law.
        #[arg(long)]
        hat: bool,
    },
    /// Run the full pipeline and fail if any check fails.
    Verify,
    /// Run the full pipeline and write the report bundle.
    Report,
}

fn parse_window(s: &str) -> Result<FitWindow, String> {
    FitWindow::parse(s).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Stage(Error),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            e => Failure::Stage(e),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Stage(e.into())
    }
}

fn load(cli: &Cli) -> Result<Config, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Usage("--config is required".into()))?;
    let mut cfg = Config::load(path)?;
    Overrides {
        seed: cli.seed,
        trunc_n: cli.trunc_n,
        fit_window: cli.fit_window,
        gb_tol: cli.gb_tol,
    }
    .apply(&mut cfg)?;
    Ok(cfg)
}

fn out_file(dir: Option<&Path>, name: &str) -> Result<Option<BufWriter<File>>, Failure> {
    match dir {
        None => Ok(None),
        Some(d) => {
            fs::create_dir_all(d)?;
            Ok(Some(BufWriter::new(File::create(d.join(name))?)))
        }
    }
}

fn print_json(v: &serde_json::Value) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(Error::from)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load(cli)?;
    let spec = cfg.build_chain()?;
    let n = cfg.solve.n;
    let dir = cli.out_dir.as_deref();
    match &cli.cmd {
        Cmd::Validate => {
            let grid = analysis_grid(&spec, n);
            let d = validate_assumptions(&spec, &grid)?;
            if let Some(w) = out_file(dir, "moments.csv")? {
                moments(&spec, &grid)?.write_csv(w)?;
            }
            print_json(&serde_json::to_value(&d).map_err(Error::from)?)
        }
        Cmd::Classify => {
            let rep = classify(&spec, &analysis_grid(&spec, n))?;
            if let Some(w) = out_file(dir, "drift.csv")? {
                rep.write_csv(w)?;
            }
            print_json(&rep.summary_json())
        }
        Cmd::Solve => {
            let s = solve_stationary(&spec, n, cfg.solve.method)?;
            if let Some(w) = out_file(dir, "stationary.csv")? {
                s.write_csv(w)?;
            }
            print_json(&json!({
                "method": s.method,
                "N": s.truncation_n,
                "pi0": s.probs[0],
                "residual": s.residual,
                "tail_mass_bound": s.tail_mass_bound,
                "doubling_change": s.doubling_change,
            }))
        }
        Cmd::Harmonic => {
            let h = harmonic_solve(&spec, n)?;
            if let Some(w) = out_file(dir, "harmonic.csv")? {
                h.write_csv(w)?;
            }
            print_json(&json!({
                "N": h.truncation_n,
                "x0": h.boundary_x0,
                "interior_residual": h.interior_residual(),
                "doubling_change": h.doubling_change,
                "unstable": h.unstable,
                "positive_from": h.positive_from,
                "C0": h.c0,
            }))
        }
        Cmd::Transform => {
            let s = solve_stationary(&spec, n, cfg.solve.method)?;
            let h = harmonic_solve(&spec, n)?;
            let tc = transform(&spec, &h, &s)?;
            let grid = log_grid(tc.excluded_up_to + 1, tc.interior_end(), 48);
            let m = transformed_moments(&tc, &grid)?;
            if let Some(w) = out_file(dir, "kernel.csv")? {
                tc.write_kernel_csv(w)?;
            }
            if let Some(w) = out_file(dir, "init.csv")? {
                tc.write_init_csv(w)?;
            }
            if let Some(w) = out_file(dir, "transformed_moments.csv")? {
                m.write_csv(w)?;
            }
            print_json(&json!({
                "row_sum_deviation": tc.row_sum_deviation,
                "edge_deviation": tc.edge_deviation,
                "boundary_integral": tc.boundary_integral,
                "hat_mu": tc.hat_mu,
                "hat_b": tc.hat_b,
            }))
        }
        Cmd::Simulate {
            steps,
            replicas,
            start,
            stride,
            hat,
        } => {
            let seed = cfg.mc.seed;
            let (batch, tag) = if *hat {
                let s = solve_stationary(&spec, n, cfg.solve.method)?;
                let h = harmonic_solve(&spec, n)?;
                let tc = transform(&spec, &h, &s)?;
                let mut c = tc.entrance_config(seed, *steps, *replicas);
                c.record_stride = *stride;
                (simulate(&tc, &c)?, tc.tag().to_string())
            } else {
                let mut c = SimConfig::new(seed, *steps, *replicas, *start);
                c.record_stride = *stride;
                (simulate(&spec, &c)?, spec.tag().to_string())
            };
            match out_file(dir, "trajectories.jsonl")? {
                Some(w) => batch.write_jsonl(w)?,
                None => batch.write_jsonl(io::stdout().lock())?,
            }
            if *stride > 0 {
                if let Some(mut w) = out_file(dir, "paths.csv")? {
                    writeln!(w, "replica,step,x")?;
                    for t in &batch.replicas {
                        for (i, x) in t.path.iter().enumerate() {
                            writeln!(w, "{},{},{x}", t.replica, i as u64 * stride)?;
                        }
                    }
                }
            }
            eprintln!("simulated {replicas} replicas of {tag} for {steps} steps");
            Ok(())
        }
        Cmd::Verify | Cmd::Report => {
            let out = dir
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("lamperti-out"));
            let summary = run_pipeline(&cfg, &out, cli.config.as_deref())?;
            let mut stdout = io::stdout().lock();
            if let Some(m) = &summary.message {
                writeln!(stdout, "note: {m}")?;
            }
            for c in &summary.checks {
                writeln!(
                    stdout,
                    "{} {}: {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                )?;
            }
            writeln!(stdout, "report: {}", out.join("report.md").display())?;
            if matches!(cli.cmd, Cmd::Verify) && !summary.all_pass {
                return Err(Failure::Checks);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Checks) => {
            eprintln!("error: one or more checks failed");
            ExitCode::from(1)
        }
    }
}
