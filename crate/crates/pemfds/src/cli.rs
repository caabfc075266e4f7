//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 verification failed, 2 runtime fault,
//! 3 configuration or usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{expand_sweep, load_config, params_text, Config, ConfigError};
use crate::model::StackParams;
use crate::sim::{metrics, run_scenario, SimError};
use crate::verify::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "pemfds", version, about = "Anode fuel-delivery simulation, control and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario file.
    #[arg(long)]
    scenario: PathBuf,
    /// Override a key, `KEY=VALUE` or `SECTION.KEY=VALUE` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, conflicts_with = "verbose")]
    quiet: bool,
    #[arg(long)]
    verbose: bool,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut v = self.set.clone();
        if let Some(s) = self.seed {
            v.push(format!("scenario.seed={s}"));
        }
        v
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario and write its trace and metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trace CSV path; metrics go to `<stem>.metrics.txt` beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the structural verification suite.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Optional report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one scenario per value of the `[sweep]` parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Output directory for traces and the combined metrics table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect parameters.
    Params {
        #[command(subcommand)]
        action: ParamsAction,
    },
}

#[derive(Subcommand, Debug)]
enum ParamsAction {
    /// Print the effective `[params]` section.
    Dump {
        /// Scenario file; defaults are printed without one.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

/// Metrics path that accompanies a trace path.
pub fn metrics_path(trace: &Path) -> PathBuf {
    let stem = trace.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into());
    trace.with_file_name(format!("{stem}.metrics.txt"))
}

fn sim_exit(e: &SimError) -> i32 {
    match e {
        SimError::Scenario(_) | SimError::Model(crate::model::ModelError::InvalidParam(_)) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn config_failed(e: ConfigError) -> i32 {
    eprintln!("error: {e}");
    EXIT_CONFIG
}

fn run_one(cfg: &Config, out: &Path, quiet: bool) -> Result<crate::sim::Metrics, i32> {
    let run = run_scenario(&cfg.scenario).map_err(|e| {
        eprintln!("error: {e}");
        sim_exit(&e)
    })?;
    let m = metrics(&run.trace, &cfg.scenario.metric_settings).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_RUNTIME
    })?;
    let write = || -> Result<(), String> {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        }
        run.trace.save(out).map_err(|e| e.to_string())?;
        std::fs::write(metrics_path(out), m.to_text()).map_err(|e| e.to_string())
    };
    write().map_err(|e| {
        eprintln!("error: writing {}: {e}", out.display());
        EXIT_RUNTIME
    })?;
    if run.control_faults > 0 && !quiet {
        eprintln!("warning: control law faulted on {} steps; previous input held", run.control_faults);
    }
    Ok(m)
}

fn simulate(common: &Common, out: &Path) -> i32 {
    let cfg = match load_config(&common.scenario, &common.overrides()) {
        Ok(c) => c,
        Err(e) => return config_failed(e),
    };
    if common.verbose {
        eprintln!(
            "running {} for {} s at dt = {} ({})",
            cfg.scenario.mode, cfg.scenario.duration, cfg.scenario.dt, cfg.scenario.scheme
        );
    }
    match run_one(&cfg, out, common.quiet) {
        Ok(m) => {
            if !common.quiet {
                print!("{}", m.to_text());
            }
            EXIT_OK
        }
        Err(code) => code,
    }
}

fn verify_cmd(common: &Common, out: Option<&Path>) -> i32 {
    let cfg = match load_config(&common.scenario, &common.overrides()) {
        Ok(c) => c,
        Err(e) => return config_failed(e),
    };
    let rep = match verify(&cfg.scenario, &cfg.verify) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return sim_exit(&e);
        }
    };
    let text = rep.to_text();
    if !common.quiet {
        print!("{text}");
    }
    if let Some(p) = out {
        if let Err(e) = std::fs::write(p, &text) {
            eprintln!("error: writing {}: {e}", p.display());
            return EXIT_RUNTIME;
        }
    }
    if rep.passed() {
        EXIT_OK
    } else {
        eprintln!("verification failed: {}", rep.failed().join(", "));
        EXIT_VERIFY_FAILED
    }
}

fn file_safe(v: &str) -> String {
    v.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn sweep(common: &Common, out: &Path) -> i32 {
    let runs = match expand_sweep(&common.scenario, &common.overrides()) {
        Ok(r) => r,
        Err(e) => return config_failed(e),
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("error: creating {}: {e}", out.display());
        return EXIT_RUNTIME;
    }
    let results: Vec<Result<crate::sim::Metrics, i32>> = std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .enumerate()
            .map(|(i, (v, cfg))| {
                let path = out.join(format!("run_{i:02}_{}.csv", file_safe(v)));
                scope.spawn(move || run_one(cfg, &path, true))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or(Err(EXIT_RUNTIME))).collect()
    });
    let mut worst = EXIT_OK;
    let mut table = String::new();
    let mut header_written = false;
    for ((v, _), r) in runs.iter().zip(results) {
        match r {
            Ok(m) => {
                if !header_written {
                    table.push_str("value,");
                    table.push_str(&m.entries.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(","));
                    table.push('\n');
                    header_written = true;
                }
                table.push_str(v);
                for (_, x) in &m.entries {
                    table.push_str(&format!(",{x:?}"));
                }
                table.push('\n');
            }
            Err(code) => {
                eprintln!("error: sweep value {v} failed");
                worst = worst.max(code);
            }
        }
    }
    if let Err(e) = std::fs::write(out.join("sweep_metrics.csv"), &table) {
        eprintln!("error: writing sweep table: {e}");
        return EXIT_RUNTIME;
    }
    if !common.quiet {
        print!("{table}");
    }
    worst
}

fn params_dump(scenario: Option<&Path>, set: &[String]) -> i32 {
    let params = match scenario {
        Some(p) => match load_config(p, set) {
            Ok(c) => c.scenario.params,
            Err(e) => return config_failed(e),
        },
        None => StackParams::default(),
    };
    print!("{}", params_text(&params));
    EXIT_OK
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match &cli.command {
        Command::Simulate { common, out } => simulate(common, out),
        Command::Verify { common, out } => verify_cmd(common, out.as_deref()),
        Command::Sweep { common, out } => sweep(common, out),
        Command::Params { action: ParamsAction::Dump { scenario, set } } => params_dump(scenario.as_deref(), set),
    }
}
