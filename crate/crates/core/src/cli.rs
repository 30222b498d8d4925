//! Command-line surface of the `formation` binary.
//!
//! Exit codes: 0 success, 2 invalid scenario, 3 non-convergence where
//! convergence was asserted, 64 usage error, 1 any other failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{consensus_check, report, sampled_stability_probe, ProbeSettings};
use crate::io::{load_scenario, read_scenario, write_trace, Scenario, ScenarioError};
use crate::simulation::{self, Mode, SimError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

/// Consensus disagreement below which phases count as agreed.
const CONSENSUS_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "formation", version, about = "Formation control around a target: simulate, check and probe scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Continuous,
    Sampled,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Continuous => Mode::Continuous,
            ModeArg::Sampled => Mode::Sampled,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write trajectory, edge and summary files.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Exit with status 3 unless the run converges.
        #[arg(long)]
        assert_converged: bool,
    },
    /// Validate a scenario and print its certificate and bounds.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sampled-data stability probe over a grid of sampling periods.
    Probe {
        #[arg(long)]
        config: PathBuf,
        /// `start:stop:step`, inclusive of `stop`.
        #[arg(long, value_parser = parse_grid)]
        h_grid: Grid,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200.0)]
        t_end: f64,
        /// Exit with status 3 unless every period below the bound converges in all trials.
        #[arg(long)]
        assert_converged: bool,
    },
    /// Integrate the phase-error consensus system from random phases.
    Consensus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        t_end: f64,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Exit with status 3 unless the disagreement vanishes.
        #[arg(long)]
        assert_converged: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Grid(Vec<f64>);

fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [start, stop, step] = parts[..] else {
        return Err("expected start:stop:step".into());
    };
    if !(step > 0.0 && start > 0.0 && stop >= start) {
        return Err("need 0 < start <= stop and step > 0".into());
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok(Grid((0..count).map(|k| start + k as f64 * step).collect()))
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(Failure(code, message)) => {
            let _ = writeln!(err, "error: {message}");
            code
        }
    }
}

struct Failure(i32, String);

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        let code = match e {
            ScenarioError::Io { .. } => EXIT_FAILURE,
            _ => EXIT_INVALID,
        };
        Failure(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(EXIT_FAILURE, e.to_string())
    }
}

fn print_validation(out: &mut dyn Write, s: &Scenario) -> std::io::Result<()> {
    let v = &s.validation;
    if let Some(name) = &s.name {
        writeln!(out, "scenario: {name}")?;
    }
    writeln!(out, "agents: {}", s.topology.len())?;
    match &v.certificate {
        Some(d) => {
            let d: Vec<String> = d.iter().map(|x| format!("{x:.6}")).collect();
            writeln!(out, "admissible: yes, certificate d = [{}]", d.join(", "))?;
        }
        None => writeln!(out, "admissible: no ({})", v.admissibility_error.as_deref().unwrap_or("unknown"))?,
    }
    match v.spanning_root {
        Some(r) => writeln!(out, "spanning tree: yes (root agent {r})")?,
        None => writeln!(out, "spanning tree: no")?,
    }
    writeln!(
        out,
        "gain bound: c = {} {} |mu| * d_max = {}",
        v.c,
        if v.gain_ok { ">" } else { "<=" },
        v.gain_bound
    )?;
    writeln!(out, "coupling bound M: {}", v.coupling_bound)?;
    writeln!(out, "h_max: {:.6}", v.sampling_bound)?;
    if let (Some(h), Some(below)) = (v.sampling_period, v.below_sampling_bound) {
        writeln!(out, "sampling period: {h} ({} h_max)", if below { "below" } else { "not below" })?;
    }
    for note in &v.notes {
        writeln!(out, "note: {note}")?;
    }
    Ok(())
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32, Failure> {
    match command {
        Command::Check { config } => {
            let scenario = read_scenario(&config)?;
            print_validation(out, &scenario)?;
            let failures = scenario.validation.failures();
            if failures.is_empty() {
                writeln!(out, "valid")?;
                Ok(EXIT_OK)
            } else {
                Err(Failure(EXIT_INVALID, failures.join("; ")))
            }
        }
        Command::Simulate { config, out: dir, mode, seed, assert_converged } => {
            let mut scenario = load_scenario(&config)?;
            if let Some(seed) = seed {
                scenario.config.seed = seed;
            }
            if let Some(mode) = mode {
                scenario.set_mode(mode.into());
            }
            let controller = scenario.controller().map_err(|e| Failure(EXIT_INVALID, e.to_string()))?;
            let trace = match simulation::run(&scenario.config, &controller, &scenario.target) {
                Ok(trace) => trace,
                Err(e @ (SimError::NonFinite { .. } | SimError::Control { .. })) => {
                    return Err(Failure(EXIT_NOT_CONVERGED, e.to_string()));
                }
                Err(e) => return Err(Failure(EXIT_INVALID, e.to_string())),
            };
            for w in &trace.meta.warnings {
                writeln!(out, "warning: {w}")?;
            }
            let summary = report(&trace, scenario.tolerances).map_err(|e| Failure(EXIT_FAILURE, e.to_string()))?;
            write_trace(&trace, Some(&summary), Some(&scenario.validation), &dir)?;
            writeln!(out, "samples: {}", trace.len())?;
            writeln!(out, "max radial error: {:.3e}", summary.max_radial_error())?;
            writeln!(out, "max spacing error: {:.3e}", summary.max_spacing_error())?;
            writeln!(out, "min pairwise distance: {:.4}", summary.min_pairwise_distance)?;
            writeln!(out, "converged: {}", summary.converged)?;
            writeln!(out, "wrote {}", dir.display())?;
            if assert_converged && !summary.converged {
                return Err(Failure(EXIT_NOT_CONVERGED, "run did not converge".into()));
            }
            Ok(EXIT_OK)
        }
        Command::Probe { config, h_grid, trials, out: dir, seed, t_end, assert_converged } => {
            let scenario = load_scenario(&config)?;
            if !scenario.target.is_static() {
                return Err(Failure(EXIT_INVALID, "probe needs a static target".into()));
            }
            let controller = scenario.controller().map_err(|e| Failure(EXIT_INVALID, e.to_string()))?;
            let settings = ProbeSettings {
                h_grid: h_grid.0,
                trials,
                seed: seed.unwrap_or(scenario.config.seed),
                t_end,
                tolerances: scenario.tolerances,
                ..ProbeSettings::default()
            };
            let rows = sampled_stability_probe(&controller, &settings).map_err(|e| Failure(EXIT_FAILURE, e.to_string()))?;
            fs::create_dir_all(&dir)?;
            let mut w = csv::Writer::from_path(dir.join("probe.csv")).map_err(std::io::Error::from)?;
            w.write_record(["h", "below_bound", "trials", "converged", "fraction", "worst_ratio", "worst_final_error"])
                .map_err(std::io::Error::from)?;
            writeln!(out, "h_max: {:.6}", controller.sampling_bound())?;
            writeln!(out, "{:>10} {:>6} {:>9} {:>12} {:>12}", "h", "below", "fraction", "ratio", "final_err")?;
            for r in &rows {
                let ratio = r.worst_ratio.map_or("nan".to_string(), |x| format!("{x:.6}"));
                writeln!(
                    out,
                    "{:>10.6} {:>6} {:>9.3} {:>12} {:>12.3e}",
                    r.h, r.below_bound, r.fraction, ratio, r.worst_final_error
                )?;
                w.write_record([
                    format!("{:.14e}", r.h),
                    r.below_bound.to_string(),
                    r.trials.to_string(),
                    r.converged.to_string(),
                    format!("{:.14e}", r.fraction),
                    r.worst_ratio.map_or(String::new(), |x| format!("{x:.14e}")),
                    format!("{:.14e}", r.worst_final_error),
                ])
                .map_err(std::io::Error::from)?;
            }
            w.flush()?;
            let failed = rows.iter().any(|r| r.below_bound && r.fraction < 1.0);
            if assert_converged && failed {
                return Err(Failure(EXIT_NOT_CONVERGED, "a period below h_max did not converge in every trial".into()));
            }
            Ok(EXIT_OK)
        }
        Command::Consensus { config, t_end, dt, seed, assert_converged } => {
            if !(t_end >= 0.0 && dt > 0.0) {
                return Err(Failure(EXIT_USAGE, "need t_end >= 0 and dt > 0".into()));
            }
            // only the graph and gains matter here, so invalid formations are allowed
            let scenario = read_scenario(&config)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(scenario.config.seed));
            let pi = std::f64::consts::PI;
            let xi0: Vec<f64> = (0..scenario.topology.len()).map(|_| rng.gen_range(-pi..=pi)).collect();
            let outcome = consensus_check(&scenario.topology, &scenario.params, &xi0, t_end, dt);
            let spanning = scenario.topology.has_directed_spanning_tree();
            writeln!(out, "spanning tree: {}", if spanning { "yes" } else { "no" })?;
            writeln!(out, "final disagreement: {:.6e}", outcome.disagreement)?;
            let agreed = outcome.disagreement < CONSENSUS_TOL;
            writeln!(out, "consensus: {}", if agreed { "reached" } else { "not reached" })?;
            if assert_converged && !agreed {
                return Err(Failure(EXIT_NOT_CONVERGED, "phases did not reach consensus".into()));
            }
            Ok(EXIT_OK)
        }
    }
}
