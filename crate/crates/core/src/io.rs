//! Scenario files and trace output.
//!
//! Scenarios are TOML documents with the sections `topology`, `formation`,
//! `params`, and the optional `target`, `init` and `tolerances`. Agent ids
//! in files are one-based. Angles are radians unless written as a string
//! with a `deg` suffix, e.g. `"51.4deg"`.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Spanned;

use crate::analysis::{ConvergenceReport, SimulationTrace, TraceMeta, Tolerances};
use crate::controller::{self, BranchRule, ControlError, Controller, ControllerParams};
use crate::geometry::{wrap_to_pi, Vec2};
use crate::simulation::{InitBox, Mode, SimConfig, TargetModel};
use crate::topology::{check_admissible, gain_lower_bound, FormationSpec, Topology, ADMISSIBILITY_TOL};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{origin}:{line}: {message}")]
    Parse { origin: String, line: usize, message: String },
    #[error("{origin}:{line}: {message}")]
    Invalid { origin: String, line: usize, message: String },
    #[error("{origin}: validation failed: {}", failures.join("; "))]
    Validation {
        origin: String,
        failures: Vec<String>,
        record: Box<ValidationRecord>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<String>,
    description: Option<String>,
    topology: Spanned<RawTopology>,
    formation: Spanned<RawFormation>,
    params: Spanned<RawParams>,
    target: Option<Spanned<TargetModel>>,
    init: Option<Spanned<RawInit>>,
    tolerances: Option<Tolerances>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTopology {
    n: usize,
    #[serde(default)]
    ring: bool,
    #[serde(default)]
    edges: Vec<RawEdge>,
}

/// Agent `to` measures agent `from`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    from: usize,
    to: usize,
    #[serde(default = "unit_weight")]
    weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFormation {
    radii: Vec<f64>,
    certificate: Option<Vec<Angle>>,
    spacings: Option<Vec<RawSpacing>>,
}

/// Desired angle from agent `i` to agent `j`, where `i` measures `j`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpacing {
    i: usize,
    j: usize,
    d: Angle,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Angle {
    Radians(f64),
    Text(String),
}

impl Angle {
    fn radians(&self) -> Result<f64, String> {
        match self {
            Angle::Radians(x) => Ok(*x),
            Angle::Text(s) => s
                .trim()
                .strip_suffix("deg")
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(f64::to_radians)
                .ok_or_else(|| format!("angle {s:?} is neither a number of radians nor a `deg`-suffixed string")),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    lambda: f64,
    gamma: f64,
    mu: f64,
    c: f64,
    #[serde(default)]
    mode: Mode,
    dt: Option<f64>,
    h: Option<f64>,
    t_end: Option<f64>,
    output_every: Option<f64>,
    #[serde(default)]
    rule: BranchRule,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInit {
    seed: Option<u64>,
    /// `[x_min, x_max, y_min, y_max]`.
    #[serde(rename = "box")]
    bounds: Option<[f64; 4]>,
    min_separation: Option<f64>,
    positions: Option<Vec<[f64; 2]>>,
}

/// Outcome of every standing condition on a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Phase vector that generates the spacings, root phase 0.
    pub certificate: Option<Vec<f64>>,
    pub admissibility_error: Option<String>,
    pub spanning_tree: bool,
    /// One-based id of the lowest-index root, if any.
    pub spanning_root: Option<usize>,
    pub max_in_degree: f64,
    pub gain_bound: f64,
    pub c: f64,
    pub gain_ok: bool,
    /// Upper bound of the coupling function, `c + |mu| d_max`.
    pub coupling_bound: f64,
    pub sampling_bound: f64,
    pub sampling_period: Option<f64>,
    pub below_sampling_bound: Option<bool>,
    pub notes: Vec<String>,
}

impl ValidationRecord {
    pub fn evaluate(
        topology: &Topology,
        spec: &FormationSpec,
        params: &ControllerParams,
        mode: Mode,
        target: &TargetModel,
    ) -> Self {
        let admissible = check_admissible(spec, topology);
        let d_max = topology.degree_stats().d_max;
        let gain_bound = gain_lower_bound(topology, params.mu);
        let sampling_bound = controller::sampling_bound(spec, topology, params);
        let sampling_period = (mode == Mode::Sampled).then_some(params.h).flatten();
        let below = sampling_period.map(|h| h < sampling_bound);
        let mut notes = Vec::new();
        if below == Some(false) {
            notes.push(format!(
                "sampling period {} is not below the sufficient bound {sampling_bound:.6}; stability is not guaranteed",
                sampling_period.unwrap_or_default()
            ));
        }
        if mode == Mode::Sampled && !target.is_static() {
            notes.push("sampled control of a moving target is outside the proven static-target regime".into());
        }
        Self {
            certificate: admissible.as_ref().ok().cloned(),
            admissibility_error: admissible.err().map(|e| e.to_string()),
            spanning_tree: topology.has_directed_spanning_tree(),
            spanning_root: topology.spanning_root().map(|r| r + 1),
            max_in_degree: d_max,
            gain_bound,
            c: params.c,
            gain_ok: params.c > gain_bound,
            coupling_bound: params.c + params.mu.abs() * d_max,
            sampling_bound,
            sampling_period,
            below_sampling_bound: below,
            notes,
        }
    }

    /// Violated conditions, each naming the condition.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(e) = &self.admissibility_error {
            out.push(e.clone());
        }
        if !self.spanning_tree {
            out.push("spanning tree: the interaction graph has no directed spanning tree".into());
        }
        if !self.gain_ok {
            out.push(format!(
                "gain bound: c = {} must exceed |mu| * max in-degree = {}",
                self.c, self.gain_bound
            ));
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Everything needed to run one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: Option<String>,
    pub description: Option<String>,
    pub topology: Topology,
    pub spec: FormationSpec,
    /// `h` is set exactly when the mode is sampled.
    pub params: ControllerParams,
    pub rule: BranchRule,
    pub target: TargetModel,
    pub config: SimConfig,
    pub tolerances: Tolerances,
    pub validation: ValidationRecord,
}

impl Scenario {
    pub fn controller(&self) -> Result<Controller, ControlError> {
        Controller::new(self.params, self.spec.clone(), self.topology.clone(), self.rule)
    }

    /// Switches mode and recomputes the validation record.
    pub fn set_mode(&mut self, mode: Mode) {
        self.config.mode = mode;
        self.params.h = (mode == Mode::Sampled).then_some(self.config.h);
        self.revalidate();
    }

    pub fn revalidate(&mut self) {
        self.validation =
            ValidationRecord::evaluate(&self.topology, &self.spec, &self.params, self.config.mode, &self.target);
    }
}

fn line_of(src: &str, span: Range<usize>) -> usize {
    src[..span.start.min(src.len())].matches('\n').count() + 1
}

/// Parses a scenario and evaluates, without enforcing, its validation record.
pub fn parse_scenario(src: &str, origin: &str) -> Result<Scenario, ScenarioError> {
    let raw: RawScenario = toml::from_str(src).map_err(|e| ScenarioError::Parse {
        origin: origin.to_string(),
        line: e.span().map_or(0, |s| line_of(src, s)),
        message: e.message().trim().to_string(),
    })?;
    let invalid = |span: Range<usize>, message: String| ScenarioError::Invalid {
        origin: origin.to_string(),
        line: line_of(src, span),
        message,
    };

    let topo_span = raw.topology.span();
    let rt = raw.topology.into_inner();
    if rt.ring && !rt.edges.is_empty() {
        return Err(invalid(topo_span, "topology: give either `ring = true` or `edges`, not both".into()));
    }
    let topology = if rt.ring {
        Topology::directed_ring(rt.n)
    } else {
        if let Some(e) = rt.edges.iter().find(|e| e.from == 0 || e.to == 0) {
            return Err(invalid(topo_span, format!("topology: edge {}->{} uses id 0; ids are one-based", e.from, e.to)));
        }
        let edges: Vec<_> = rt.edges.iter().map(|e| (e.from - 1, e.to - 1, e.weight)).collect();
        Topology::from_edges(rt.n, &edges)
    }
    .map_err(|e| invalid(topo_span.clone(), format!("topology: {e}")))?;

    let form_span = raw.formation.span();
    let rf = raw.formation.into_inner();
    let angle = |a: &Angle| a.radians().map_err(|m| invalid(form_span.clone(), format!("formation: {m}")));
    let spec = match (rf.certificate, rf.spacings) {
        (None, None) => {
            return Err(invalid(form_span, "formation: give `certificate` or `spacings`".into()));
        }
        (Some(cert), given) => {
            let phases = cert.iter().map(angle).collect::<Result<Vec<_>, _>>()?;
            if phases.len() != topology.len() {
                return Err(invalid(
                    form_span,
                    format!("formation: certificate has {} entries, expected {}", phases.len(), topology.len()),
                ));
            }
            let spec = FormationSpec::from_certificate(rf.radii, phases, &topology);
            for s in given.iter().flatten() {
                let d = angle(&s.d)?;
                let implied = (s.i >= 1 && s.j >= 1).then(|| spec.spacing(s.i - 1, s.j - 1)).flatten();
                match implied {
                    Some(v) if wrap_to_pi(v - d).abs() <= ADMISSIBILITY_TOL => {}
                    _ => {
                        return Err(invalid(
                            form_span,
                            format!("formation: spacing d_{}{} = {d} disagrees with the certificate", s.i, s.j),
                        ))
                    }
                }
            }
            spec
        }
        (None, Some(given)) => {
            let mut spacings = std::collections::BTreeMap::new();
            for s in &given {
                if s.i == 0 || s.j == 0 {
                    return Err(invalid(form_span, "formation: spacing ids are one-based".into()));
                }
                spacings.insert((s.i - 1, s.j - 1), angle(&s.d)?);
            }
            FormationSpec { radii: rf.radii, spacings, certificate: None }
        }
    };
    if spec.radii.len() != topology.len() {
        return Err(invalid(
            form_span,
            format!("formation: {} radii given for {} agents", spec.radii.len(), topology.len()),
        ));
    }

    let params_span = raw.params.span();
    let rp = raw.params.into_inner();
    let defaults = SimConfig::default();
    let mut config = SimConfig {
        mode: rp.mode,
        dt: rp.dt.unwrap_or(defaults.dt),
        h: rp.h.unwrap_or(defaults.h),
        t_end: rp.t_end.unwrap_or(defaults.t_end),
        output_every: rp.output_every.unwrap_or(defaults.output_every),
        ..defaults
    };
    let params = ControllerParams {
        lambda: rp.lambda,
        gamma: rp.gamma,
        mu: rp.mu,
        c: rp.c,
        h: (rp.mode == Mode::Sampled).then_some(config.h),
    };
    params.validate().map_err(|e| invalid(params_span.clone(), format!("params: {e}")))?;
    for (what, v) in [("dt", config.dt), ("h", config.h), ("output_every", config.output_every)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(params_span, format!("params: {what} must be positive, got {v}")));
        }
    }
    if !(config.t_end.is_finite() && config.t_end >= 0.0) {
        return Err(invalid(params_span, format!("params: t_end must be non-negative, got {}", config.t_end)));
    }

    if let Some(init) = raw.init {
        let span = init.span();
        let ri = init.into_inner();
        if let Some(seed) = ri.seed {
            config.seed = seed;
        }
        if let Some([x_min, x_max, y_min, y_max]) = ri.bounds {
            if !(x_max > x_min && y_max > y_min) {
                return Err(invalid(span, "init: box must be [x_min, x_max, y_min, y_max] with min < max".into()));
            }
            config.init_box = InitBox { x_min, x_max, y_min, y_max };
        }
        if let Some(sep) = ri.min_separation {
            if !(sep > 0.0) {
                return Err(invalid(span, "init: min_separation must be positive".into()));
            }
            config.min_separation = sep;
        }
        if let Some(positions) = ri.positions {
            if positions.len() != topology.len() {
                return Err(invalid(
                    span,
                    format!("init: {} positions given for {} agents", positions.len(), topology.len()),
                ));
            }
            config.initial_positions = Some(positions.iter().map(|&[x, y]| Vec2::new(x, y)).collect());
        }
    }

    let target = raw.target.map(Spanned::into_inner).unwrap_or_default();
    let validation = ValidationRecord::evaluate(&topology, &spec, &params, config.mode, &target);
    Ok(Scenario {
        name: raw.name,
        description: raw.description,
        topology,
        spec,
        params,
        rule: rp.rule,
        target,
        config,
        tolerances: raw.tolerances.unwrap_or_default(),
        validation,
    })
}

/// Reads, parses and validates a scenario file. Fails if any standing
/// condition is violated.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let scenario = read_scenario(path)?;
    let failures = scenario.validation.failures();
    if failures.is_empty() {
        Ok(scenario)
    } else {
        Err(ScenarioError::Validation {
            origin: path.display().to_string(),
            failures,
            record: Box::new(scenario.validation),
        })
    }
}

/// Reads and parses a scenario file without enforcing its validation record.
pub fn read_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let src = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    parse_scenario(&src, &path.display().to_string())
}

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// 15 significant digits.
fn num(x: f64) -> String {
    format!("{x:.14e}")
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    samples: usize,
    report: Option<&'a ConvergenceReport>,
    validation: Option<&'a ValidationRecord>,
    meta: &'a TraceMeta,
}

/// Writes the trajectory table, the edge table and the JSON summary into
/// `dir`, creating it if needed.
pub fn write_trace(
    trace: &SimulationTrace,
    report: Option<&ConvergenceReport>,
    validation: Option<&ValidationRecord>,
    dir: &Path,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(TRAJECTORY_FILE))?));
    w.write_record(["t", "agent_id", "x", "y", "rho", "alpha"])?;
    for (k, &t) in trace.times.iter().enumerate() {
        let p = trace.target_pos[k];
        w.write_record([num(t), "0".into(), num(p.x), num(p.y), num(0.0), num(0.0)])?;
        for (i, a) in trace.agents.iter().enumerate() {
            let p = a.positions[k];
            w.write_record([num(t), (i + 1).to_string(), num(p.x), num(p.y), num(a.rho[k]), num(a.alpha[k])])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(EDGES_FILE))?));
    w.write_record(["t", "i", "j", "alpha_hat", "spacing_error"])?;
    for (k, &t) in trace.times.iter().enumerate() {
        for e in &trace.edges {
            w.write_record([
                num(t),
                (e.i + 1).to_string(),
                (e.j + 1).to_string(),
                num(e.alpha_hat[k]),
                num(e.spacing_error(k)),
            ])?;
        }
    }
    w.flush()?;

    let summary = Summary { samples: trace.len(), report, validation, meta: &trace.meta };
    let mut out = BufWriter::new(File::create(dir.join(SUMMARY_FILE))?);
    serde_json::to_writer_pretty(&mut out, &summary)?;
    out.write_all(b"\n")?;
    out.flush()
}

/// One row of the trajectory table. Target rows have `agent_id == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub agent_id: usize,
    pub x: f64,
    pub y: f64,
    pub rho: f64,
    pub alpha: f64,
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}
