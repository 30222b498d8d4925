//! Traces, convergence metrics and numerical checks of the stability
//! results: consensus of the phase errors, radial Lyapunov decrease, the
//! sampled-data bound and the accuracy of the first-order polar maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{BranchRule, Controller, ControllerParams};
use crate::geometry::{nearest_branch, wrap_to_pi, Vec2};
use crate::simulation::{self, Mode, SimConfig, SimError, Snapshot, TargetModel, WorldState};
use crate::topology::{check_admissible, FormationSpec, Topology};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("precondition not met: {0}")]
    Precondition(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSeries {
    pub positions: Vec<Vec2>,
    pub rho: Vec<f64>,
    /// Unwrapped angle of the ray target -> agent.
    pub alpha: Vec<f64>,
    /// Coupling function value the agent used at each sample.
    pub coupling: Vec<f64>,
}

/// Angular distance from agent `i` to neighbor `j` (zero-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSeries {
    pub i: usize,
    pub j: usize,
    pub spacing: f64,
    pub alpha_hat: Vec<f64>,
}

impl EdgeSeries {
    pub fn spacing_error(&self, k: usize) -> f64 {
        wrap_to_pi(self.alpha_hat[k] - self.spacing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub mode: Mode,
    pub step: f64,
    /// Integration steps between recorded samples.
    pub stride: usize,
    pub t_end: f64,
    pub seed: u64,
    pub rule: BranchRule,
    pub static_target: bool,
    pub params: ControllerParams,
    pub warnings: Vec<String>,
}

/// Recorded run. Every series shares the `times` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub times: Vec<f64>,
    pub radii: Vec<f64>,
    pub agents: Vec<AgentSeries>,
    pub target_pos: Vec<Vec2>,
    pub target_vel: Vec<Vec2>,
    pub edges: Vec<EdgeSeries>,
    pub min_rho: Vec<f64>,
    pub min_pairwise: Vec<f64>,
    pub meta: TraceMeta,
}

impl SimulationTrace {
    pub(crate) fn new(n: usize, topology: &Topology, spec: &FormationSpec, meta: TraceMeta) -> Self {
        let agent = AgentSeries { positions: vec![], rho: vec![], alpha: vec![], coupling: vec![] };
        let edges = topology
            .edges()
            .into_iter()
            .map(|(i, j, _)| EdgeSeries { i, j, spacing: spec.spacings[&(i, j)], alpha_hat: vec![] })
            .collect();
        Self {
            times: vec![],
            radii: spec.radii.clone(),
            agents: vec![agent; n],
            target_pos: vec![],
            target_vel: vec![],
            edges,
            min_rho: vec![],
            min_pairwise: vec![],
            meta,
        }
    }

    pub(crate) fn push(&mut self, state: &WorldState, snap: &Snapshot) {
        self.times.push(state.time);
        self.target_pos.push(state.target_pos);
        self.target_vel.push(state.target_vel);
        for (i, series) in self.agents.iter_mut().enumerate() {
            let polar = snap.polar[i];
            let alpha = match series.alpha.last() {
                Some(&prev) => nearest_branch(prev, polar.alpha),
                None => polar.alpha,
            };
            series.positions.push(state.agents[i]);
            series.rho.push(polar.rho);
            series.alpha.push(alpha);
            series.coupling.push(snap.coupling[i]);
        }
        for (edge, &a) in self.edges.iter_mut().zip(&snap.alpha_hat) {
            edge.alpha_hat.push(a);
        }
        self.min_rho.push(snap.polar.iter().map(|p| p.rho).fold(f64::INFINITY, f64::min));
        let mut closest = f64::INFINITY;
        for a in 0..state.agents.len() {
            for b in a + 1..state.agents.len() {
                closest = closest.min(state.agents[a].distance(state.agents[b]));
            }
        }
        self.min_pairwise.push(closest);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Largest radial or spacing error at sample `k`.
    pub fn max_error(&self, k: usize) -> f64 {
        let radial = self
            .agents
            .iter()
            .zip(&self.radii)
            .map(|(a, r)| (a.rho[k] - r).abs())
            .fold(0.0, f64::max);
        let spacing = self.edges.iter().map(|e| e.spacing_error(k).abs()).fold(0.0, f64::max);
        radial.max(spacing)
    }

    pub fn error_series(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.max_error(k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub radial: f64,
    pub angular: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { radial: 1e-3, angular: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialError {
    /// One-based agent id.
    pub agent: usize,
    pub final_error: f64,
    pub time_to_tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacingError {
    /// One-based ids; agent `i` measures agent `j`.
    pub i: usize,
    pub j: usize,
    pub final_error: f64,
    pub time_to_tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub tolerances: Tolerances,
    pub radial_errors: Vec<RadialError>,
    pub spacing_errors: Vec<SpacingError>,
    /// Least-squares slope of each agent's unwrapped angle over the final window.
    pub steady_angular_rate: Vec<Option<f64>>,
    pub expected_angular_rate: f64,
    pub rate_window: [f64; 2],
    pub window_shrunk: bool,
    pub min_pairwise_distance: f64,
    pub min_rho: f64,
    pub converged: bool,
}

impl ConvergenceReport {
    pub fn max_radial_error(&self) -> f64 {
        self.radial_errors.iter().map(|e| e.final_error).fold(0.0, f64::max)
    }

    pub fn max_spacing_error(&self) -> f64 {
        self.spacing_errors.iter().map(|e| e.final_error).fold(0.0, f64::max)
    }

    /// Worst relative deviation of the steady rates from `lambda mu c`.
    pub fn worst_rate_deviation(&self) -> Option<f64> {
        let expected = self.expected_angular_rate;
        self.steady_angular_rate
            .iter()
            .map(|r| r.map(|r| ((r - expected) / expected).abs()))
            .try_fold(0.0, |acc: f64, r| r.map(|r| acc.max(r)))
    }
}

/// First time after which `errors` stays below `tol`.
fn time_to_tolerance(times: &[f64], errors: impl Iterator<Item = f64>, tol: f64) -> Option<f64> {
    let errors: Vec<f64> = errors.collect();
    match errors.iter().rposition(|&e| !(e < tol)) {
        None => times.first().copied(),
        Some(k) if k + 1 < times.len() => Some(times[k + 1]),
        Some(_) => None,
    }
}

/// Ordinary least-squares slope of `y` against `x`.
pub fn least_squares_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Convergence summary of a trace against the desired formation.
///
/// Angular errors are wrapped to `(-pi, pi]` before taking magnitudes. The
/// steady angular rate uses the final 10% of the run; with fewer than two
/// samples in that window the last two samples are used instead and
/// `window_shrunk` is set.
pub fn report(trace: &SimulationTrace, tolerances: Tolerances) -> Result<ConvergenceReport, AnalysisError> {
    let last = trace.len().checked_sub(1).ok_or(AnalysisError::Precondition("empty trace".into()))?;
    let times = &trace.times;

    let radial_errors: Vec<RadialError> = trace
        .agents
        .iter()
        .zip(&trace.radii)
        .enumerate()
        .map(|(i, (series, &r))| RadialError {
            agent: i + 1,
            final_error: (series.rho[last] - r).abs(),
            time_to_tolerance: time_to_tolerance(times, series.rho.iter().map(|p| (p - r).abs()), tolerances.radial),
        })
        .collect();
    let spacing_errors: Vec<SpacingError> = trace
        .edges
        .iter()
        .map(|e| SpacingError {
            i: e.i + 1,
            j: e.j + 1,
            final_error: e.spacing_error(last).abs(),
            time_to_tolerance: time_to_tolerance(
                times,
                (0..trace.len()).map(|k| e.spacing_error(k).abs()),
                tolerances.angular,
            ),
        })
        .collect();

    let (t0, t1) = (times[0], times[last]);
    let window_start = t1 - 0.1 * (t1 - t0);
    let mut first = times.partition_point(|&t| t < window_start);
    let mut window_shrunk = false;
    if last + 1 - first < 2 {
        window_shrunk = true;
        first = last.saturating_sub(1);
    }
    let steady_angular_rate = trace
        .agents
        .iter()
        .map(|a| least_squares_slope(&times[first..], &a.alpha[first..]))
        .collect();

    let converged = radial_errors.iter().all(|e| e.final_error < tolerances.radial)
        && spacing_errors.iter().all(|e| e.final_error < tolerances.angular);
    Ok(ConvergenceReport {
        tolerances,
        radial_errors,
        spacing_errors,
        steady_angular_rate,
        expected_angular_rate: trace.meta.params.steady_angular_rate(),
        rate_window: [times[first], t1],
        window_shrunk,
        min_pairwise_distance: trace.min_pairwise.iter().copied().fold(f64::INFINITY, f64::min),
        min_rho: trace.min_rho.iter().copied().fold(f64::INFINITY, f64::min),
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOutcome {
    pub final_state: Vec<f64>,
    /// `max |xi_j - xi_i|` over all pairs at `t_end`.
    pub disagreement: f64,
}

/// Integrates the phase-error system `xi_i' = lambda mu^2 sum_j a_ij tanh(xi_j - xi_i)`
/// with RK4 and reports the final disagreement. It vanishes exactly when
/// the graph has a directed spanning tree.
pub fn consensus_check(
    topology: &Topology,
    params: &ControllerParams,
    initial: &[f64],
    t_end: f64,
    dt: f64,
) -> ConsensusOutcome {
    let n = topology.len();
    let gain = params.lambda * params.mu * params.mu;
    let edges = topology.edges();
    let rhs = |xi: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(i, j, a) in &edges {
            out[i] += gain * a * (xi[j] - xi[i]).tanh();
        }
        out
    };
    let mut xi = initial.to_vec();
    let steps = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    let mut t = 0.0;
    for _ in 0..steps {
        let h = dt.min(t_end - t);
        let axpy = |k: &[f64], s: f64| xi.iter().zip(k).map(|(a, b)| a + s * b).collect::<Vec<_>>();
        let k1 = rhs(&xi);
        let k2 = rhs(&axpy(&k1, h / 2.0));
        let k3 = rhs(&axpy(&k2, h / 2.0));
        let k4 = rhs(&axpy(&k3, h));
        for m in 0..n {
            xi[m] += h / 6.0 * (k1[m] + 2.0 * k2[m] + 2.0 * k3[m] + k4[m]);
        }
        t += h;
    }
    let hi = xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = xi.iter().copied().fold(f64::INFINITY, f64::min);
    ConsensusOutcome { disagreement: hi - lo, final_state: xi }
}

/// `e_k ~ C r^k` fitted by least squares on `ln e_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricFit {
    pub scale: f64,
    pub ratio: f64,
}

/// Samples at or below `floor` (rounding noise) are excluded from the fit.
pub fn geometric_fit(errors: &[f64], floor: f64) -> Option<GeometricFit> {
    let (ks, logs): (Vec<f64>, Vec<f64>) = errors
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > floor)
        .map(|(k, &e)| (k as f64, e.ln()))
        .unzip();
    let slope = least_squares_slope(&ks, &logs)?;
    let n = ks.len() as f64;
    let intercept = (logs.iter().sum::<f64>() - slope * ks.iter().sum::<f64>()) / n;
    Some(GeometricFit { scale: intercept.exp(), ratio: slope.exp() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub h_grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub t_end: f64,
    /// Relative radial perturbation bound.
    pub radial_perturbation: f64,
    /// Angular perturbation bound in radians.
    pub angular_perturbation: f64,
    pub tolerances: Tolerances,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            h_grid: vec![],
            trials: 10,
            seed: 0,
            t_end: 200.0,
            radial_perturbation: 0.1,
            angular_perturbation: 0.1,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub h: f64,
    pub below_bound: bool,
    pub trials: usize,
    pub converged: usize,
    pub fraction: f64,
    /// Largest fitted per-sample contraction ratio across trials.
    pub worst_ratio: Option<f64>,
    /// Largest final error across trials.
    pub worst_final_error: f64,
}

/// Initial positions within the stated perturbation of the desired
/// formation (random overall rotation), one draw per trial.
pub fn perturbed_formation(
    spec: &FormationSpec,
    certificate: &[f64],
    target: Vec2,
    settings: &ProbeSettings,
    trial_seed: u64,
) -> Vec<Vec2> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    spec.radii
        .iter()
        .zip(certificate)
        .map(|(&r, &d)| {
            let rho = r * (1.0 + rng.gen_range(-settings.radial_perturbation..=settings.radial_perturbation));
            let alpha = d + phase + rng.gen_range(-settings.angular_perturbation..=settings.angular_perturbation);
            target + Vec2::from_angle(alpha) * rho
        })
        .collect()
}

/// Seed of trial `k`, derived deterministically from the master seed.
pub fn trial_seed(master: u64, k: usize) -> u64 {
    master ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the sampled-data loop with a static target from perturbed
/// equilibria, for every sampling period in the grid.
pub fn sampled_stability_probe(controller: &Controller, settings: &ProbeSettings) -> Result<Vec<ProbeRow>, AnalysisError> {
    let certificate = check_admissible(controller.spec(), controller.topology()).map_err(SimError::from)?;
    let target = TargetModel::Static { position: Vec2::ZERO };
    let h_max = controller.sampling_bound();
    let mut rows = Vec::with_capacity(settings.h_grid.len());
    for &h in &settings.h_grid {
        if !(h > 0.0 && h.is_finite()) {
            return Err(AnalysisError::Precondition(format!("sampling period must be positive, got {h}")));
        }
        let sampled = controller.clone().with_sampling_period(h).map_err(|e| AnalysisError::Precondition(e.to_string()))?;
        let mut converged = 0;
        let mut worst_ratio: Option<f64> = None;
        let mut worst_final_error: f64 = 0.0;
        for k in 0..settings.trials {
            let seed = trial_seed(settings.seed, k);
            let config = SimConfig {
                mode: Mode::Sampled,
                h,
                t_end: settings.t_end,
                output_every: h,
                seed,
                initial_positions: Some(perturbed_formation(sampled.spec(), &certificate, Vec2::ZERO, settings, seed)),
                ..SimConfig::default()
            };
            let outcome = simulation::run(&config, &sampled, &target);
            let trace = match outcome {
                Ok(trace) => trace,
                Err(SimError::NonFinite { .. }) | Err(SimError::Control { .. }) => {
                    worst_final_error = f64::INFINITY;
                    worst_ratio = Some(f64::INFINITY);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let summary = report(&trace, settings.tolerances)?;
            let errors = trace.error_series();
            worst_final_error = worst_final_error.max(*errors.last().unwrap());
            if summary.converged {
                converged += 1;
            }
            let ratio = geometric_fit(&errors, 1e-13).map_or(f64::INFINITY, |fit| fit.ratio);
            worst_ratio = Some(worst_ratio.map_or(ratio, |w| w.max(ratio)));
        }
        rows.push(ProbeRow {
            h,
            below_bound: h < h_max,
            trials: settings.trials,
            converged,
            fraction: if settings.trials == 0 { 0.0 } else { converged as f64 / settings.trials as f64 },
            worst_ratio,
            worst_final_error,
        });
    }
    Ok(rows)
}

/// `W_i = (R_i^2 - rho_i^2)^2` per agent and sample.
pub fn lyapunov_traces(trace: &SimulationTrace) -> Result<Vec<Vec<f64>>, AnalysisError> {
    if trace.meta.mode != Mode::Continuous || !trace.meta.static_target {
        return Err(AnalysisError::Precondition("needs a continuous-mode run with a static target".into()));
    }
    Ok(trace
        .agents
        .iter()
        .zip(&trace.radii)
        .map(|(a, &r)| a.rho.iter().map(|p| (r * r - p * p).powi(2)).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepGap {
    pub time: f64,
    pub rho_gap: f64,
    pub alpha_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDiscrepancy {
    /// Largest gap over agents at each step.
    pub steps: Vec<StepGap>,
    /// Largest `[rho, alpha]` gap over steps for each agent.
    pub per_agent: Vec<[f64; 2]>,
    pub max_rho_gap: f64,
    pub max_alpha_gap: f64,
}

/// Compares each exact sampled update in the trace with the first-order
/// polar maps `rho + h gamma lambda rho (R^2 - rho^2) f` and
/// `alpha + h lambda mu f`, both evaluated on the sample at `kh`.
pub fn polar_map_discrepancy(trace: &SimulationTrace) -> Result<MapDiscrepancy, AnalysisError> {
    let meta = &trace.meta;
    if meta.mode != Mode::Sampled || meta.stride != 1 || !meta.static_target {
        return Err(AnalysisError::Precondition(
            "needs a sampled run with a static target recorded at every sample".into(),
        ));
    }
    let p = &meta.params;
    let h = meta.step;
    let mut steps = Vec::with_capacity(trace.len().saturating_sub(1));
    let mut per_agent = vec![[0.0f64; 2]; trace.agents.len()];
    for k in 0..trace.len().saturating_sub(1) {
        let mut rho_gap: f64 = 0.0;
        let mut alpha_gap: f64 = 0.0;
        for ((series, &r), worst) in trace.agents.iter().zip(&trace.radii).zip(&mut per_agent) {
            let (rho, alpha, f) = (series.rho[k], series.alpha[k], series.coupling[k]);
            let rho_map = rho + h * p.gamma * p.lambda * rho * (r * r - rho * rho) * f;
            let alpha_map = alpha + h * p.lambda * p.mu * f;
            let gap_r = (series.rho[k + 1] - rho_map).abs();
            let gap_a = wrap_to_pi(series.alpha[k + 1] - alpha_map).abs();
            worst[0] = worst[0].max(gap_r);
            worst[1] = worst[1].max(gap_a);
            rho_gap = rho_gap.max(gap_r);
            alpha_gap = alpha_gap.max(gap_a);
        }
        steps.push(StepGap { time: trace.times[k], rho_gap, alpha_gap });
    }
    let max_rho_gap = steps.iter().map(|s| s.rho_gap).fold(0.0, f64::max);
    let max_alpha_gap = steps.iter().map(|s| s.alpha_gap).fold(0.0, f64::max);
    Ok(MapDiscrepancy { steps, per_agent, max_rho_gap, max_alpha_gap })
}

/// Radius at which the exact zero-order-hold loop settles once the
/// spacings are met (`f = c`). The held chord update scales the radius by
/// `sqrt((1 + h lambda gamma c l)^2 + (h lambda c mu)^2)`, which equals one
/// only for `l = R^2 - rho^2 < 0`, so the settled radius lies slightly
/// outside `R`. `None` when `|h lambda c mu| >= 1`.
pub fn sampled_equilibrium_radius(radius: f64, params: &ControllerParams, h: f64) -> Option<f64> {
    let tangential = h * params.lambda * params.c * params.mu;
    if tangential.abs() >= 1.0 {
        return None;
    }
    let l = ((1.0 - tangential * tangential).sqrt() - 1.0) / (h * params.lambda * params.gamma * params.c);
    Some((radius * radius - l).sqrt())
}
