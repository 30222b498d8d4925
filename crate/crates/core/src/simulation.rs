//! Closed-loop time stepping for the N-agent system, target trajectories,
//! and a polar-coordinate integrator used to cross-check the engine.


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{SimulationTrace, TraceMeta};
use crate::controller::{BranchRule, ControlError, Controller, ControllerParams, LocalMeasurement, PhaseMemory};
use crate::geometry::{self, nearest_branch, wrap_to_pi, wrap_to_tau, PolarState, Vec2};
use crate::topology::{check_admissible, FormationSpec, Inadmissible, Topology};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("t = {time}: {source}")]
    Control {
        time: f64,
        #[source]
        source: ControlError,
    },
    #[error("t = {time}: state became non-finite")]
    NonFinite { time: f64 },
    #[error(transparent)]
    Inadmissible(#[from] Inadmissible),
    #[error("interaction graph has no directed spanning tree")]
    NoSpanningTree,
    #[error("invalid simulation config: {0}")]
    Config(String),
}

/// Trajectory of the (possibly moving) target. Velocities are the exact
/// time derivatives of the positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetModel {
    Static {
        position: Vec2,
    },
    ConstantVelocity {
        start: Vec2,
        velocity: Vec2,
    },
    /// `(x0 + v t, y0 + A sin(w t))`.
    Sinusoid {
        start: Vec2,
        speed: f64,
        amplitude: f64,
        omega: f64,
    },
    /// Visits the points in order at constant speed, then stops at the last.
    Waypoints {
        points: Vec<Vec2>,
        speed: f64,
    },
}

impl Default for TargetModel {
    fn default() -> Self {
        TargetModel::Static { position: Vec2::ZERO }
    }
}

impl TargetModel {
    pub fn default_sinusoid() -> Self {
        TargetModel::Sinusoid { start: Vec2::ZERO, speed: 0.1, amplitude: 1.0, omega: 0.2 }
    }

    pub fn is_static(&self) -> bool {
        match self {
            TargetModel::Static { .. } => true,
            TargetModel::ConstantVelocity { velocity, .. } => *velocity == Vec2::ZERO,
            TargetModel::Sinusoid { speed, amplitude, omega, .. } => {
                *speed == 0.0 && (*amplitude == 0.0 || *omega == 0.0)
            }
            TargetModel::Waypoints { points, speed } => points.len() < 2 || *speed == 0.0,
        }
    }

    /// Position and velocity at time `t`.
    pub fn state(&self, t: f64) -> (Vec2, Vec2) {
        match self {
            TargetModel::Static { position } => (*position, Vec2::ZERO),
            TargetModel::ConstantVelocity { start, velocity } => (*start + *velocity * t, *velocity),
            TargetModel::Sinusoid { start, speed, amplitude, omega } => {
                let (s, c) = (omega * t).sin_cos();
                (
                    Vec2::new(start.x + speed * t, start.y + amplitude * s),
                    Vec2::new(*speed, amplitude * omega * c),
                )
            }
            TargetModel::Waypoints { points, speed } => waypoint_state(points, *speed, t),
        }
    }
}

fn waypoint_state(points: &[Vec2], speed: f64, t: f64) -> (Vec2, Vec2) {
    let Some(&first) = points.first() else {
        return (Vec2::ZERO, Vec2::ZERO);
    };
    if speed <= 0.0 {
        return (first, Vec2::ZERO);
    }
    let mut remaining = speed * t.max(0.0);
    for pair in points.windows(2) {
        let leg = pair[1] - pair[0];
        let length = leg.norm();
        if length == 0.0 {
            continue;
        }
        if remaining < length {
            let dir = leg * (1.0 / length);
            return (pair[0] + dir * remaining, dir * speed);
        }
        remaining -= length;
    }
    (*points.last().unwrap(), Vec2::ZERO)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Continuous,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl InitBox {
    /// Square of side `side` centered on `center`.
    pub fn centered(center: Vec2, side: f64) -> Self {
        let h = side / 2.0;
        Self { x_min: center.x - h, x_max: center.x + h, y_min: center.y - h, y_max: center.y + h }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: Mode,
    /// RK4 step for continuous mode.
    pub dt: f64,
    /// Sampling period for sampled mode.
    pub h: f64,
    pub t_end: f64,
    /// Output cadence in seconds; rounded to a whole number of steps.
    pub output_every: f64,
    pub seed: u64,
    pub init_box: InitBox,
    pub min_separation: f64,
    /// Fixed initial positions; overrides random placement.
    pub initial_positions: Option<Vec<Vec2>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Continuous,
            dt: 1e-3,
            h: 0.1,
            t_end: 100.0,
            output_every: 0.1,
            seed: 0,
            init_box: InitBox::centered(Vec2::ZERO, 10.0),
            min_separation: 0.1,
            initial_positions: None,
        }
    }
}

impl SimConfig {
    pub fn step(&self) -> f64 {
        match self.mode {
            Mode::Continuous => self.dt,
            Mode::Sampled => self.h,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let step = self.step();
        if !(step.is_finite() && step > 0.0) {
            return Err(SimError::Config(format!("step must be positive, got {step}")));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(SimError::Config(format!("t_end must be non-negative, got {}", self.t_end)));
        }
        if !(self.output_every > 0.0) {
            return Err(SimError::Config("output_every must be positive".into()));
        }
        let b = &self.init_box;
        if !(b.x_max > b.x_min && b.y_max > b.y_min) {
            return Err(SimError::Config("init box is empty".into()));
        }
        if !(self.min_separation > 0.0) {
            return Err(SimError::Config("min_separation must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub time: f64,
    pub agents: Vec<Vec2>,
    pub target_pos: Vec2,
    pub target_vel: Vec2,
}

impl WorldState {
    pub fn at(time: f64, agents: Vec<Vec2>, target: &TargetModel) -> Self {
        let (target_pos, target_vel) = target.state(time);
        Self { time, agents, target_pos, target_vel }
    }
}

/// Uniform placement in the box, redrawing any agent that lands within
/// `min_separation` of the target. Agents may coincide with each other.
pub fn random_positions(config: &SimConfig, n: usize, target_pos: Vec2) -> Vec<Vec2> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let b = config.init_box;
    (0..n)
        .map(|_| loop {
            let p = Vec2::new(rng.gen_range(b.x_min..b.x_max), rng.gen_range(b.y_min..b.y_max));
            if p.distance(target_pos) >= config.min_separation {
                break p;
            }
        })
        .collect()
}

/// Instantaneous per-agent quantities recorded into traces.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub polar: Vec<PolarState>,
    pub coupling: Vec<f64>,
    /// Continuous angular distance per edge, in `topology.edges()` order.
    pub alpha_hat: Vec<f64>,
}

/// Steps the closed loop. Each agent keeps its own [`PhaseMemory`].
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    controller: &'a Controller,
    target: &'a TargetModel,
    memories: Vec<PhaseMemory>,
    /// Continuous-law velocities of the last committed state.
    committed: Option<(WorldState, Vec<Vec2>)>,
}

impl<'a> Simulator<'a> {
    pub fn new(controller: &'a Controller, target: &'a TargetModel, initial: &WorldState) -> Result<Self, SimError> {
        let mut sim = Self {
            controller,
            target,
            memories: vec![PhaseMemory::new(); initial.agents.len()],
            committed: None,
        };
        sim.commit(initial)?;
        Ok(sim)
    }

    pub fn controller(&self) -> &Controller {
        self.controller
    }

    fn control_err(time: f64) -> impl Fn(ControlError) -> SimError {
        move |source| SimError::Control { time, source }
    }

    /// Continuous-law command of agent `i`, rotated to the global frame.
    fn agent_velocity(&self, i: usize, meas: &LocalMeasurement, agents: &[Vec2], p0: Vec2) -> Result<Vec2, ControlError> {
        let local = self.controller.continuous_control(i, meas, &self.memories[i])?;
        let phi = geometry::frame_rotation(agents[i], p0).map_err(|source| ControlError::Geometry { agent: i + 1, source })?;
        Ok(phi.transpose().apply(local))
    }

    /// Global-frame velocity of every agent under the continuous law.
    fn velocities(&self, time: f64, agents: &[Vec2]) -> Result<Vec<Vec2>, SimError> {
        let (p0, v0) = self.target.state(time);
        let topo = self.controller.topology();
        (0..agents.len())
            .map(|i| {
                let meas = LocalMeasurement::sense(i, agents, p0, v0, topo).map_err(Self::control_err(time))?;
                self.agent_velocity(i, &meas, agents, p0).map_err(Self::control_err(time))
            })
            .collect()
    }

    /// Records the accepted state's angular distances as each agent's memory
    /// and caches the continuous-law velocities at that state.
    fn commit(&mut self, state: &WorldState) -> Result<(), SimError> {
        let topo = self.controller.topology();
        let err = Self::control_err(state.time);
        let mut velocities = Vec::with_capacity(state.agents.len());
        for i in 0..state.agents.len() {
            let meas = LocalMeasurement::sense(i, &state.agents, state.target_pos, state.target_vel, topo).map_err(&err)?;
            let mut angles = self.controller.angular_distances(i, &meas).map_err(&err)?;
            for (j, a) in &mut angles {
                *a = self.memories[i].resolve(*j, *a);
                self.memories[i].commit(*j, *a);
            }
            // same value as `agent_velocity` now that the memory holds these angles
            let f = match self.controller.rule() {
                BranchRule::Continuous => Some(self.controller.coupling_from_angles(i, &angles)),
                BranchRule::Measured | BranchRule::Shortest => None,
            };
            let v = match f {
                Some(f) => self.controller.control_with_coupling(i, &meas, f).ok().and_then(|local| {
                    geometry::frame_rotation(state.agents[i], state.target_pos).ok().map(|phi| phi.transpose().apply(local))
                }),
                None => self.agent_velocity(i, &meas, &state.agents, state.target_pos).ok(),
            };
            // a failure here surfaces again when the velocity is recomputed
            velocities.push(v);
        }
        self.committed = velocities.into_iter().collect::<Option<Vec<_>>>().map(|v| (state.clone(), v));
        Ok(())
    }

    fn initial_velocities(&self, state: &WorldState) -> Result<Vec<Vec2>, SimError> {
        match &self.committed {
            Some((at, v)) if at == state => Ok(v.clone()),
            _ => self.velocities(state.time, &state.agents),
        }
    }

    fn accept(&mut self, time: f64, agents: Vec<Vec2>) -> Result<WorldState, SimError> {
        if agents.iter().any(|p| !p.is_finite()) {
            return Err(SimError::NonFinite { time });
        }
        let next = WorldState::at(time, agents, self.target);
        self.commit(&next)?;
        Ok(next)
    }

    /// One classical RK4 step of the continuous closed loop. Every stage
    /// re-senses the world at its own stage time.
    pub fn step_continuous(&mut self, state: &WorldState, dt: f64) -> Result<WorldState, SimError> {
        let t = state.time;
        let shifted = |k: &[Vec2], scale: f64| -> Vec<Vec2> {
            state.agents.iter().zip(k).map(|(&p, &v)| p + v * scale).collect()
        };
        let k1 = self.initial_velocities(state)?;
        let k2 = self.velocities(t + dt / 2.0, &shifted(&k1, dt / 2.0))?;
        let k3 = self.velocities(t + dt / 2.0, &shifted(&k2, dt / 2.0))?;
        let k4 = self.velocities(t + dt, &shifted(&k3, dt))?;
        let agents = (0..state.agents.len())
            .map(|i| state.agents[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0))
            .collect();
        self.accept(t + dt, agents)
    }

    /// Held global-frame velocities computed from the sample at `state.time`.
    pub fn sampled_velocities(&self, state: &WorldState) -> Result<Vec<Vec2>, SimError> {
        let topo = self.controller.topology();
        let time = state.time;
        (0..state.agents.len())
            .map(|i| {
                let meas = LocalMeasurement::sense(i, &state.agents, state.target_pos, state.target_vel, topo)
                    .map_err(Self::control_err(time))?;
                let local = self.controller.sampled_control(i, &meas, &self.memories[i]).map_err(Self::control_err(time))?;
                let alpha = (state.agents[i] - state.target_pos).angle();
                Ok(geometry::rotate_to_global(alpha, local))
            })
            .collect()
    }

    /// Zero-order hold over one sampling period. The held velocity is
    /// constant, so the update `p + h u` is exact; the target follows its
    /// true trajectory.
    pub fn step_sampled(&mut self, state: &WorldState, h: f64) -> Result<WorldState, SimError> {
        let u = self.sampled_velocities(state)?;
        let agents = state.agents.iter().zip(&u).map(|(&p, &v)| p + v * h).collect();
        self.accept(state.time + h, agents)
    }

    pub fn snapshot(&self, state: &WorldState) -> Result<Snapshot, SimError> {
        let topo = self.controller.topology();
        let time = state.time;
        let n = state.agents.len();
        let mut polar = Vec::with_capacity(n);
        let mut coupling = Vec::with_capacity(n);
        let mut alpha_hat = Vec::new();
        for i in 0..n {
            polar.push(PolarState::from_relative(state.target_pos - state.agents[i]));
            let meas = LocalMeasurement::sense(i, &state.agents, state.target_pos, state.target_vel, topo)
                .map_err(Self::control_err(time))?;
            coupling.push(self.controller.coupling(i, &meas, &self.memories[i]).map_err(Self::control_err(time))?);
            for (j, raw) in self.controller.angular_distances(i, &meas).map_err(Self::control_err(time))? {
                alpha_hat.push(self.memories[i].resolve(j, raw));
            }
        }
        Ok(Snapshot { polar, coupling, alpha_hat })
    }
}

/// Simulates the closed loop over `[0, t_end]` and records a trace.
///
/// Refuses inadmissible formations and graphs without a spanning tree.
/// Deterministic for a given config and seed.
pub fn run(config: &SimConfig, controller: &Controller, target: &TargetModel) -> Result<SimulationTrace, SimError> {
    config.validate()?;
    let spec = controller.spec();
    let topo = controller.topology();
    check_admissible(spec, topo)?;
    if !topo.has_directed_spanning_tree() {
        return Err(SimError::NoSpanningTree);
    }
    let n = topo.len();
    let (p0, _) = target.state(0.0);
    let agents = match &config.initial_positions {
        Some(ps) if ps.len() != n => {
            return Err(SimError::Config(format!("{} initial positions for {n} agents", ps.len())))
        }
        Some(ps) => ps.clone(),
        None => random_positions(config, n, p0),
    };

    let step = config.step();
    let mut warnings = Vec::new();
    let h_max = controller.sampling_bound();
    match config.mode {
        Mode::Continuous if step > h_max / 10.0 => {
            warnings.push(format!("dt = {step} exceeds h_max/10 = {}", h_max / 10.0));
        }
        Mode::Sampled => {
            if step >= h_max {
                warnings.push(format!("h = {step} is not below the guaranteed bound h_max = {h_max}"));
            }
            if !target.is_static() {
                warnings.push("sampled-data control with a moving target is beyond the proven regime".into());
            }
        }
        _ => {}
    }

    let mut state = WorldState::at(0.0, agents, target);
    let mut sim = Simulator::new(controller, target, &state)?;
    let stride = ((config.output_every / step).round() as usize).max(1);
    let n_steps = match config.mode {
        Mode::Continuous => (config.t_end / step - 1e-9).ceil().max(0.0) as usize,
        Mode::Sampled => (config.t_end / step + 1e-9).floor() as usize,
    };

    let meta = TraceMeta {
        mode: config.mode,
        step,
        stride,
        t_end: config.t_end,
        seed: config.seed,
        rule: controller.rule(),
        static_target: target.is_static(),
        params: *controller.params(),
        warnings,
    };
    let mut trace = SimulationTrace::new(n, topo, spec, meta);
    trace.push(&state, &sim.snapshot(&state)?);
    for k in 1..=n_steps {
        state = match config.mode {
            Mode::Continuous => {
                let dt = step.min(config.t_end - state.time);
                let mut next = sim.step_continuous(&state, dt)?;
                if k == n_steps {
                    next.time = config.t_end;
                }
                next
            }
            Mode::Sampled => sim.step_sampled(&state, step)?,
        };
        if k % stride == 0 || k == n_steps {
            trace.push(&state, &sim.snapshot(&state)?);
        }
    }
    Ok(trace)
}

/// Per-agent polar trajectories from the polar-form oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarTrace {
    pub times: Vec<f64>,
    /// `states[k][i]`, `alpha` unwrapped.
    pub states: Vec<Vec<PolarState>>,
}

/// Integrates the closed loop directly in target-relative polar form,
/// `rho' = lambda gamma rho (R^2 - rho^2) f_i`, `alpha' = lambda mu f_i`,
/// with RK4. Valid for a static target only.
///
/// `alpha_hat_ij` is rebuilt from the phases as `alpha_j - alpha_i`, placed
/// in `[0, 2pi)` at `t = 0` and then kept continuous, or re-wrapped at every
/// evaluation for the memoryless branch rules.
#[allow(clippy::too_many_arguments)]
pub fn polar_oracle_continuous(
    initial: &[PolarState],
    spec: &FormationSpec,
    topology: &Topology,
    params: &ControllerParams,
    rule: BranchRule,
    t_end: f64,
    dt: f64,
    output_every: f64,
) -> PolarTrace {
    let n = initial.len();
    let edges = topology.edges();
    let offsets: Vec<f64> = edges
        .iter()
        .map(|&(i, j, _)| {
            let diff = initial[j].alpha - initial[i].alpha;
            wrap_to_tau(diff) - diff
        })
        .collect();

    let rhs = |state: &[f64]| -> Vec<f64> {
        let (rho, alpha) = state.split_at(n);
        let mut f = vec![params.c; n];
        for (e, &(i, j, a)) in edges.iter().enumerate() {
            let diff = alpha[j] - alpha[i];
            let d = spec.spacings[&(i, j)];
            let err = match rule {
                BranchRule::Continuous => diff + offsets[e] - d,
                BranchRule::Measured => wrap_to_tau(diff) - d,
                BranchRule::Shortest => wrap_to_pi(wrap_to_tau(diff) - d),
            };
            f[i] += params.mu * a * err.tanh();
        }
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            let r = spec.radii[i];
            out[i] = params.lambda * params.gamma * rho[i] * (r * r - rho[i] * rho[i]) * f[i];
            out[n + i] = params.lambda * params.mu * f[i];
        }
        out
    };

    let mut y: Vec<f64> = initial.iter().map(|s| s.rho).chain(initial.iter().map(|s| s.alpha)).collect();
    let pack = |y: &[f64]| (0..n).map(|i| PolarState { rho: y[i], alpha: y[n + i] }).collect::<Vec<_>>();
    let stride = ((output_every / dt).round() as usize).max(1);
    let n_steps = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    let mut times = vec![0.0];
    let mut states = vec![pack(&y)];
    let mut t = 0.0;
    for k in 1..=n_steps {
        let h = dt.min(t_end - t);
        let axpy = |k: &[f64], s: f64| y.iter().zip(k).map(|(a, b)| a + s * b).collect::<Vec<_>>();
        let k1 = rhs(&y);
        let k2 = rhs(&axpy(&k1, h / 2.0));
        let k3 = rhs(&axpy(&k2, h / 2.0));
        let k4 = rhs(&axpy(&k3, h));
        for m in 0..y.len() {
            y[m] += h / 6.0 * (k1[m] + 2.0 * k2[m] + 2.0 * k3[m] + k4[m]);
        }
        t = if k == n_steps { t_end } else { t + h };
        if k % stride == 0 || k == n_steps {
            times.push(t);
            states.push(pack(&y));
        }
    }
    PolarTrace { times, states }
}

/// Positions placing every agent on its desired circle with the desired
/// spacings, rotated by `phase` about the target.
pub fn formation_positions(target: Vec2, radii: &[f64], certificate: &[f64], phase: f64) -> Vec<Vec2> {
    radii
        .iter()
        .zip(certificate)
        .map(|(&r, &d)| target + Vec2::from_angle(d + phase) * r)
        .collect()
}

/// Continuous unwrapping of a sequence of angles by nearest branch.
pub fn unwrap_series(raw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    for &a in raw {
        let next = match out.last() {
            Some(&prev) => nearest_branch(prev, a),
            None => a,
        };
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Topology;
    use approx::assert_abs_diff_eq;

    fn params() -> ControllerParams {
        ControllerParams { lambda: 0.5, gamma: 1.0, mu: -1.0, c: 1.1, h: None }
    }

    fn lone_agent(radius: f64) -> Controller {
        // second agent without edges keeps the topology valid (n >= 2)
        let t = Topology::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let spec = FormationSpec::from_certificate(vec![radius, radius], vec![0.0, 0.0], &t);
        Controller::new(params(), spec, t, BranchRule::Continuous).unwrap()
    }

    #[test]
    fn target_models() {
        let s = TargetModel::Static { position: Vec2::new(1.0, 2.0) };
        assert_eq!(s.state(7.0), (Vec2::new(1.0, 2.0), Vec2::ZERO));
        let sin = TargetModel::Sinusoid { start: Vec2::new(1.0, -1.0), speed: 0.1, amplitude: 1.0, omega: 0.2 };
        assert_eq!(sin.state(0.0), (Vec2::new(1.0, -1.0), Vec2::new(0.1, 0.2)));
        let wp = TargetModel::Waypoints { points: vec![Vec2::ZERO, Vec2::new(3.0, 0.0), Vec2::new(3.0, 4.0)], speed: 1.0 };
        assert_eq!(wp.state(1.0), (Vec2::new(1.0, 0.0), Vec2::new(1.0, 0.0)));
        assert_eq!(wp.state(5.0), (Vec2::new(3.0, 2.0), Vec2::new(0.0, 1.0)));
        assert_eq!(wp.state(100.0), (Vec2::new(3.0, 4.0), Vec2::ZERO));
    }

    #[test]
    fn target_velocity_is_derivative_of_position() {
        let models = [
            TargetModel::Static { position: Vec2::new(1.0, 2.0) },
            TargetModel::ConstantVelocity { start: Vec2::new(-1.0, 0.5), velocity: Vec2::new(0.3, -0.7) },
            TargetModel::Sinusoid { start: Vec2::ZERO, speed: 0.4, amplitude: 1.5, omega: 0.9 },
            TargetModel::Waypoints { points: vec![Vec2::ZERO, Vec2::new(3.0, 0.0), Vec2::new(3.0, 4.0)], speed: 0.7 },
        ];
        let delta = 1e-6;
        for model in &models {
            for t in [0.3, 1.7, 5.2, 9.9, 13.1] {
                let (ahead, _) = model.state(t + delta);
                let (behind, _) = model.state(t - delta);
                let fd = (ahead - behind) * (1.0 / (2.0 * delta));
                let (_, v) = model.state(t);
                assert!((fd - v).norm() < 1e-8, "{model:?} at {t}: {fd} vs {v}");
            }
        }
    }

    #[test]
    fn continuous_step_keeps_agent_on_its_circle() {
        let ctl = lone_agent(2.0);
        let target = TargetModel::default();
        let mut state = WorldState::at(0.0, vec![Vec2::new(2.0, 0.0), Vec2::new(-2.0, 0.0)], &target);
        let mut sim = Simulator::new(&ctl, &target, &state).unwrap();
        for _ in 0..1000 {
            let next = sim.step_continuous(&state, 1e-3).unwrap();
            assert!((next.agents[0].norm() - 2.0).abs() < 1e-9);
            state = next;
        }
    }

    #[test]
    fn small_step_agrees_with_euler_to_second_order() {
        let ctl = lone_agent(2.0);
        let target = TargetModel::default();
        let state = WorldState::at(0.0, vec![Vec2::new(1.0, 0.3), Vec2::new(-2.0, 1.0)], &target);
        let sim = Simulator::new(&ctl, &target, &state).unwrap();
        let u = sim.velocities(0.0, &state.agents).unwrap();
        for dt in [1e-2, 1e-3, 1e-4] {
            let mut fresh = sim.clone();
            let next = fresh.step_continuous(&state, dt).unwrap();
            let euler = state.agents[0] + u[0] * dt;
            assert!((next.agents[0] - euler).norm() < 5.0 * dt * dt, "dt = {dt}");
        }
    }

    #[test]
    fn sampled_step_matches_hand_computation() {
        let ctl = lone_agent(2.0);
        let target = TargetModel::default();
        let state = WorldState::at(0.0, vec![Vec2::new(1.0, 0.0), Vec2::new(-2.0, 0.0)], &target);
        let mut sim = Simulator::new(&ctl, &target, &state).unwrap();
        let next = sim.step_sampled(&state, 0.1).unwrap();
        let p_i0 = next.target_pos - next.agents[0];
        assert_abs_diff_eq!(p_i0.x, -1.165, epsilon = 1e-12);
        assert_abs_diff_eq!(p_i0.y, 0.055, epsilon = 1e-12);
        let polar = PolarState::from_relative(p_i0);
        assert_abs_diff_eq!(polar.rho, 1.16630, epsilon = 1e-5);
        assert_abs_diff_eq!(polar.alpha, -0.04718, epsilon = 1e-5);
    }

    #[test]
    fn zero_velocity_sample_leaves_state_unchanged() {
        // the law never outputs exactly zero (mu != 0), so exercise the hold with h = 0
        let ctl = lone_agent(2.0);
        let target = TargetModel::default();
        let state = WorldState::at(0.0, vec![Vec2::new(1.0, 0.0), Vec2::new(-2.0, 0.0)], &target);
        let mut sim = Simulator::new(&ctl, &target, &state).unwrap();
        let same = sim.step_sampled(&state, 0.0).unwrap();
        assert_eq!(same.agents, state.agents);
    }

    #[test]
    fn degenerate_start_aborts() {
        let ctl = lone_agent(2.0);
        let target = TargetModel::default();
        let state = WorldState::at(0.0, vec![Vec2::ZERO, Vec2::new(1.0, 0.0)], &target);
        assert!(matches!(Simulator::new(&ctl, &target, &state), Err(SimError::Control { .. })));
    }

    #[test]
    fn zero_duration_run_has_only_initial_state() {
        let ctl = lone_agent(2.0);
        let cfg = SimConfig { t_end: 0.0, ..SimConfig::default() };
        let trace = run(&cfg, &ctl, &TargetModel::default()).unwrap();
        assert_eq!(trace.times, vec![0.0]);
    }

    #[test]
    fn random_positions_respect_separation_and_seed() {
        let cfg = SimConfig { seed: 9, min_separation: 2.0, ..SimConfig::default() };
        let a = random_positions(&cfg, 50, Vec2::ZERO);
        assert!(a.iter().all(|p| p.norm() >= 2.0));
        assert_eq!(a, random_positions(&cfg, 50, Vec2::ZERO));
    }

    #[test]
    fn oracle_linear_phase_without_neighbors() {
        let t = Topology::from_edges(2, &[]).unwrap();
        let spec = FormationSpec::from_certificate(vec![2.0, 1.0], vec![0.0, 0.0], &t);
        let init = [PolarState { rho: 2.0, alpha: 0.3 }, PolarState { rho: 0.5, alpha: -1.0 }];
        let out = polar_oracle_continuous(&init, &spec, &t, &params(), BranchRule::Continuous, 10.0, 1e-3, 1.0);
        let last = out.states.last().unwrap();
        assert_abs_diff_eq!(*out.times.last().unwrap(), 10.0);
        assert_abs_diff_eq!(last[0].alpha, 0.3 - 0.55 * 10.0, epsilon = 1e-10);
        assert_abs_diff_eq!(last[0].rho, 2.0, epsilon = 1e-12);
        // logistic growth of rho^2 with rate 2 gamma lambda c R^2
        let k = 2.0 * 1.0 * 0.5 * 1.1;
        let rho_sq = 1.0 / (1.0 + (1.0 / 0.25 - 1.0) * (-k * 10.0f64).exp());
        assert_abs_diff_eq!(last[1].rho, rho_sq.sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn unwrap_series_removes_jumps() {
        let raw = [3.0, -3.1, 3.0, 0.5];
        let out = unwrap_series(&raw);
        assert_abs_diff_eq!(out[1], -3.1 + std::f64::consts::TAU, epsilon = 1e-12);
        assert_abs_diff_eq!(out[2], 3.0, epsilon = 1e-12);
    }
}
