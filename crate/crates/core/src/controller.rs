//! Continuous-time and sampled-data control laws, both evaluated from a
//! single agent's local-frame measurements.
//!
//! In agent `i`'s local frame the command is
//!
//! ```text
//! u = lambda * rho * f_i * (gamma * (R_i^2 - rho^2), mu) + v0
//! f_i = c + mu * sum_j a_ij * tanh(alpha_hat_ij - d_ij)
//! ```
//!
//! The first component drives the agent onto the circle of radius `R_i`
//! around the target; the second makes it circle at a speed modulated by
//! the angular-spacing errors to its neighbors.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::geometry::{self, nearest_branch, wrap_to_pi, GeometryError, Vec2, DEGENERATE_RADIUS};
use crate::topology::{gain_lower_bound, FormationSpec, Topology};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("agent {agent}: {source}")]
    Geometry {
        agent: usize,
        #[source]
        source: GeometryError,
    },
    #[error("agent {agent}: no measurement of neighbor {neighbor}")]
    MissingNeighbor { agent: usize, neighbor: usize },
    #[error("invalid controller parameter: {0}")]
    InvalidParams(String),
    #[error("gain bound violated: c = {c} must exceed |mu| * max in-degree = {bound}")]
    GainBound { c: f64, bound: f64 },
    #[error("formation does not match topology: {0}")]
    SpecMismatch(String),
}

/// Gains of the control law. `h` is only used by the sampled-data law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub lambda: f64,
    pub gamma: f64,
    pub mu: f64,
    pub c: f64,
    pub h: Option<f64>,
}

impl ControllerParams {
    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |what: &str| Err(ControlError::InvalidParams(what.to_string()));
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !self.mu.is_finite() || self.mu == 0.0 {
            return bad("mu must be nonzero");
        }
        if !self.c.is_finite() {
            return bad("c must be finite");
        }
        if let Some(h) = self.h {
            if !(h.is_finite() && h > 0.0) {
                return bad("sampling period h must be positive");
            }
        }
        Ok(())
    }

    /// Angular velocity about the target once the formation is reached.
    pub fn steady_angular_rate(&self) -> f64 {
        self.lambda * self.mu * self.c
    }
}

/// How the angular distance to a neighbor enters the `tanh` coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchRule {
    /// `alpha_hat` starts in `[0, 2pi)` and is then kept continuous in time
    /// by each agent unwrapping its own successive measurements.
    #[default]
    Continuous,
    /// The raw measurement in `[0, 2pi)`, no memory.
    Measured,
    /// The spacing error `alpha_hat - d` wrapped into `(-pi, pi]`, no memory.
    Shortest,
}

/// Everything agent `i` senses at one instant, in its own local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMeasurement {
    pub target_pos: Vec2,
    pub target_vel: Vec2,
    /// Neighbor positions in topology order.
    pub neighbor_pos: SmallVec<[(usize, Vec2); 4]>,
}

impl LocalMeasurement {
    /// Sensor model: expresses the world as seen from agent `i`.
    pub fn sense(
        i: usize,
        agents: &[Vec2],
        target_pos: Vec2,
        target_vel: Vec2,
        topology: &Topology,
    ) -> Result<Self, ControlError> {
        let me = agents[i];
        let phi = geometry::frame_rotation(me, target_pos)
            .map_err(|source| ControlError::Geometry { agent: i + 1, source })?;
        let neighbor_pos = topology.neighbors(i).map(|(j, _)| (j, phi.apply(agents[j] - me))).collect();
        Ok(Self {
            target_pos: phi.apply(target_pos - me),
            target_vel: phi.apply(target_vel),
            neighbor_pos,
        })
    }

    pub fn rho(&self) -> f64 {
        self.target_pos.norm()
    }

    pub fn neighbor(&self, j: usize) -> Option<Vec2> {
        self.neighbor_pos.iter().find(|(k, _)| *k == j).map(|&(_, p)| p)
    }
}

/// Per-agent record of the last accepted angular distance to each neighbor,
/// used to keep `alpha_hat` continuous. Only the agent's own past
/// measurements are stored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseMemory {
    last: Vec<(usize, f64)>,
}

impl PhaseMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Continuous representative of a raw `[0, 2pi)` reading.
    pub fn resolve(&self, neighbor: usize, raw: f64) -> f64 {
        match self.get(neighbor) {
            Some(prev) => nearest_branch(prev, raw),
            None => raw,
        }
    }

    pub fn commit(&mut self, neighbor: usize, value: f64) {
        match self.last.iter_mut().find(|(k, _)| *k == neighbor) {
            Some(slot) => slot.1 = value,
            None => self.last.push((neighbor, value)),
        }
    }

    pub fn get(&self, neighbor: usize) -> Option<f64> {
        self.last.iter().find(|(k, _)| *k == neighbor).map(|&(_, v)| v)
    }
}

/// The control law bound to one formation, topology and parameter set.
#[derive(Debug, Clone)]
pub struct Controller {
    params: ControllerParams,
    spec: FormationSpec,
    topology: Topology,
    rule: BranchRule,
    /// Per agent: `(j, a_ij, d_ij)` for every neighbor `j`.
    links: Vec<Vec<(usize, f64, f64)>>,
}

impl Controller {
    /// Validates gains, including the strict bound on `c`, and that the
    /// formation has a radius per agent and a spacing per edge.
    pub fn new(
        params: ControllerParams,
        spec: FormationSpec,
        topology: Topology,
        rule: BranchRule,
    ) -> Result<Self, ControlError> {
        params.validate()?;
        let bound = gain_lower_bound(&topology, params.mu);
        if !(params.c > bound) {
            return Err(ControlError::GainBound { c: params.c, bound });
        }
        if spec.radii.len() != topology.len() {
            return Err(ControlError::SpecMismatch(format!(
                "{} radii for {} agents",
                spec.radii.len(),
                topology.len()
            )));
        }
        if let Some((i, j, _)) = topology.edges().into_iter().find(|&(i, j, _)| spec.spacing(i, j).is_none()) {
            return Err(ControlError::SpecMismatch(format!("no spacing for edge {}->{}", j + 1, i + 1)));
        }
        let links = (0..topology.len())
            .map(|i| topology.neighbors(i).map(|(j, a)| (j, a, spec.spacings[&(i, j)])).collect())
            .collect();
        Ok(Self { params, spec, topology, rule, links })
    }

    pub fn params(&self) -> &ControllerParams {
        &self.params
    }

    pub fn spec(&self) -> &FormationSpec {
        &self.spec
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn rule(&self) -> BranchRule {
        self.rule
    }

    pub fn with_sampling_period(mut self, h: f64) -> Result<Self, ControlError> {
        self.params.h = Some(h);
        self.params.validate()?;
        Ok(self)
    }

    /// Upper bound `M` on the coupling function.
    pub fn coupling_bound(&self) -> f64 {
        self.params.c + gain_lower_bound(&self.topology, self.params.mu)
    }

    /// Raw angular distances `alpha_hat_ij` in `[0, 2pi)` for every neighbor.
    pub fn angular_distances(&self, i: usize, meas: &LocalMeasurement) -> Result<Vec<(usize, f64)>, ControlError> {
        self.links[i]
            .iter()
            .map(|&(j, _, _)| {
                let pj = meas.neighbor(j).ok_or(ControlError::MissingNeighbor { agent: i + 1, neighbor: j + 1 })?;
                let raw = geometry::angular_distance(meas.target_pos, pj)
                    .map_err(|source| ControlError::Geometry { agent: i + 1, source })?;
                Ok((j, raw))
            })
            .collect()
    }

    /// Angular distances as the coupling sees them under the branch rule.
    pub fn effective_angles(
        &self,
        i: usize,
        meas: &LocalMeasurement,
        memory: &PhaseMemory,
    ) -> Result<Vec<(usize, f64)>, ControlError> {
        let raw = self.angular_distances(i, meas)?;
        Ok(match self.rule {
            BranchRule::Continuous => raw.into_iter().map(|(j, a)| (j, memory.resolve(j, a))).collect(),
            BranchRule::Measured | BranchRule::Shortest => raw,
        })
    }

    /// `f_i` from already-resolved angular distances.
    pub fn coupling_from_angles(&self, i: usize, angles: &[(usize, f64)]) -> f64 {
        let p = &self.params;
        let sum: f64 = angles
            .iter()
            .map(|&(j, alpha_hat)| {
                let (_, a, d) = self.links[i].iter().find(|l| l.0 == j).copied().unwrap_or((j, 0.0, 0.0));
                let mut err = alpha_hat - d;
                if self.rule == BranchRule::Shortest {
                    err = wrap_to_pi(err);
                }
                a * err.tanh()
            })
            .sum();
        p.c + p.mu * sum
    }

    /// The coupling function `f_i` evaluated on agent `i`'s measurement.
    /// Equals `coupling_from_angles(i, &effective_angles(i, meas, memory)?)`.
    pub fn coupling(&self, i: usize, meas: &LocalMeasurement, memory: &PhaseMemory) -> Result<f64, ControlError> {
        let p = &self.params;
        let mut sum = 0.0;
        for &(j, a, d) in &self.links[i] {
            let pj = meas.neighbor(j).ok_or(ControlError::MissingNeighbor { agent: i + 1, neighbor: j + 1 })?;
            let raw = geometry::angular_distance(meas.target_pos, pj)
                .map_err(|source| ControlError::Geometry { agent: i + 1, source })?;
            let err = match self.rule {
                BranchRule::Continuous => memory.resolve(j, raw) - d,
                BranchRule::Measured => raw - d,
                BranchRule::Shortest => wrap_to_pi(raw - d),
            };
            sum += a * err.tanh();
        }
        Ok(p.c + p.mu * sum)
    }

    fn formation_term(&self, i: usize, meas: &LocalMeasurement, f: f64) -> Result<Vec2, ControlError> {
        let rho = meas.rho();
        if !(rho > DEGENERATE_RADIUS) {
            return Err(ControlError::Geometry {
                agent: i + 1,
                source: GeometryError::DegenerateFrame { distance: rho },
            });
        }
        let p = &self.params;
        let r = self.spec.radii[i];
        let gain = p.lambda * rho * f;
        Ok(Vec2::new(gain * p.gamma * (r * r - rho * rho), gain * p.mu))
    }

    /// Command for an already evaluated coupling value `f`.
    pub fn control_with_coupling(&self, i: usize, meas: &LocalMeasurement, f: f64) -> Result<Vec2, ControlError> {
        Ok(self.formation_term(i, meas, f)? + meas.target_vel)
    }

    /// Continuous-time command `u_i^i` in agent `i`'s local frame.
    pub fn continuous_control(
        &self,
        i: usize,
        meas: &LocalMeasurement,
        memory: &PhaseMemory,
    ) -> Result<Vec2, ControlError> {
        let f = self.coupling(i, meas, memory)?;
        Ok(self.formation_term(i, meas, f)? + meas.target_vel)
    }

    /// Sampled-data command computed from the measurement taken at `kh`.
    ///
    /// Same expression as the continuous law with every factor, including
    /// `rho`, frozen at the sample. The caller holds the result, rotated to
    /// the global frame once, over `[kh, kh + h)`.
    pub fn sampled_control(
        &self,
        i: usize,
        meas_at_sample: &LocalMeasurement,
        memory: &PhaseMemory,
    ) -> Result<Vec2, ControlError> {
        self.continuous_control(i, meas_at_sample, memory)
    }

    pub fn sampling_bound(&self) -> f64 {
        sampling_bound(&self.spec, &self.topology, &self.params)
    }
}

/// Largest sampling period for which the sampled-data loop is guaranteed
/// locally exponentially stable with a static target:
/// `min(1 / (2 gamma lambda R^2 M), 1 / (lambda mu^2 d_max))`, `R` the largest
/// desired radius. An empty edge set makes the second term infinite.
pub fn sampling_bound(spec: &FormationSpec, topology: &Topology, params: &ControllerParams) -> f64 {
    let d_max = topology.degree_stats().d_max;
    let m = params.c + params.mu.abs() * d_max;
    let r = spec.max_radius();
    let radial = 1.0 / (2.0 * params.gamma * params.lambda * r * r * m);
    let angular = 1.0 / (params.lambda * params.mu * params.mu * d_max);
    radial.min(angular)
}

/// Linearized sampled spacing dynamics `H = I - s (D - A)`, `s = h lambda mu^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub s: f64,
    /// Row-major `n x n`.
    pub matrix: Vec<Vec<f64>>,
    pub diagonal_positive: bool,
}

pub fn linearization_matrix(topology: &Topology, params: &ControllerParams, h: f64) -> Linearization {
    let n = topology.len();
    let s = h * params.lambda * params.mu * params.mu;
    let matrix: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        1.0 - s * topology.in_degree(i)
                    } else {
                        s * topology.weight(i, j)
                    }
                })
                .collect()
        })
        .collect();
    let diagonal_positive = (0..n).all(|i| matrix[i][i] > 0.0);
    Linearization { s, matrix, diagonal_positive }
}
