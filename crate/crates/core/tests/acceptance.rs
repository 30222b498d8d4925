//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line with the
//! measured numbers, then asserts. Tests hold a shared lock so that the
//! timed criterion is measured without competing threads.

use std::f64::consts::{PI, TAU};
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use formation_core::analysis::{
    consensus_check, geometric_fit, lyapunov_traces, perturbed_formation, polar_map_discrepancy, report,
    sampled_equilibrium_radius, trial_seed, ConvergenceReport, ProbeSettings, SimulationTrace, Tolerances,
};
use formation_core::controller::{sampling_bound, BranchRule, Controller, ControllerParams};
use formation_core::geometry::{PolarState, Vec2};
use formation_core::io::{read_scenario, Scenario};
use formation_core::simulation::{polar_oracle_continuous, run, Mode, SimConfig, SimError, TargetModel};
use formation_core::topology::{check_admissible, FormationSpec, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const TOL_RADIAL: f64 = 1e-3;
const TOL_ANGULAR: f64 = 1e-2;
const RUNTIME_BUDGET: Duration = Duration::from_secs(10);
const INVARIANCE_TOL: f64 = 1e-8;
const RATE_REL_TOL: f64 = 0.01;
const PAPER_H_MAX: f64 = 0.0379;
const H_MAX_TOL: f64 = 1e-4;
const RATIO_LIMIT: f64 = 0.999;
const ORACLE_TOL: f64 = 1e-6;
const HALVING_RATIO: f64 = 4.0;
const HALVING_TOL: f64 = 0.5;
const HAND_STEP_TOL: f64 = 1e-9;
const CONSENSUS_AGREE: f64 = 1e-4;
const CONSENSUS_SPLIT: f64 = 1e-2;
const LYAPUNOV_STEP_TOL: f64 = 1e-9;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    println!("[{}] #{id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion #{id} ({name}) failed: {detail}");
}

fn tolerances() -> Tolerances {
    Tolerances { radial: TOL_RADIAL, angular: TOL_ANGULAR }
}

fn reference_params() -> ControllerParams {
    ControllerParams { lambda: 0.5, gamma: 1.0, mu: -1.0, c: 1.1, h: None }
}

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    read_scenario(&path).unwrap()
}

/// Seven-agent Big Dipper formation on the directed unit ring.
fn big_dipper() -> Controller {
    let s = scenario("big_dipper_static.toml");
    Controller::new(reference_params(), s.spec, s.topology, BranchRule::Continuous).unwrap()
}

struct Run {
    seed: u64,
    trace: SimulationTrace,
    report: ConvergenceReport,
}

struct ContinuousSuite {
    runs: Vec<Run>,
    elapsed: Duration,
}

/// The twenty seeded continuous runs shared by several criteria.
fn continuous_suite() -> &'static ContinuousSuite {
    static SUITE: OnceLock<ContinuousSuite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let ctl = big_dipper();
        let target = TargetModel::Static { position: Vec2::ZERO };
        let start = Instant::now();
        let runs = (0..20)
            .map(|seed| {
                let cfg = SimConfig { seed, t_end: 100.0, dt: 1e-3, output_every: 0.1, ..SimConfig::default() };
                let trace = run(&cfg, &ctl, &target).unwrap();
                let report = report(&trace, tolerances()).unwrap();
                Run { seed, trace, report }
            })
            .collect();
        ContinuousSuite { runs, elapsed: start.elapsed() }
    })
}

#[test]
fn c01_continuous_convergence() {
    let _g = serial();
    let suite = continuous_suite();
    for r in &suite.runs {
        assert!(r.trace.radii.iter().all(|&x| (1.0..=4.0).contains(&x)));
    }
    let failed: Vec<u64> = suite.runs.iter().filter(|r| !r.report.converged).map(|r| r.seed).collect();
    let worst_radial = suite.runs.iter().map(|r| r.report.max_radial_error()).fold(0.0, f64::max);
    let worst_spacing = suite.runs.iter().map(|r| r.report.max_spacing_error()).fold(0.0, f64::max);
    let pass = failed.is_empty() && suite.elapsed < RUNTIME_BUDGET;
    verdict(
        1,
        "continuous convergence",
        pass,
        format!(
            "{}/20 seeds converged (unconverged seeds {failed:?}); worst radial {worst_radial:.2e}, worst spacing {worst_spacing:.2e}; runtime {:.2} s",
            20 - failed.len(),
            suite.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c02_moving_target_invariance() {
    let _g = serial();
    let ctl = big_dipper();
    let start = Vec2::new(1.0, -2.0);
    let moving = TargetModel::ConstantVelocity { start, velocity: Vec2::new(0.3, -0.2) };
    let still = TargetModel::Static { position: start };
    let cfg = SimConfig { seed: 3, t_end: 50.0, init_box: formation_core::simulation::InitBox::centered(start, 10.0), ..SimConfig::default() };
    let a = run(&cfg, &ctl, &moving).unwrap();
    let b = run(&cfg, &ctl, &still).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..a.len() {
        for i in 0..a.agents.len() {
            let ra = a.target_pos[k] - a.agents[i].positions[k];
            let rb = b.target_pos[k] - b.agents[i].positions[k];
            worst = worst.max((ra - rb).norm());
        }
    }
    verdict(
        2,
        "moving-target invariance",
        worst < INVARIANCE_TOL && a.len() == b.len(),
        format!("max relative-position deviation {worst:.2e} over {} samples", a.len()),
    );
}

#[test]
fn c03_steady_angular_rate() {
    let _g = serial();
    let expected = reference_params().steady_angular_rate();
    let mut worst: f64 = 0.0;
    let mut counted = 0;
    let mut ok = true;
    for r in continuous_suite().runs.iter().filter(|r| r.report.converged) {
        counted += 1;
        match r.report.worst_rate_deviation() {
            Some(d) => worst = worst.max(d),
            None => ok = false,
        }
        assert_eq!(r.report.expected_angular_rate, expected);
    }
    verdict(
        3,
        "steady angular rate",
        ok && counted > 0 && worst < RATE_REL_TOL,
        format!("{counted} converged runs; worst relative deviation from {expected} rad/s is {worst:.2e}"),
    );
}

#[test]
fn c04_sampling_bound() {
    let _g = serial();
    let ctl = big_dipper();
    let h_max = sampling_bound(ctl.spec(), ctl.topology(), ctl.params());
    let d_max = ctl.topology().degree_stats().d_max;
    let pass = (h_max - PAPER_H_MAX).abs() <= H_MAX_TOL && d_max == 1.0 && (ctl.coupling_bound() - 2.1).abs() < 1e-12;
    verdict(
        4,
        "sampling bound formula",
        pass,
        format!(
            "h_max = {h_max:.6} with R = {:.6}, d_max = {d_max}, M = {}",
            ctl.spec().max_radius(),
            ctl.coupling_bound()
        ),
    );
}

/// Random admissible scenario: a directed ring plus random chords, distinct
/// radii in [1, 4], random phases, `c` just above its bound.
fn random_scenario(rng: &mut ChaCha8Rng, n: usize) -> Controller {
    let mut edges: Vec<(usize, usize, f64)> = (0..n).map(|i| ((i + 1) % n, i, 1.0)).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && (j != (i + 1) % n) && rng.gen_bool(0.25) {
                edges.push((j, i, 1.0));
            }
        }
    }
    let topo = Topology::from_edges(n, &edges).unwrap();
    let mut radii: Vec<f64> = Vec::new();
    while radii.len() < n {
        let r = rng.gen_range(1.0..4.0);
        if radii.iter().all(|&q: &f64| (q - r).abs() > 0.05) {
            radii.push(r);
        }
    }
    let phases: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..TAU)).collect();
    let spec = FormationSpec::from_certificate(radii, phases, &topo);
    let d_max = topo.degree_stats().d_max;
    let params = ControllerParams { c: d_max + 0.1, ..reference_params() };
    Controller::new(params, spec, topo, BranchRule::Continuous).unwrap()
}

#[test]
fn c05_sampled_local_stability() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 3;
    let (mut total, mut converged) = (0, 0);
    let mut worst_ratio: f64 = 0.0;
    let mut worst_radial: f64 = 0.0;
    let mut predicted_offset: f64 = 0.0;
    for s in 0..10 {
        let n = rng.gen_range(3..=5);
        let ctl = random_scenario(&mut rng, n);
        let certificate = check_admissible(ctl.spec(), ctl.topology()).unwrap();
        let h = ctl.sampling_bound() / 2.0;
        let sampled = ctl.clone().with_sampling_period(h).unwrap();
        let settings = ProbeSettings { h_grid: vec![h], trials, seed: s, t_end: 200.0, ..ProbeSettings::default() };
        for r in &ctl.spec().radii {
            let settled = sampled_equilibrium_radius(*r, ctl.params(), h).unwrap();
            predicted_offset = predicted_offset.max(settled - r);
        }
        for k in 0..trials {
            let seed = trial_seed(s, k);
            let cfg = SimConfig {
                mode: Mode::Sampled,
                h,
                t_end: 200.0,
                output_every: h,
                initial_positions: Some(perturbed_formation(ctl.spec(), &certificate, Vec2::ZERO, &settings, seed)),
                ..SimConfig::default()
            };
            let trace = run(&cfg, &sampled, &TargetModel::default()).unwrap();
            let rep = report(&trace, tolerances()).unwrap();
            total += 1;
            converged += usize::from(rep.converged);
            worst_radial = worst_radial.max(rep.max_radial_error());
            let ratio = geometric_fit(&trace.error_series(), 1e-13).map_or(f64::INFINITY, |f| f.ratio);
            worst_ratio = worst_ratio.max(ratio);
        }
    }
    verdict(
        5,
        "sampled-data local stability",
        converged == total && worst_ratio < RATIO_LIMIT,
        format!(
            "{converged}/{total} trials converged at h = h_max/2; worst final radial error {worst_radial:.2e} \
             (predicted settled-radius offset up to {predicted_offset:.2e}); worst fitted ratio {worst_ratio:.6}"
        ),
    );
}

#[test]
fn c06_sampled_beyond_bound() {
    let _g = serial();
    let s = scenario("big_dipper_sampled.toml");
    assert_eq!(s.config.h, 0.1);
    let ctl = s.controller().unwrap();
    let (mut converged, mut diverged) = (0, 0);
    let mut spacing_ok = 0;
    let mut worst_radial: f64 = 0.0;
    for seed in 0..20 {
        let cfg = SimConfig { seed, t_end: 200.0, ..s.config.clone() };
        match run(&cfg, &ctl, &s.target) {
            Ok(trace) => {
                let rep = report(&trace, tolerances()).unwrap();
                converged += usize::from(rep.converged);
                spacing_ok += usize::from(rep.max_spacing_error() < TOL_ANGULAR);
                worst_radial = worst_radial.max(rep.max_radial_error());
            }
            Err(SimError::NonFinite { .. } | SimError::Control { .. }) => diverged += 1,
            Err(e) => panic!("{e}"),
        }
    }
    let settled = s.spec.radii.iter().map(|&r| sampled_equilibrium_radius(r, ctl.params(), 0.1).unwrap() - r);
    let offset = settled.fold(0.0, f64::max);
    verdict(
        6,
        "sampled control beyond the bound (empirical)",
        converged == 20,
        format!(
            "{converged}/20 seeds converged at h = 0.1; {spacing_ok} met the spacing tolerance, {diverged} broke down; \
             worst radial error among completed runs {worst_radial:.2e}, settled-radius offset up to {offset:.2e}"
        ),
    );
}

#[test]
fn c07_polar_oracle_equivalence() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_rho: f64 = 0.0;
    let mut worst_alpha: f64 = 0.0;
    for s in 0..5 {
        let n = rng.gen_range(3..=5);
        let ctl = random_scenario(&mut rng, n);
        let cfg = SimConfig { seed: 100 + s, t_end: 20.0, dt: 1e-3, output_every: 0.1, ..SimConfig::default() };
        let trace = run(&cfg, &ctl, &TargetModel::default()).unwrap();
        let initial: Vec<PolarState> =
            trace.agents.iter().map(|a| PolarState::from_relative(-a.positions[0])).collect();
        let oracle =
            polar_oracle_continuous(&initial, ctl.spec(), ctl.topology(), ctl.params(), ctl.rule(), 20.0, 1e-3, 0.1);
        assert_eq!(oracle.times.len(), trace.len());
        for (k, states) in oracle.states.iter().enumerate() {
            for (i, st) in states.iter().enumerate() {
                worst_rho = worst_rho.max((st.rho - trace.agents[i].rho[k]).abs());
                worst_alpha = worst_alpha.max((st.alpha - trace.agents[i].alpha[k]).abs());
            }
        }
    }
    verdict(
        7,
        "Cartesian engine vs polar oracle",
        worst_rho < ORACLE_TOL && worst_alpha < ORACLE_TOL,
        format!("max |rho gap| {worst_rho:.2e}, max |alpha gap| {worst_alpha:.2e} over 5 scenarios"),
    );
}

/// Agent 1 has no neighbors, so it is a lone agent with `f = c`; agent 2
/// watches it and keeps the run's graph rooted.
fn lone_agent_run(h: f64, t_end: f64) -> SimulationTrace {
    let topo = Topology::from_edges(2, &[(0, 1, 1.0)]).unwrap();
    let spec = FormationSpec::from_certificate(vec![2.0, 1.0], vec![0.0, PI], &topo);
    let ctl = Controller::new(reference_params(), spec, topo, BranchRule::Continuous).unwrap().with_sampling_period(h).unwrap();
    let cfg = SimConfig {
        mode: Mode::Sampled,
        h,
        t_end,
        output_every: h,
        initial_positions: Some(vec![Vec2::new(1.0, 0.0), Vec2::new(-0.5, -0.5)]),
        ..SimConfig::default()
    };
    run(&cfg, &ctl, &TargetModel::default()).unwrap()
}

#[test]
fn c08_sampled_map_residual() {
    let _g = serial();
    let coarse = polar_map_discrepancy(&lone_agent_run(0.1, 1.0)).unwrap().per_agent[0][0];
    let fine = polar_map_discrepancy(&lone_agent_run(0.05, 1.0)).unwrap().per_agent[0][0];
    let ratio = coarse / fine;
    // hand computation: relative position (-1, 0), R = 2, f = c, h = 0.1
    let step = lone_agent_run(0.1, 0.1);
    let hand = (1.165f64 * 1.165 + 0.055 * 0.055).sqrt();
    let hand_gap = (step.agents[0].rho[1] - hand).abs();
    verdict(
        8,
        "exact vs first-order sampled maps",
        (ratio - HALVING_RATIO).abs() <= HALVING_TOL && hand_gap < HAND_STEP_TOL,
        format!(
            "rho residual {coarse:.3e} at h = 0.1, {fine:.3e} at h = 0.05 (ratio {ratio:.3}); \
             first step rho = {:.9} vs hand {hand:.9}",
            step.agents[0].rho[1]
        ),
    );
}

/// Agents in closed groups: no member listens to anyone outside the group.
/// Warshall closure over "i listens to j".
fn closed_groups(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        reach[i][i] = true;
    }
    for &(j, i) in edges {
        reach[i][j] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        // i's strongly connected class is closed when everything i hears also hears i
        let class: Vec<usize> = (0..n).filter(|&j| reach[i][j] && reach[j][i]).collect();
        let closed = (0..n).all(|j| !reach[i][j] || reach[j][i]);
        if closed && !groups.contains(&class) {
            groups.push(class);
        }
    }
    groups
}

#[test]
fn c09_consensus_iff_spanning_tree() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = reference_params();
    let (mut positives, mut negatives) = (0, 0);
    let mut worst_positive: f64 = 0.0;
    let mut weakest_negative = f64::INFINITY;
    let mut oracle_mismatch = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=5);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.gen_bool(0.3) {
                    edges.push((j, i));
                }
            }
        }
        let weighted: Vec<_> = edges.iter().map(|&(j, i)| (j, i, rng.gen_range(0.5..2.0))).collect();
        let topo = Topology::from_edges(n, &weighted).unwrap();
        let groups = closed_groups(n, &edges);
        let spanning = topo.has_directed_spanning_tree();
        oracle_mismatch += usize::from(spanning != (groups.len() == 1));
        let mut xi0: Vec<f64> = (0..n).map(|_| rng.gen_range(-PI..PI)).collect();
        if spanning {
            let out = consensus_check(&topo, &params, &xi0, 500.0, 0.01);
            positives += 1;
            worst_positive = worst_positive.max(out.disagreement);
        } else {
            // distinct initial values per closed group
            for (g, members) in groups.iter().enumerate() {
                for &m in members {
                    xi0[m] = -1.0 + 0.5 * g as f64;
                }
            }
            let out = consensus_check(&topo, &params, &xi0, 500.0, 0.01);
            negatives += 1;
            weakest_negative = weakest_negative.min(out.disagreement);
        }
    }
    verdict(
        9,
        "consensus iff spanning tree",
        oracle_mismatch == 0
            && positives > 0
            && negatives > 0
            && worst_positive < CONSENSUS_AGREE
            && weakest_negative >= CONSENSUS_SPLIT,
        format!(
            "{positives} rooted graphs, worst disagreement {worst_positive:.2e}; {negatives} unrooted graphs, \
             smallest disagreement {weakest_negative:.2e}; {oracle_mismatch} oracle mismatches"
        ),
    );
}

#[test]
fn c10_lyapunov_monotonicity() {
    let _g = serial();
    let mut traces: Vec<&SimulationTrace> = continuous_suite().runs.iter().map(|r| &r.trace).collect();
    let ctl = big_dipper();
    let dense_cfg = SimConfig { seed: 42, t_end: 10.0, output_every: 1e-3, ..SimConfig::default() };
    let dense = run(&dense_cfg, &ctl, &TargetModel::default()).unwrap();
    traces.push(&dense);
    let mut worst_rise = f64::NEG_INFINITY;
    for trace in &traces {
        for series in lyapunov_traces(trace).unwrap() {
            for w in series.windows(2) {
                worst_rise = worst_rise.max(w[1] - w[0]);
            }
        }
    }
    verdict(
        10,
        "radial Lyapunov monotonicity",
        worst_rise <= LYAPUNOV_STEP_TOL,
        format!("largest per-sample increase of W over {} traces: {worst_rise:.2e}", traces.len()),
    );
}

#[test]
fn c11_collision_monitor() {
    let _g = serial();
    let after = |trace: &SimulationTrace| {
        trace
            .times
            .iter()
            .zip(&trace.min_pairwise)
            .filter(|(t, _)| **t >= 1.0)
            .map(|(_, d)| *d)
            .fold(f64::INFINITY, f64::min)
    };
    let mut closest = continuous_suite().runs.iter().map(|r| after(&r.trace)).fold(f64::INFINITY, f64::min);
    let mut runs = 20;
    for name in ["big_dipper.toml", "big_dipper_sampled.toml"] {
        let s = scenario(name);
        let trace = run(&s.config, &s.controller().unwrap(), &s.target).unwrap();
        closest = closest.min(after(&trace));
        runs += 1;
    }
    verdict(
        11,
        "collision monitoring (empirical)",
        closest > 0.0,
        format!("smallest inter-agent distance after t = 1 s over {runs} runs: {closest:.4}"),
    );
}
