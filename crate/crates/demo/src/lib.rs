//! Browser bindings for the formation simulator.
//!
//! Each exported function takes scenario TOML text and returns JSON. The
//! `*_json` functions hold the logic so it can be tested natively.

use formation_core::analysis::{consensus_check, report};
use formation_core::io::{parse_scenario, Scenario};
use formation_core::simulation::{self, Mode};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const MAX_FRAMES: usize = 600;

/// Shipped scenarios as `(name, toml)`.
pub const SCENARIOS: [(&str, &str); 4] = [
    ("big_dipper", include_str!("../../core/scenarios/big_dipper.toml")),
    ("big_dipper_static", include_str!("../../core/scenarios/big_dipper_static.toml")),
    ("big_dipper_sampled", include_str!("../../core/scenarios/big_dipper_sampled.toml")),
    ("triangle", include_str!("../../core/scenarios/triangle.toml")),
];

fn parse(src: &str) -> Result<Scenario, String> {
    parse_scenario(src, "scenario").map_err(|e| e.to_string())
}

/// Validation record plus the list of failed conditions.
pub fn check_json(src: &str) -> Result<Value, String> {
    let s = parse(src)?;
    Ok(json!({
        "agents": s.topology.len(),
        "validation": s.validation,
        "failures": s.validation.failures(),
    }))
}

/// Runs a scenario and returns at most `MAX_FRAMES` evenly spaced frames.
/// `mode` is `"continuous"`, `"sampled"` or empty for the file's choice.
pub fn simulate_json(src: &str, seed: Option<u64>, mode: &str) -> Result<Value, String> {
    let mut s = parse(src)?;
    let failures = s.validation.failures();
    if !failures.is_empty() {
        return Err(failures.join("; "));
    }
    if let Some(seed) = seed {
        s.config.seed = seed;
        s.config.initial_positions = None;
    }
    match mode {
        "" => {}
        "continuous" => s.set_mode(Mode::Continuous),
        "sampled" => s.set_mode(Mode::Sampled),
        other => return Err(format!("unknown mode `{other}`")),
    }
    let controller = s.controller().map_err(|e| e.to_string())?;
    let trace = simulation::run(&s.config, &controller, &s.target).map_err(|e| e.to_string())?;
    let summary = report(&trace, s.tolerances).map_err(|e| e.to_string())?;
    let stride = trace.len().div_ceil(MAX_FRAMES).max(1);
    let frames: Vec<usize> = (0..trace.len()).step_by(stride).collect();
    let xy = |p: formation_core::geometry::Vec2| [p.x, p.y];
    Ok(json!({
        "times": frames.iter().map(|&k| trace.times[k]).collect::<Vec<_>>(),
        "target": frames.iter().map(|&k| xy(trace.target_pos[k])).collect::<Vec<_>>(),
        "agents": trace.agents.iter().map(|a| frames.iter().map(|&k| xy(a.positions[k])).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "radii": trace.radii,
        "error": frames.iter().map(|&k| trace.max_error(k)).collect::<Vec<_>>(),
        "converged": summary.converged,
        "max_radial_error": summary.max_radial_error(),
        "max_spacing_error": summary.max_spacing_error(),
        "min_pairwise_distance": summary.min_pairwise_distance,
        "warnings": trace.meta.warnings,
    }))
}

/// Phase-error disagreement over time for the scenario's graph, starting
/// from a spread of phases derived from `seed`.
pub fn consensus_json(src: &str, seed: u64, t_end: f64) -> Result<Value, String> {
    let s = parse(src)?;
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err("t_end must be positive".into());
    }
    let n = s.topology.len();
    let offset = (seed % 1000) as f64 * 0.618;
    let mut xi: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + 1.0) * 2.399963 + offset).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI)
        .collect();
    let spread = |xi: &[f64]| {
        let hi = xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = xi.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    };
    let samples = 200;
    let chunk = t_end / samples as f64;
    let mut times = vec![0.0];
    let mut disagreement = vec![spread(&xi)];
    for k in 1..=samples {
        let out = consensus_check(&s.topology, &s.params, &xi, chunk, (chunk / 10.0).min(0.01));
        xi = out.final_state;
        times.push(k as f64 * chunk);
        disagreement.push(out.disagreement);
    }
    Ok(json!({
        "spanning_tree": s.validation.spanning_tree,
        "times": times,
        "disagreement": disagreement,
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

/// TOML source of a shipped scenario.
#[wasm_bindgen]
pub fn scenario_source(name: &str) -> Option<String> {
    SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, s)| s.to_string())
}

#[wasm_bindgen]
pub fn check(src: &str) -> Result<String, JsValue> {
    to_js(check_json(src))
}

#[wasm_bindgen]
pub fn simulate(src: &str, seed: Option<u64>, mode: &str) -> Result<String, JsValue> {
    to_js(simulate_json(src, seed, mode))
}

#[wasm_bindgen]
pub fn consensus(src: &str, seed: u64, t_end: f64) -> Result<String, JsValue> {
    to_js(consensus_json(src, seed, t_end))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(name: &str) -> &'static str {
        SCENARIOS.iter().find(|(n, _)| *n == name).unwrap().1
    }

    #[test]
    fn shipped_scenarios_check_clean() {
        for (name, src) in SCENARIOS {
            let v = check_json(src).unwrap();
            assert!(v["failures"].as_array().unwrap().is_empty(), "{name}");
        }
    }

    #[test]
    fn triangle_simulates_and_converges() {
        let v = simulate_json(source("triangle"), None, "").unwrap();
        assert_eq!(v["agents"].as_array().unwrap().len(), 3);
        assert!(v["times"].as_array().unwrap().len() <= MAX_FRAMES);
        assert_eq!(v["converged"], json!(true));
    }

    #[test]
    fn bad_mode_is_rejected() {
        assert!(simulate_json(source("triangle"), None, "hybrid").is_err());
        assert!(check_json("not toml [").is_err());
    }

    #[test]
    fn ring_reaches_consensus() {
        let v = consensus_json(source("triangle"), 3, 40.0).unwrap();
        let d = v["disagreement"].as_array().unwrap();
        assert!(d[0].as_f64().unwrap() > 0.1);
        assert!(d.last().unwrap().as_f64().unwrap() < 1e-4);
    }
}
