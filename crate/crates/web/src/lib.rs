//! wasm-bindgen entry points for `www/index.html`.
//!
//! Everything crosses the boundary as numbers or JSON strings, so the page
//! needs no bundler and the functions are testable natively.

use ctcma::metrics;
use ctcma::runner::{run_scenario, RunOutcome, ScenarioConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Points per constellation plot; more only slows the canvas down.
const MAX_POINTS: usize = 1500;

/// Estimated DP-QPSK bit error ratio for an EVM given in percent.
#[wasm_bindgen]
pub fn ber_from_evm(evm_percent: f64) -> Result<f64, String> {
    metrics::ber_from_evm(evm_percent / 100.0, 2, 4)
        .map(|b| b.ber)
        .map_err(|e| e.to_string())
}

/// A preset shortened to browser scale (8 samples per symbol, 14k symbols),
/// as editable TOML.
#[wasm_bindgen]
pub fn demo_scenario(preset: &str) -> Result<String, String> {
    let mut cfg = ScenarioConfig::preset(preset).map_err(|e| e.to_string())?;
    cfg.sps = 8;
    cfg.n_symbols = 14_000;
    cfg.metrics.warmup_symbols = 10_000;
    cfg.metrics.measure_symbols = 3_000;
    cfg.to_toml_string().map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Point(f64, f64);

#[derive(Serialize)]
struct StageView {
    stage: String,
    evm_percent: Option<f64>,
    ber_estimate: Option<f64>,
    ber_counted: Option<f64>,
    eye_height: f64,
    points: Vec<Point>,
}

#[derive(Serialize)]
struct SimulationView {
    status: String,
    converged_at_symbols: Option<f64>,
    restarts: usize,
    warnings: Vec<String>,
    stages: Vec<StageView>,
    /// Symbol index and |h| of every filter's main tap, per trace point.
    tap_trace: Vec<(f64, [f64; 4])>,
    cprc_locked: Vec<bool>,
}

fn view(o: &RunOutcome) -> SimulationView {
    let r = &o.report;
    let rate = r.scenario.tx.symbol_rate;
    let stages = o
        .stages
        .iter()
        .zip(&r.metrics.stages)
        .filter(|(a, _)| a.stage != "tx")
        .map(|(a, m)| {
            let [x, _] = &a.constellation;
            let step = (x.len() / MAX_POINTS).max(1);
            StageView {
                stage: a.stage.clone(),
                evm_percent: m.evm.as_ref().map(|e| e.evm_percent),
                ber_estimate: m.ber_estimate.map(|b| b.ber),
                ber_counted: m.ber_counted.map(|b| b.ber),
                eye_height: m.eye_height,
                points: x.iter().step_by(step).map(|v| Point(v.re, v.im)).collect(),
            }
        })
        .collect();
    let tap_trace = o
        .eq_trace
        .times
        .iter()
        .zip(&o.eq_trace.weights)
        .map(|(t, w)| {
            let f = w.filters();
            (
                t * rate,
                [
                    f[0][0].norm(),
                    f[1][0].norm(),
                    f[2][0].norm(),
                    f[3][0].norm(),
                ],
            )
        })
        .collect();
    SimulationView {
        status: serde_json::to_value(r.status)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
        converged_at_symbols: r.equalizer.converged_at_symbols,
        restarts: r.equalizer.restarts,
        warnings: r.equalizer.warnings.clone(),
        stages,
        tap_trace,
        cprc_locked: r.cprc.locked.clone(),
    }
}

/// Runs a scenario given as TOML and returns the plotted figures as JSON.
#[wasm_bindgen]
pub fn simulate(scenario_toml: &str) -> Result<String, String> {
    let cfg = ScenarioConfig::from_toml(scenario_toml).map_err(|e| e.to_string())?;
    let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
    serde_json::to_string(&view(&out)).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ber_matches_core() {
        let b = ber_from_evm(33.0).unwrap();
        assert!((b - 1.2215e-3).abs() < 1e-6);
        assert!(ber_from_evm(-1.0).is_err());
    }

    #[test]
    fn demo_scenarios_simulate() {
        let text = demo_scenario("b2b_40g").unwrap();
        let json = simulate(&text).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["stages"].as_array().unwrap().len(), 3);
        assert!(v["stages"][2]["points"].as_array().unwrap().len() <= MAX_POINTS + 1);
        assert!(!v["tap_trace"].as_array().unwrap().is_empty());
        assert!(demo_scenario("b2b_4g").is_err());
    }

    #[test]
    fn bad_scenarios_report_the_field() {
        let err = simulate("[eq]\nbeta = \"x\"\n").unwrap_err();
        assert!(err.contains("eq.beta"), "{err}");
    }
}
