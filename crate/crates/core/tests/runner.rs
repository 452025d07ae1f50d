//! End-to-end behaviour of scenario files, reports, exports and sweeps.

use ctcma::runner::{
    child_seed, expand_grid, export, parse_grid, run_scenario, sweep, write_sweep_summary,
    ExportKind, RunReport, RunStatus, ScenarioConfig, SweepAxis, REPORT_SCHEMA,
};
use ctcma::Error;

/// Short clean run: enough symbols for the equalizer and loop to settle.
fn quick() -> ScenarioConfig {
    let mut c = ScenarioConfig::from_toml(
        r#"
preset = "b2b_40g"
n_symbols = 14000
sps = 8

[metrics]
warmup_symbols = 10000
measure_symbols = 3000

[channel.noise]
kind = "none"

[eq]
profile = "ideal"
"#,
    )
    .unwrap();
    c.name = "quick".into();
    c
}

#[test]
fn scenario_file_round_trips_through_toml() {
    for name in ["b2b_40g", "smf5km_40g", "smf10km_40g", "smf5km_100g"] {
        let c = ScenarioConfig::preset(name).unwrap();
        let text = c.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), c);
    }
}

#[test]
fn typos_are_reported_with_their_path() {
    let cases = [
        ("[tx]\nsymbol_rte = 1e10\n", "tx"),
        ("[channel]\nlenght_km = 3.0\n", "channel"),
        ("[cprc]\nkp = \"fast\"\n", "cprc.kp"),
        (
            "[channel.noise]\nkind = \"target_evm\"\nevn = 0.3\n",
            "channel.noise",
        ),
    ];
    for (text, path) in cases {
        match ScenarioConfig::from_toml(text) {
            Err(Error::Config(msg)) => assert!(msg.contains(path), "{msg:?} lacks {path}"),
            other => panic!("{text:?} gave {other:?}"),
        }
    }
}

#[test]
fn infinite_bandwidths_serialize_as_absent() {
    let mut c = quick();
    c.rx.rx_bandwidth = f64::INFINITY;
    let text = c.to_toml_string().unwrap();
    let back = ScenarioConfig::from_toml(&text).unwrap();
    assert!(back.rx.rx_bandwidth.is_infinite());
    let json = serde_json::to_string(&c).unwrap();
    let back: ScenarioConfig = serde_json::from_str(&json).unwrap();
    assert!(back.rx.rx_bandwidth.is_infinite());
}

#[test]
fn report_is_versioned_and_echoes_config() {
    let c = quick();
    let out = run_scenario(&c).unwrap();
    assert_eq!(out.report.status, RunStatus::Ok);
    let json = out.report.to_json().unwrap();
    let back: RunReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.schema, REPORT_SCHEMA);
    assert_eq!(back.scenario, c);
    assert_eq!(back, out.report);
    for stage in ["tx", "rx", "post_eq", "post_cprc"] {
        assert!(back.metrics.stage(stage).is_some(), "{stage}");
    }
}

#[test]
fn export_kinds_write_the_expected_files() {
    let out = run_scenario(&quick()).unwrap();
    let csv = tempfile::tempdir().unwrap();
    export(&out, csv.path(), ExportKind::Csv).unwrap();
    assert!(!csv.path().join("report.json").exists());
    let taps = std::fs::read_to_string(csv.path().join("taps.csv")).unwrap();
    assert!(taps.starts_with("time,"));
    let cprc = std::fs::read_to_string(csv.path().join("cprc_trace.csv")).unwrap();
    assert!(cprc.starts_with("pol,time,phase,control,error_rms,locked"));
    assert!(cprc.lines().any(|l| l.starts_with("y,")));
    let c = std::fs::read_to_string(csv.path().join("constellation_post_cprc.csv")).unwrap();
    assert_eq!(c.lines().next(), Some("pol,re,im"));
    let eye = std::fs::read_to_string(csv.path().join("eye_rx.csv")).unwrap();
    assert_eq!(eye.lines().next(), Some("phase,amplitude,count"));
}

#[test]
fn empty_grid_is_exactly_the_base_run() {
    let base = quick();
    let results = sweep(&base, &[]).unwrap();
    assert_eq!(results.len(), 1);
    let swept = results[0]
        .outcome
        .as_ref()
        .unwrap()
        .report
        .to_json()
        .unwrap();
    let direct = run_scenario(&base).unwrap().report.to_json().unwrap();
    assert_eq!(swept, direct);
}

#[test]
fn invalid_grids_fail_before_running() {
    let base = quick();
    let bad = [
        "\"eq.betta\" = [1.0]",
        "\"equalizer.beta\" = [1.0]",
        "\"eq.beta\" = []",
        "\"eq.beta\" = [-1.0]",
        "\"sps\" = [3]",
    ];
    for g in bad {
        let axes = parse_grid(g).unwrap();
        assert!(expand_grid(&base, &axes).is_err(), "{g}");
        assert!(sweep(&base, &axes).is_err(), "{g}");
    }
    assert!(parse_grid("\"eq.beta\" = 1.0").is_err());
}

#[test]
fn sweep_seeds_follow_the_documented_rule() {
    let base = quick();
    let axes = parse_grid("\"eq.beta\" = [1e6, 4e6]\n\"seed_free\" = [1]").unwrap_or_default();
    assert!(expand_grid(&base, &axes).is_err());
    let axes = vec![SweepAxis {
        path: "eq.beta".into(),
        values: vec![toml::Value::Float(1e6), toml::Value::Float(4e6)],
    }];
    let pts = expand_grid(&base, &axes).unwrap();
    for p in &pts {
        assert_eq!(p.config.seed, child_seed(base.seed, &p.params));
    }
    assert_ne!(pts[0].config.seed, pts[1].config.seed);
    // the value enters through its TOML text
    let by_hand = child_seed(base.seed, &[("eq.beta".into(), toml::Value::Float(1e6))]);
    assert_eq!(pts[0].config.seed, by_hand);
}

#[test]
fn sweep_summary_has_one_row_per_run() {
    let base = quick();
    let axes = vec![SweepAxis {
        path: "eq.beta".into(),
        values: vec![toml::Value::Float(1e6), toml::Value::Float(2e6)],
    }];
    let results = sweep(&base, &axes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("summary.csv");
    write_sweep_summary(&results, &axes, &path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("run,eq.beta,seed,status"));
    let cols = lines[0].split(',').count();
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), cols, "{l}");
        assert!(l.contains(",ok,"), "{l}");
    }
}
