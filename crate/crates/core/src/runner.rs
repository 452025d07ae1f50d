//! Scenario files, the end-to-end pipeline, exports and parameter sweeps.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analogcells::AnalogProfile;
use crate::cmaeq::{self, ButterflyWeights, EqConfig, EqTrace};
use crate::cprc::{costas_run_pair, CprcConfig, CprcTrace};
use crate::error::{Error, Result};
use crate::fiberchan::{apply_channel, random_jones_angles, ChannelConfig, NoiseSpec};
use crate::metrics::{
    ber_from_evm, best_sampling_phase, count_ber, evm_dual, fourth_power_phase, modulus_dispersion,
    resolve_ambiguity, write_constellation_csv, Alignment, BerCount, BerEstimate, EvmReport,
    EyeStats, MetricsReport, StageMetrics,
};
use crate::rxfrontend::{agc, coherent_detect, RxConfig};
use crate::sigkit::{QuadWaveform, Waveform};
use crate::txchain::{transmit, PulseShape, SymbolFrame, Transmission, TxConfig};

/// Identifier of the report layout; bumped on any incompatible change.
pub const REPORT_SCHEMA: &str = "ctcma.run-report/1";

pub const PRESETS: [&str; 4] = ["b2b_40g", "smf5km_40g", "smf10km_40g", "smf5km_100g"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsOptions {
    /// Symbols discarded while the loops settle.
    pub warmup_symbols: usize,
    /// Symbols measured after the warm-up.
    pub measure_symbols: usize,
    /// Alignment search range, symbols each way.
    pub max_lag: usize,
    /// Interpret a target-EVM noise spec inside the receiver bandwidth
    /// rather than over the whole simulation band.
    pub noise_in_band: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions {
            warmup_symbols: 50_000,
            measure_symbols: 1 << 15,
            max_lag: 64,
            noise_in_band: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub n_symbols: usize,
    pub sps: usize,
    /// Seeds channel noise, receiver phase noise and, if enabled, the
    /// polarization rotation.
    pub seed: u64,
    /// Draw the Jones angles from the seed instead of `channel.jones_angles`.
    pub randomize_jones: bool,
    pub tx: TxConfig,
    pub channel: ChannelConfig,
    pub rx: RxConfig,
    pub eq: EqConfig,
    pub cprc: CprcConfig,
    pub metrics: MetricsOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::preset("b2b_40g").expect("built-in preset")
    }
}

impl ScenarioConfig {
    /// The measured links (10 GBd NRZ, chip profile) and the simulated
    /// 25 GBd raised-cosine link. Noise targets the received EVM reported
    /// for each link.
    pub fn preset(name: &str) -> Result<Self> {
        let (rate, length, evm) = match name {
            "b2b_40g" => (10e9, 0.0, 0.28),
            "smf5km_40g" => (10e9, 5.0, 0.32),
            "smf10km_40g" => (10e9, 10.0, 0.33),
            "smf5km_100g" => (25e9, 5.0, 0.278),
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        let metrics = MetricsOptions::default();
        let mut tx = TxConfig {
            symbol_rate: rate,
            ..TxConfig::default()
        };
        if rate > 10e9 {
            tx.pulse = PulseShape::RaisedCosine { rolloff: 0.2 };
        }
        Ok(ScenarioConfig {
            name: name.to_string(),
            n_symbols: metrics.warmup_symbols + metrics.measure_symbols + 64,
            sps: 16,
            seed: 1,
            randomize_jones: false,
            tx,
            channel: ChannelConfig {
                length_km: length,
                noise: NoiseSpec::TargetEvm { evm },
                ..ChannelConfig::default()
            },
            rx: RxConfig {
                rx_bandwidth: 0.75 * rate,
                ..RxConfig::default()
            },
            eq: EqConfig {
                profile: AnalogProfile::chip(),
                symbol_rate: rate,
                ..EqConfig::default()
            },
            cprc: CprcConfig::design(
                rate,
                crate::cprc::DEFAULT_LOOP_BANDWIDTH,
                std::f64::consts::FRAC_1_SQRT_2,
            ),
            metrics,
            output_dir: None,
        })
    }

    /// Parses a scenario file. A top-level `preset = "<name>"` key selects
    /// the base; every other key overrides it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::config(format!("scenario file: {}", e.message()))
        })?;
        let base = match table.remove("preset") {
            Some(toml::Value::String(name)) => ScenarioConfig::preset(&name)?,
            Some(_) => return Err(Error::config("preset: expected a preset name")),
            None => ScenarioConfig::default(),
        };
        let mut merged = base.to_toml_value()?;
        merge(&mut merged, toml::Value::Table(table));
        Self::from_toml_value(merged)
    }

    pub fn to_toml_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| Error::config(format!("serializing scenario: {e}")))
    }

    fn from_toml_value(v: toml::Value) -> Result<Self> {
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(v)
            .map_err(|e| Error::config(format!("{}: {}", e.path(), e.inner().message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("serializing scenario: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.tx.validate()?;
        self.channel.validate()?;
        self.rx.validate()?;
        self.eq.validate()?;
        self.cprc.validate()?;
        if self.sps < 2 || !self.sps.is_multiple_of(2) {
            return Err(Error::config("sps must be even and at least 2"));
        }
        let rate = self.tx.symbol_rate;
        for (name, r) in [
            ("eq.symbol_rate", self.eq.symbol_rate),
            ("cprc.symbol_rate", self.cprc.symbol_rate),
        ] {
            if (r - rate).abs() > 1e-9 * rate {
                return Err(Error::config(format!(
                    "{name} ({r:e}) differs from tx.symbol_rate ({rate:e})"
                )));
            }
        }
        let m = &self.metrics;
        if m.measure_symbols < 1000 {
            return Err(Error::config(
                "metrics.measure_symbols must be at least 1000",
            ));
        }
        if self.n_symbols < m.warmup_symbols + m.measure_symbols + 1 {
            return Err(Error::config(format!(
                "n_symbols ({}) must exceed metrics.warmup_symbols + metrics.measure_symbols ({})",
                self.n_symbols,
                m.warmup_symbols + m.measure_symbols
            )));
        }
        Ok(())
    }

    pub fn sample_rate(&self) -> f64 {
        self.tx.symbol_rate * self.sps as f64
    }
}

/// Recursive table merge; `over` wins on scalars and arrays.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    NotConverged,
    NoLock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqSummary {
    pub converged: bool,
    pub converged_at_symbols: Option<f64>,
    pub restarts: usize,
    pub warnings: Vec<String>,
    pub latency: f64,
    pub final_weights: ButterflyWeights,
    pub initial_weights: ButterflyWeights,
    /// Mean of `(A² − |y|²)²` over every sample of the measurement window.
    pub modulus_objective: f64,
    /// Modulus dispersion of the output at the selected sampling phase.
    pub modulus_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CprcSummary {
    pub locked: Vec<bool>,
    pub lock_time_symbols: Vec<Option<f64>>,
    pub final_phase: Vec<f64>,
    /// Detector RMS over the final lock window.
    pub final_error_rms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub status: RunStatus,
    pub scenario: ScenarioConfig,
    /// Channel noise spec actually applied after in-band calibration.
    pub applied_noise: NoiseSpec,
    pub jones_angles: [f64; 3],
    pub equalizer: EqSummary,
    pub cprc: CprcSummary,
    pub metrics: MetricsReport,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-stage data kept for plotting.
#[derive(Debug, Clone)]
pub struct StageArtifacts {
    pub stage: String,
    pub constellation: [Vec<Complex64>; 2],
    pub eye: EyeStats,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub eq_trace: EqTrace,
    pub cprc_traces: Vec<CprcTrace>,
    pub stages: Vec<StageArtifacts>,
}

/// Equivalent noise bandwidth of the Gaussian receive filter, Hz.
fn gaussian_enbw(f3db: f64) -> f64 {
    f3db * (std::f64::consts::PI / std::f64::consts::LN_2).sqrt()
}

fn child_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ (Error::Divergence { .. } | Error::Config(_)) => e,
        e => e.at(stage),
    }
}

/// tx → channel → front-end → equalizer → CPRC → metrics.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let fs = cfg.sample_rate();
    let FrontEnd {
        tx,
        channel: ch,
        quad,
    } = front_end(cfg)?;

    let (eq_out, trace) = cmaeq::run(&quad, &cfg.eq).map_err(stage_err("equalizer"))?;
    let resolved = cfg.eq.resolve()?;
    let g = resolved.profile.buffer.dc_gain;
    let eq_x = Waveform::new(eq_out.x().iter().map(|v| v / g).collect(), fs)?;
    let eq_y = Waveform::new(eq_out.y().iter().map(|v| v / g).collect(), fs)?;

    let (cprc_out, cprc_traces) =
        costas_run_pair(&eq_x, Some(&eq_y), &cfg.cprc).map_err(stage_err("cprc"))?;

    let rx_x = Waveform::new(quad.x(), fs)?;
    let rx_y = Waveform::new(quad.y(), fs)?;
    let stage_inputs: [(&str, &Waveform, &Waveform, bool); 4] = [
        ("tx", &tx.signal.x, &tx.signal.y, false),
        ("rx", &rx_x, &rx_y, true),
        ("post_eq", &eq_x, &eq_y, true),
        ("post_cprc", &cprc_out[0], &cprc_out[1], false),
    ];
    let mut stages = Vec::new();
    let mut artifacts = Vec::new();
    for (name, x, y, blind) in stage_inputs {
        let (m, a) = measure_stage(name, x, y, &tx.frame, cfg, blind).map_err(stage_err(name))?;
        stages.push(m);
        artifacts.push(a);
    }

    let window = objective_window(&trace, cfg);
    let modulus_error = stages[2].modulus_dispersion;
    let eq_summary = EqSummary {
        converged: trace.converged(),
        converged_at_symbols: trace.converged_at.map(|t| t * cfg.tx.symbol_rate),
        restarts: trace.restarts,
        warnings: trace.warnings.clone(),
        latency: trace.latency,
        final_weights: trace.final_weights.clone(),
        initial_weights: trace.initial_weights.clone(),
        modulus_objective: window,
        modulus_error,
    };
    let cprc_summary = CprcSummary {
        locked: cprc_traces.iter().map(|t| t.is_locked()).collect(),
        lock_time_symbols: cprc_traces
            .iter()
            .map(|t| t.lock_time.map(|v| v * cfg.tx.symbol_rate))
            .collect(),
        final_phase: cprc_traces
            .iter()
            .map(|t| t.phase.last().copied().unwrap_or(0.0))
            .collect(),
        final_error_rms: cprc_traces
            .iter()
            .map(|t| t.error_rms.last().copied().unwrap_or(f64::NAN))
            .collect(),
    };
    let status = if !eq_summary.converged {
        RunStatus::NotConverged
    } else if !cprc_summary.locked.iter().all(|&l| l) {
        RunStatus::NoLock
    } else {
        RunStatus::Ok
    };
    let report = RunReport {
        schema: REPORT_SCHEMA.to_string(),
        status,
        scenario: cfg.clone(),
        applied_noise: ch.noise,
        jones_angles: ch.jones_angles,
        equalizer: eq_summary,
        cprc: cprc_summary,
        metrics: MetricsReport { stages },
    };
    Ok(RunOutcome {
        report,
        eq_trace: trace,
        cprc_traces,
        stages: artifacts,
    })
}

/// Mean objective over the trace intervals inside the measurement window.
fn objective_window(trace: &EqTrace, cfg: &ScenarioConfig) -> f64 {
    let t0 = cfg.metrics.warmup_symbols as f64 / cfg.tx.symbol_rate;
    let vals: Vec<f64> = trace
        .times
        .iter()
        .zip(&trace.modulus_objective)
        .filter(|(t, _)| **t > t0)
        .map(|(_, o)| 0.5 * (o[0] + o[1]))
        .collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Eye, alignment and EVM of one stage over the measurement window. `blind`
/// removes a static phase per polarization first (stages before the CPRC
/// carry the equalizer's arbitrary phase) and fits the complex scale; after
/// the CPRC only the gain is fitted.
fn measure_stage(
    name: &str,
    x: &Waveform,
    y: &Waveform,
    frame: &SymbolFrame,
    cfg: &ScenarioConfig,
    blind: bool,
) -> Result<(StageMetrics, StageArtifacts)> {
    let sps = cfg.sps;
    let m = &cfg.metrics;
    let (a, b) = (
        m.warmup_symbols * sps,
        (m.warmup_symbols + m.measure_symbols) * sps,
    );
    let rot = |w: &Waveform| {
        if blind {
            fourth_power_phase(&w.samples[a..b])
        } else {
            0.0
        }
    };
    let derotation = [rot(x), rot(y)];
    let turn = [
        Complex64::from_polar(1.0, -derotation[0]),
        Complex64::from_polar(1.0, -derotation[1]),
    ];
    let eye_wave = Waveform::new(
        x.samples[a..b].iter().map(|v| v * turn[0]).collect(),
        x.sample_rate,
    )?;
    let (phase, eye) = best_sampling_phase(&eye_wave, sps)?;
    let pick = |w: &Waveform, r: Complex64| -> Vec<Complex64> {
        (0..m.measure_symbols)
            .map(|k| w.samples[(m.warmup_symbols + k) * sps + phase] * r)
            .collect()
    };
    let syms = [pick(x, turn[0]), pick(y, turn[1])];
    let dispersion = 0.5 * (modulus_dispersion(&syms[0]) + modulus_dispersion(&syms[1]));
    let mut metrics = StageMetrics {
        stage: name.to_string(),
        sampling_phase: phase,
        eye_height: eye.eye_height,
        eye_width: eye.eye_width,
        modulus_dispersion: dispersion,
        derotation,
        alignment: None,
        scale: None,
        evm: None,
        ber_estimate: None,
        ber_counted: None,
    };
    let score = score_symbols(
        [&syms[0], &syms[1]],
        m.warmup_symbols,
        frame,
        m.max_lag,
        blind,
    )?;
    let constellation = match score {
        Some(sc) => {
            metrics.alignment = Some(sc.alignment);
            metrics.scale = Some(sc.scale);
            let mut evm = sc.evm;
            evm.sampling_phase = Some(phase as f64 / sps as f64);
            metrics.evm = Some(evm);
            metrics.ber_estimate = Some(sc.ber_estimate);
            metrics.ber_counted = Some(sc.ber_counted);
            sc.symbols
        }
        None => syms,
    };
    Ok((
        metrics,
        StageArtifacts {
            stage: name.to_string(),
            constellation,
            eye,
        },
    ))
}

/// Data-aided figures of a pair of symbol streams.
#[derive(Debug, Clone)]
pub struct SymbolScore {
    pub alignment: Alignment,
    pub scale: [f64; 2],
    pub evm: EvmReport,
    pub ber_estimate: BerEstimate,
    pub ber_counted: BerCount,
    /// Aligned, rotated and scaled symbols per output.
    pub symbols: [Vec<Complex64>; 2],
}

/// Resolves the ambiguity of `syms` (first symbol has frame index `start`)
/// against `frame`, fits a scale per output and scores them. `fit_phase`
/// allows a complex scale; otherwise only the gain is fitted. Returns `None`
/// when no alignment is found.
pub fn score_symbols(
    syms: [&[Complex64]; 2],
    start: usize,
    frame: &SymbolFrame,
    max_lag: usize,
    fit_phase: bool,
) -> Result<Option<SymbolScore>> {
    let alignment = match resolve_ambiguity(syms, start, frame, max_lag) {
        Ok(al) => al,
        Err(Error::AlignmentFailure { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut scaled: [Vec<Complex64>; 2] = [Vec::new(), Vec::new()];
    let mut refs: [Vec<Complex64>; 2] = [Vec::new(), Vec::new()];
    let mut scale = [0.0; 2];
    let mut counted = BerCount {
        errors: 0,
        bits: 0,
        ber: 0.0,
    };
    for o in 0..2 {
        let p = alignment.apply(syms[o], o, frame);
        // projection fit: unbiased under additive noise, unlike least squares
        let num: f64 = p.reference.iter().map(|r| r.norm_sqr()).sum();
        let den: Complex64 = p
            .symbols
            .iter()
            .zip(&p.reference)
            .map(|(s, r)| s * r.conj())
            .sum();
        let mut g = Complex64::new(num, 0.0) / den;
        if !fit_phase {
            g = Complex64::new(g.norm(), 0.0);
        }
        scale[o] = g.norm();
        let c = count_ber(&p.symbols, &p.bits_i, &p.bits_q)?;
        counted.errors += c.errors;
        counted.bits += c.bits;
        scaled[o] = p.symbols.iter().map(|s| s * g).collect();
        refs[o] = p.reference;
    }
    counted.ber = counted.errors as f64 / counted.bits.max(1) as f64;
    let evm = evm_dual(
        [&scaled[0], &scaled[1]],
        [&refs[0], &refs[1]],
        frame.amplitude,
    )?;
    let ber_estimate = ber_from_evm(evm.evm_percent / 100.0, 2, 4)?;
    Ok(Some(SymbolScore {
        alignment,
        scale,
        evm,
        ber_estimate,
        ber_counted: counted,
        symbols: scaled,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Json,
    Csv,
    All,
}

impl std::str::FromStr for ExportKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ExportKind::Json),
            "csv" => Ok(ExportKind::Csv),
            "all" => Ok(ExportKind::All),
            other => Err(Error::config(format!(
                "export must be csv, json or all, got {other:?}"
            ))),
        }
    }
}

/// Writes report.json and/or the CSV artifacts into `dir`.
pub fn export(outcome: &RunOutcome, dir: &Path, kind: ExportKind) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if matches!(kind, ExportKind::Json | ExportKind::All) {
        std::fs::write(dir.join("report.json"), outcome.report.to_json()? + "\n")?;
    }
    if matches!(kind, ExportKind::Csv | ExportKind::All) {
        outcome.eq_trace.write_csv(&dir.join("taps.csv"))?;
        for s in &outcome.stages {
            write_constellation_csv(
                &dir.join(format!("constellation_{}.csv", s.stage)),
                [&s.constellation[0], &s.constellation[1]],
            )?;
            s.eye.write_csv(&dir.join(format!("eye_{}.csv", s.stage)))?;
        }
        write_cprc_csv(&outcome.cprc_traces, &dir.join("cprc_trace.csv"))?;
    }
    Ok(())
}

fn write_cprc_csv(traces: &[CprcTrace], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "pol,time,phase,control,error_rms,locked")?;
    for (p, tr) in traces.iter().enumerate() {
        let pol = if p == 0 { "x" } else { "y" };
        for i in 0..tr.times.len() {
            writeln!(
                out,
                "{pol},{:.6e},{:.9e},{:.9e},{:.6e},{}",
                tr.times[i], tr.phase[i], tr.control[i], tr.error_rms[i], tr.locked[i] as u8
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of a sweep point: starting from the base seed, each parameter in
/// grid order is folded in as `h ← splitmix64(h ^ fnv1a64("path=value"))`,
/// with values in their TOML text form.
pub fn child_seed(base: u64, params: &[(String, toml::Value)]) -> u64 {
    let mut h = splitmix64(base);
    for (path, value) in params {
        let text = format!("{path}={value}");
        let mut f: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            f ^= b as u64;
            f = f.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h = splitmix64(h ^ f);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    /// Dotted key path, e.g. `eq.beta`.
    pub path: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub index: usize,
    pub params: Vec<(String, toml::Value)>,
    pub config: ScenarioConfig,
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("invalid key path {path:?}")));
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*k))
            .filter(|v| v.is_table())
            .ok_or_else(|| Error::config(format!("invalid key path {path:?}: no section {k:?}")))?;
    }
    node.as_table_mut()
        .expect("walked into a table")
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Cartesian product of the axes (first axis slowest). Every point is built
/// and validated before anything runs.
pub fn expand_grid(base: &ScenarioConfig, axes: &[SweepAxis]) -> Result<Vec<SweepPoint>> {
    let base_value = base.to_toml_value()?;
    let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for axis in axes {
        if axis.values.is_empty() {
            return Err(Error::config(format!(
                "sweep axis {} has no values",
                axis.path
            )));
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                axis.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((axis.path.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .enumerate()
        .map(|(index, params)| {
            let mut v = base_value.clone();
            for (p, val) in &params {
                set_path(&mut v, p, val.clone())?;
            }
            let mut config = ScenarioConfig::from_toml_value(v)?;
            if !params.is_empty() {
                config.seed = child_seed(base.seed, &params);
            }
            Ok(SweepPoint {
                index,
                params,
                config,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub point: SweepPoint,
    pub outcome: std::result::Result<RunOutcome, String>,
}

/// Runs every point, in parallel. Failed runs are recorded, not fatal.
pub fn sweep(base: &ScenarioConfig, axes: &[SweepAxis]) -> Result<Vec<SweepResult>> {
    let points = expand_grid(base, axes)?;
    Ok(points
        .into_par_iter()
        .map(|point| {
            let outcome = run_scenario(&point.config).map_err(|e| e.to_string());
            SweepResult { point, outcome }
        })
        .collect())
}

/// One row per run: parameters, seed, status and headline figures.
pub fn write_sweep_summary(results: &[SweepResult], axes: &[SweepAxis], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "run")?;
    for a in axes {
        write!(out, ",{}", a.path)?;
    }
    writeln!(
        out,
        ",seed,status,converged_at_symbols,modulus_error,modulus_objective,evm_post_eq,evm_post_cprc,ber_estimate,ber_counted,error"
    )?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
    for r in results {
        write!(out, "{}", r.point.index)?;
        for (_, v) in &r.point.params {
            write!(out, ",{}", v.to_string().replace(',', ";"))?;
        }
        write!(out, ",{}", r.point.config.seed)?;
        match &r.outcome {
            Ok(o) => {
                let rep = &o.report;
                let stage = |n: &str| rep.metrics.stage(n);
                let evm = |n: &str| stage(n).and_then(|s| s.evm.as_ref()).map(|e| e.evm_percent);
                let post = stage("post_cprc");
                writeln!(
                    out,
                    ",{},{},{},{},{},{},{},{},",
                    serde_json::to_value(rep.status)?.as_str().unwrap_or(""),
                    fmt(rep.equalizer.converged_at_symbols),
                    fmt(Some(rep.equalizer.modulus_error)),
                    fmt(Some(rep.equalizer.modulus_objective)),
                    fmt(evm("post_eq")),
                    fmt(evm("post_cprc")),
                    fmt(post.and_then(|s| s.ber_estimate).map(|b| b.ber)),
                    fmt(post.and_then(|s| s.ber_counted).map(|b| b.ber)),
                )?;
            }
            Err(e) => writeln!(out, ",error,,,,,,,,{}", e.replace([',', '\n'], ";"))?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads `path = [values]` pairs from a TOML table, in file order.
pub fn parse_grid(text: &str) -> Result<Vec<SweepAxis>> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config(format!("grid file: {}", e.message())))?;
    let mut axes = Vec::new();
    flatten_grid("", &table, &mut axes)?;
    Ok(axes)
}

fn flatten_grid(prefix: &str, table: &toml::Table, axes: &mut Vec<SweepAxis>) -> Result<()> {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Array(values) => axes.push(SweepAxis {
                path,
                values: values.clone(),
            }),
            toml::Value::Table(t) => flatten_grid(&path, t, axes)?,
            _ => {
                return Err(Error::config(format!(
                    "grid entry {path} must be an array of values"
                )))
            }
        }
    }
    Ok(())
}

/// Zero-noise, ideal-profile variant of a preset, as used for the clean
/// convergence checks.
pub fn clean_variant(mut cfg: ScenarioConfig) -> ScenarioConfig {
    cfg.channel.noise = NoiseSpec::None;
    cfg.eq.profile = AnalogProfile::ideal();
    cfg
}

/// Everything up to the equalizer input.
pub struct FrontEnd {
    pub tx: Transmission,
    /// Channel as applied: randomized Jones angles and calibrated noise.
    pub channel: ChannelConfig,
    /// Received field after detection and AGC.
    pub quad: QuadWaveform,
}

/// Runs tx → channel → coherent detection → AGC for a scenario.
pub fn front_end(cfg: &ScenarioConfig) -> Result<FrontEnd> {
    cfg.validate()?;
    let tx = transmit(&cfg.tx, cfg.n_symbols, cfg.sps).map_err(stage_err("tx"))?;
    let mut ch = cfg.channel.clone();
    if cfg.randomize_jones {
        ch.jones_angles = random_jones_angles(&mut child_rng(cfg.seed, 3));
    }
    if let NoiseSpec::TargetEvm { evm } = ch.noise {
        if cfg.metrics.noise_in_band && cfg.rx.rx_bandwidth.is_finite() {
            let fraction = (gaussian_enbw(cfg.rx.rx_bandwidth) / cfg.sample_rate()).min(1.0);
            ch.noise = NoiseSpec::TargetEvm {
                evm: evm / fraction.sqrt(),
            };
        }
    }
    let sig = apply_channel(&tx.signal, &ch, &mut child_rng(cfg.seed, 1))
        .map_err(stage_err("channel"))?;
    let detected = coherent_detect(
        &sig,
        &cfg.rx,
        Some(&tx.laser_phase),
        &mut child_rng(cfg.seed, 2),
    )
    .map_err(stage_err("rx"))?;
    let (quad, _) = agc(&detected, cfg.rx.agc_target).map_err(stage_err("rx"))?;
    Ok(FrontEnd {
        tx,
        channel: ch,
        quad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: &str) -> ScenarioConfig {
        let mut c = ScenarioConfig::preset(name).unwrap();
        c.metrics.warmup_symbols = 3000;
        c.metrics.measure_symbols = 2000;
        c.n_symbols = 5100;
        c.sps = 8;
        c
    }

    #[test]
    fn presets_parse_and_validate() {
        for p in PRESETS {
            let c = ScenarioConfig::preset(p).unwrap();
            c.validate().unwrap();
            let back = ScenarioConfig::from_toml(&c.to_toml_string().unwrap()).unwrap();
            assert_eq!(back, c, "{p}");
        }
        assert!(ScenarioConfig::preset("b2b_400g").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = ScenarioConfig::from_toml("preset = \"b2b_40g\"\n[eq]\nbta = 1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("eq") && msg.contains("bta"), "{msg}");
        let err = ScenarioConfig::from_toml("n_symbol = 5").unwrap_err();
        assert!(err.to_string().contains("n_symbol"));
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let c = ScenarioConfig::from_toml(
            "preset = \"smf10km_40g\"\nseed = 9\n[eq]\nprofile = \"ideal\"\n[channel.noise]\nkind = \"none\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.channel.length_km, 10.0);
        assert_eq!(c.channel.noise, NoiseSpec::None);
        assert_eq!(c.eq.profile, AnalogProfile::ideal());
    }

    #[test]
    fn mismatched_rates_rejected() {
        let mut c = ScenarioConfig::preset("b2b_40g").unwrap();
        c.eq.symbol_rate = 25e9;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn small_run_is_deterministic() {
        let c = small("b2b_40g");
        let a = run_scenario(&c).unwrap().report.to_json().unwrap();
        let b = run_scenario(&c).unwrap().report.to_json().unwrap();
        assert_eq!(a, b);
        let echoed: RunReport = serde_json::from_str(&a).unwrap();
        assert_eq!(echoed.scenario, c);
        assert_eq!(echoed.schema, REPORT_SCHEMA);
    }

    #[test]
    fn tx_stage_is_exact() {
        let out = run_scenario(&small("b2b_40g")).unwrap();
        let tx = out.report.metrics.stage("tx").unwrap();
        assert!(tx.evm.as_ref().unwrap().evm_percent < 1e-9);
        assert_eq!(tx.ber_counted.unwrap().errors, 0);
        assert_eq!(tx.sampling_phase, 4);
    }

    #[test]
    fn exports_every_artifact() {
        let out = run_scenario(&small("b2b_40g")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&out, dir.path(), ExportKind::All).unwrap();
        for f in ["report.json", "taps.csv", "cprc_trace.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        for s in ["tx", "rx", "post_eq", "post_cprc"] {
            assert!(dir.path().join(format!("constellation_{s}.csv")).exists());
            assert!(dir.path().join(format!("eye_{s}.csv")).exists());
        }
        let json = tempfile::tempdir().unwrap();
        export(&out, json.path(), ExportKind::Json).unwrap();
        assert!(!json.path().join("taps.csv").exists());
    }

    #[test]
    fn grid_expansion() {
        let base = small("b2b_40g");
        assert_eq!(expand_grid(&base, &[]).unwrap().len(), 1);
        assert_eq!(expand_grid(&base, &[]).unwrap()[0].config.seed, base.seed);
        let axes = parse_grid(
            "\"eq.beta\" = [1e6, 2e6]\n[eq]\nintegrator_dc_gain_db = [60.0, 40.0, 103.9]\n",
        )
        .unwrap();
        let pts = expand_grid(&base, &axes).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[5].config.eq.beta, 2e6);
        assert_eq!(pts[5].config.eq.integrator_dc_gain_db, Some(103.9));
        let seeds: std::collections::BTreeSet<u64> = pts.iter().map(|p| p.config.seed).collect();
        assert_eq!(seeds.len(), 6);
        let again = expand_grid(&base, &axes).unwrap();
        assert_eq!(again[3].config.seed, pts[3].config.seed);
    }

    #[test]
    fn grid_rejects_bad_paths_before_running() {
        let base = small("b2b_40g");
        for path in ["eq.bta", "equ.beta", "eq..beta", "n_symbols.x"] {
            let axes = vec![SweepAxis {
                path: path.into(),
                values: vec![toml::Value::Float(1.0)],
            }];
            assert!(expand_grid(&base, &axes).is_err(), "{path}");
        }
    }

    #[test]
    fn splitmix_reference_values() {
        // first outputs of the reference generator seeded with 0
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(splitmix64(0x9e37_79b9_7f4a_7c15), 0x6e78_9e6a_a1b9_65f4);
    }
}
