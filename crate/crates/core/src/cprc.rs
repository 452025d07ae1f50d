//! Decision-assisted Costas loop: single-sideband derotation, QPSK phase
//! detector, PI loop filter and a quadrature VCO.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigkit::Waveform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CprcConfig {
    /// Proportional gain, control units per unit detector output.
    pub kp: f64,
    /// Integral gain, control units per unit detector output per second.
    pub ki: f64,
    /// VCO tuning sensitivity, Hz per control unit.
    pub qvco_gain: f64,
    /// Reference modulus A of the decision points.
    pub modulus: f64,
    pub symbol_rate: f64,
    /// Lock is asserted while the RMS detector output over the last
    /// `lock_symbols` symbols stays below this.
    pub lock_threshold: f64,
    pub lock_symbols: usize,
    /// Independent loop per polarization; otherwise Y follows X's VCO.
    pub per_polarization: bool,
}

/// Noise bandwidth of the default loop, as a fraction of the symbol rate.
pub const DEFAULT_LOOP_BANDWIDTH: f64 = 5e-3;

impl Default for CprcConfig {
    fn default() -> Self {
        Self::design(
            10e9,
            DEFAULT_LOOP_BANDWIDTH,
            std::f64::consts::FRAC_1_SQRT_2,
        )
    }
}

impl CprcConfig {
    /// Second-order type-2 loop with noise bandwidth `bn_rel·symbol_rate`
    /// and damping `zeta`, assuming a unit-slope detector.
    pub fn design(symbol_rate: f64, bn_rel: f64, zeta: f64) -> Self {
        let qvco_gain = 1e9;
        let bn = bn_rel * symbol_rate;
        // Bn = ωn/2·(ζ + 1/(4ζ)) for the type-2 loop
        let wn = 2.0 * bn / (zeta + 0.25 / zeta);
        let kv = 2.0 * PI * qvco_gain;
        CprcConfig {
            kp: 2.0 * zeta * wn / kv,
            ki: wn * wn / kv,
            qvco_gain,
            modulus: 1.0,
            symbol_rate,
            lock_threshold: 0.3,
            lock_symbols: 1000,
            per_polarization: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kp >= 0.0 && self.ki >= 0.0) || (self.kp == 0.0 && self.ki == 0.0) {
            return Err(Error::config(
                "cprc.kp and cprc.ki must be non-negative and not both zero",
            ));
        }
        if !(self.qvco_gain > 0.0 && self.qvco_gain.is_finite()) {
            return Err(Error::config("cprc.qvco_gain must be positive"));
        }
        if !(self.modulus > 0.0 && self.symbol_rate > 0.0) {
            return Err(Error::config(
                "cprc.modulus and cprc.symbol_rate must be positive",
            ));
        }
        if !(self.lock_threshold > 0.0) || self.lock_symbols == 0 {
            return Err(Error::config(
                "cprc lock threshold and window must be positive",
            ));
        }
        Ok(())
    }
}

/// Nearest QPSK point of modulus `a`. On a decision boundary the point with
/// the lower angle in [0, 2π) wins.
#[inline]
pub fn qpsk_decide(v: Complex64, a: f64) -> Complex64 {
    let s = a * std::f64::consts::FRAC_1_SQRT_2;
    let im = if v.im >= 0.0 { s } else { -s };
    let re = if v.re > 0.0 || (v.re == 0.0 && v.im > 0.0) {
        s
    } else {
        -s
    };
    Complex64::new(re, im)
}

/// `Im{v·conj(dec(v))}/A²`: positive when `v` leads its decision.
#[inline]
pub fn phase_detect(v: Complex64, a: f64) -> f64 {
    (v * qpsk_decide(v, a).conj()).im / (a * a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CprcTrace {
    /// One row per symbol: time, phase estimate (unwrapped), control.
    pub times: Vec<f64>,
    pub phase: Vec<f64>,
    pub control: Vec<f64>,
    /// Detector RMS over the lock window; NaN until the window fills.
    pub error_rms: Vec<f64>,
    pub locked: Vec<bool>,
    /// Time at which lock was first asserted and held to the end.
    pub lock_time: Option<f64>,
}

impl CprcTrace {
    pub fn is_locked(&self) -> bool {
        self.locked.last().copied().unwrap_or(false)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "time,phase,control,error_rms,locked")?;
        for i in 0..self.times.len() {
            writeln!(
                out,
                "{:.6e},{:.9e},{:.9e},{:.6e},{}",
                self.times[i],
                self.phase[i],
                self.control[i],
                self.error_rms[i],
                self.locked[i] as u8
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Loop state: integrator of the PI filter and the VCO phase.
#[derive(Debug, Clone, Default)]
struct Loop {
    integral: f64,
    theta: f64,
}

impl Loop {
    #[inline]
    fn step(&mut self, e: f64, cfg: &CprcConfig, dt: f64) -> f64 {
        self.integral += cfg.ki * e * dt;
        let control = cfg.kp * e + self.integral;
        self.theta += 2.0 * PI * cfg.qvco_gain * control * dt;
        control
    }
}

/// Runs the loop over one polarization.
pub fn costas_run(x: &Waveform, cfg: &CprcConfig) -> Result<(Waveform, CprcTrace)> {
    let (outs, traces) = costas_run_pair(x, None, cfg)?;
    Ok((
        outs.into_iter().next().expect("one output"),
        traces.into_iter().next().expect("one trace"),
    ))
}

/// Runs X and, if given, Y. With `per_polarization` off, Y is derotated by
/// X's VCO.
pub fn costas_run_pair(
    x: &Waveform,
    y: Option<&Waveform>,
    cfg: &CprcConfig,
) -> Result<(Vec<Waveform>, Vec<CprcTrace>)> {
    cfg.validate()?;
    if let Some(y) = y {
        if !x.same_grid(y) {
            return Err(Error::invalid("X and Y inputs differ in grid"));
        }
    }
    let dt = x.dt();
    let sps = x.sample_rate / cfg.symbol_rate;
    let per_sym = (sps.round() as usize).max(1);
    let a = cfg.modulus;
    let mut loops = [Loop::default(), Loop::default()];
    let pols: Vec<&Waveform> = std::iter::once(x).chain(y).collect();
    let mut outs: Vec<Vec<Complex64>> = pols.iter().map(|w| Vec::with_capacity(w.len())).collect();
    let mut traces: Vec<CprcTrace> = pols
        .iter()
        .map(|_| CprcTrace {
            times: Vec::new(),
            phase: Vec::new(),
            control: Vec::new(),
            error_rms: Vec::new(),
            locked: Vec::new(),
            lock_time: None,
        })
        .collect();
    let mut sq = vec![0.0; pols.len()];
    // per-symbol sums of e² over the lock window
    let mut window: Vec<VecDeque<f64>> =
        vec![VecDeque::with_capacity(cfg.lock_symbols + 1); pols.len()];
    let mut window_sum = vec![0.0; pols.len()];
    let mut control = vec![0.0; pols.len()];
    for i in 0..x.len() {
        let thetas = [loops[0].theta, loops[1].theta];
        for (p, w) in pols.iter().enumerate() {
            let lp = if cfg.per_polarization { p } else { 0 };
            let theta = thetas[lp];
            let v = w.samples[i] * Complex64::from_polar(1.0, -theta);
            outs[p].push(v);
            let e = phase_detect(v, a);
            sq[p] += e * e;
            if cfg.per_polarization || p == 0 {
                control[p] = loops[lp].step(e, cfg, dt);
            }
        }
        if (i + 1) % per_sym == 0 {
            for p in 0..pols.len() {
                let lp = if cfg.per_polarization { p } else { 0 };
                window[p].push_back(sq[p]);
                window_sum[p] += sq[p];
                sq[p] = 0.0;
                if window[p].len() > cfg.lock_symbols {
                    window_sum[p] -= window[p].pop_front().expect("non-empty");
                }
                let rms = if window[p].len() == cfg.lock_symbols {
                    (window_sum[p].max(0.0) / (cfg.lock_symbols * per_sym) as f64).sqrt()
                } else {
                    f64::NAN
                };
                let tr = &mut traces[p];
                let t = x.time(i);
                let locked = rms < cfg.lock_threshold;
                if locked && tr.lock_time.is_none() {
                    tr.lock_time = Some(t);
                } else if !locked {
                    tr.lock_time = None;
                }
                tr.times.push(t);
                tr.phase.push(loops[lp].theta);
                tr.control.push(control[lp]);
                tr.error_rms.push(rms);
                tr.locked.push(locked);
            }
        }
    }
    let waves = outs
        .into_iter()
        .zip(&pols)
        .map(|(s, w)| w.map_samples(s))
        .collect();
    Ok((waves, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::txchain::{transmit, TxConfig};
    use proptest::prelude::*;

    const A: f64 = 1.0;

    fn point(k: i32) -> Complex64 {
        Complex64::from_polar(A, PI / 4.0 + k as f64 * PI / 2.0)
    }

    #[test]
    fn on_constellation_is_zero() {
        for k in 0..4 {
            assert!(phase_detect(point(k), A).abs() < 1e-15);
        }
    }

    #[test]
    fn small_rotation_sign_and_size() {
        let v = point(0) * Complex64::from_polar(1.0, 0.1);
        let e = phase_detect(v, A);
        assert!(e > 0.0);
        assert!((e - (0.1f64).sin()).abs() < 1e-12);
        let v = point(2) * Complex64::from_polar(1.0, -0.1);
        assert!(phase_detect(v, A) < 0.0);
    }

    #[test]
    fn boundary_is_maximal_and_breaks_low() {
        let on_axis = Complex64::new(0.0, A);
        assert!((qpsk_decide(on_axis, A) - point(0)).norm() < 1e-15);
        let e_boundary = phase_detect(on_axis, A).abs();
        for i in 0..100 {
            let v = point(0) * Complex64::from_polar(1.0, i as f64 * PI / 400.0);
            assert!(phase_detect(v, A).abs() <= e_boundary + 1e-12);
        }
        assert!((qpsk_decide(Complex64::new(A, 0.0), A) - point(0)).norm() < 1e-15);
        assert!((qpsk_decide(Complex64::new(-A, 0.0), A) - point(1)).norm() < 1e-15);
        assert!((qpsk_decide(Complex64::new(0.0, -A), A) - point(2)).norm() < 1e-15);
    }

    fn clean_qpsk(n: usize, sps: usize) -> Waveform {
        transmit(&TxConfig::default(), n, sps).unwrap().signal.x
    }

    fn rotate(w: &Waveform, df: f64, phi: f64) -> Waveform {
        let s = w
            .samples
            .iter()
            .enumerate()
            .map(|(i, &v)| v * Complex64::from_polar(1.0, 2.0 * PI * df * w.time(i) + phi))
            .collect();
        w.map_samples(s)
    }

    #[test]
    fn zero_offset_passes_through() {
        let w = clean_qpsk(3000, 16);
        let (out, tr) = costas_run(&w, &CprcConfig::default()).unwrap();
        for (a, b) in out.samples.iter().zip(&w.samples) {
            assert!((a - b).norm() < 1e-6);
        }
        assert_eq!(tr.lock_time, Some(tr.times[999]));
    }

    /// Phase error of the derotated centre samples, folded to (−π/4, π/4].
    fn residual_deg(out: &Waveform, from_sym: usize, sps: usize) -> f64 {
        let n = out.len() / sps;
        let errs: Vec<f64> = (from_sym..n)
            .map(|k| {
                let v = out.samples[k * sps + sps / 2];
                let d = qpsk_decide(v, A);
                (v * d.conj()).arg()
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let ms = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errs.len() as f64;
        ms.sqrt().to_degrees()
    }

    #[test]
    fn pulls_in_100mhz_offset() {
        let sps = 16;
        let n = 40_000;
        let w = rotate(&clean_qpsk(n, sps), 100e6, 0.3);
        let (out, tr) = costas_run(&w, &CprcConfig::default()).unwrap();
        let lock = tr.lock_time.expect("locks");
        assert!(lock * 10e9 < 1e5, "lock at {} symbols", lock * 10e9);
        let from = (lock * 10e9) as usize + 1000;
        let rms = residual_deg(&out, from, sps);
        assert!(rms < 2.0, "residual {rms}°");
    }

    #[test]
    fn static_phase_converges_modulo_quarter_turn() {
        let sps = 16;
        let phi = 1.0;
        let w = rotate(&clean_qpsk(20_000, sps), 0.0, phi);
        let (_, tr) = costas_run(&w, &CprcConfig::default()).unwrap();
        let theta = *tr.phase.last().unwrap();
        let d = (theta - phi).rem_euclid(PI / 2.0);
        let d = d.min(PI / 2.0 - d);
        assert!(d < 0.01, "θ̂ {theta} vs {phi}");
    }

    #[test]
    fn shared_vco_mode() {
        let sps = 16;
        let x = rotate(&clean_qpsk(5000, sps), 20e6, 0.0);
        let y = rotate(&clean_qpsk(5000, sps), 20e6, 0.0);
        let cfg = CprcConfig {
            per_polarization: false,
            ..CprcConfig::default()
        };
        let (outs, tr) = costas_run_pair(&x, Some(&y), &cfg).unwrap();
        assert_eq!(tr[0].phase, tr[1].phase);
        for (a, b) in outs[0].samples.iter().zip(&outs[1].samples) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn trace_is_continuous() {
        let w = rotate(&clean_qpsk(5000, 16), 100e6, 0.0);
        let (_, tr) = costas_run(&w, &CprcConfig::default()).unwrap();
        assert!(tr.phase.windows(2).all(|p| (p[1] - p[0]).abs() < PI));
    }

    #[test]
    fn rejects_zero_gains() {
        let cfg = CprcConfig {
            kp: 0.0,
            ki: 0.0,
            ..CprcConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn rotation_preserves_modulus(seed in 0u32..1000, df in -2e8f64..2e8) {
            let cfg = TxConfig {
                seeds: crate::txchain::StreamSeeds { xi: seed + 1, xq: seed + 2, yi: 3, yq: 4 },
                ..TxConfig::default()
            };
            let w = rotate(&transmit(&cfg, 300, 8).unwrap().signal.x, df, 0.2);
            let (out, _) = costas_run(&w, &CprcConfig::default()).unwrap();
            for (a, b) in out.samples.iter().zip(&w.samples) {
                prop_assert!((a.norm() - b.norm()).abs() < 1e-9);
            }
            let (again, _) = costas_run(&w, &CprcConfig::default()).unwrap();
            prop_assert_eq!(out, again);
        }
    }
}
