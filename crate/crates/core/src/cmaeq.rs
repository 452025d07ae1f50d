//! Continuous-time 2×2 butterfly CMA equalizer.
//!
//! Every signal is advanced one sample at a time through behavioral cell
//! models: tapped delay lines, complex multipliers, adders, the error
//! generator and one leaky integrator per complex weight. With the ideal
//! profile and integer-sample tap delays the forward path is an exact FIR.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analogcells::{
    buffer, db_to_linear, deserialize_profile, AnalogProfile, ComplexMultiplier, LeakyIntegrator,
};
use crate::error::{Error, Result};
use crate::fiberchan::{jones_rotation, random_jones_angles};
use crate::sigkit::{InterpKernel, OnePole, QuadWaveform, Waveform};

/// Default update gain: about 2·10⁴ symbols to converge from reset on a
/// clean 10 GBd link.
pub const BETA0: f64 = 2.0e6;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

pub fn reset_tap() -> Complex64 {
    Complex64::new(1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ButterflyWeights {
    pub h_xx: Vec<Complex64>,
    pub h_xy: Vec<Complex64>,
    pub h_yx: Vec<Complex64>,
    pub h_yy: Vec<Complex64>,
}

impl ButterflyWeights {
    pub fn zeros(taps: usize) -> Self {
        ButterflyWeights {
            h_xx: vec![ZERO; taps],
            h_xy: vec![ZERO; taps],
            h_yx: vec![ZERO; taps],
            h_yy: vec![ZERO; taps],
        }
    }

    /// The power-on values: `[1+j, 0, …]` on the through paths.
    pub fn reset(taps: usize) -> Self {
        let mut w = Self::zeros(taps);
        w.h_xx[0] = reset_tap();
        w.h_yy[0] = reset_tap();
        w
    }

    pub fn taps(&self) -> usize {
        self.h_xx.len()
    }

    pub fn filters(&self) -> [&Vec<Complex64>; 4] {
        [&self.h_xx, &self.h_xy, &self.h_yx, &self.h_yy]
    }

    pub fn filters_mut(&mut self) -> [&mut Vec<Complex64>; 4] {
        [
            &mut self.h_xx,
            &mut self.h_xy,
            &mut self.h_yx,
            &mut self.h_yy,
        ]
    }

    /// All taps in `xx, xy, yx, yy` order.
    pub fn flat(&self) -> Vec<Complex64> {
        self.filters()
            .iter()
            .flat_map(|f| f.iter().copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|h| h.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.filters()
            .iter()
            .flat_map(|f| f.iter())
            .map(|h| {
                if h.is_finite() {
                    h.norm()
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }

    /// `[[h_xx,k, h_xy,k], [h_yx,k, h_yy,k]]`.
    pub fn tap_matrix(&self, k: usize) -> [[Complex64; 2]; 2] {
        [[self.h_xx[k], self.h_xy[k]], [self.h_yx[k], self.h_yy[k]]]
    }

    /// Tap index carrying the most energy across the four filters.
    pub fn dominant_tap(&self) -> usize {
        (0..self.taps())
            .max_by(|&a, &b| self.tap_energy(a).total_cmp(&self.tap_energy(b)))
            .unwrap_or(0)
    }

    fn tap_energy(&self, k: usize) -> f64 {
        self.filters().iter().map(|f| f[k].norm_sqr()).sum()
    }

    pub fn dominant_det(&self) -> Complex64 {
        let m = self.tap_matrix(self.dominant_tap());
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EqConfig {
    /// Number of taps per filter minus one.
    pub l: usize,
    /// Tap spacing, s. Unset: the profile's delay-cell delay if it has one,
    /// otherwise half a symbol.
    pub tau_d: Option<f64>,
    /// Update-path input delay, s. Unset: matched to the loop latency.
    pub tau_c: Option<f64>,
    /// Error-generator output delay, s. Unset: matched to the squarer.
    pub tau_e: Option<f64>,
    pub residual_mismatch_c: f64,
    pub residual_mismatch_e: f64,
    /// Update gain, 1/(V²·s) in internal units.
    pub beta: f64,
    /// Reference modulus A.
    pub modulus: f64,
    #[serde(deserialize_with = "deserialize_profile")]
    pub profile: AnalogProfile,
    /// Overrides the integrator DC gain, keeping its integration rate.
    pub integrator_dc_gain_db: Option<f64>,
    pub symbol_rate: f64,
    /// Symbols between trace points.
    pub trace_every: usize,
    /// Symbols per convergence window.
    pub convergence_window: usize,
    /// Relative weight change per window below which the weights count as
    /// settled.
    pub settle_tolerance: f64,
    pub weight_max: f64,
    /// Restart from a randomized reset when the outputs collapse onto one
    /// polarization.
    pub degeneracy_restart: bool,
    pub restart_seed: u64,
}

impl Default for EqConfig {
    fn default() -> Self {
        EqConfig {
            l: 1,
            tau_d: None,
            tau_c: None,
            tau_e: None,
            residual_mismatch_c: 0.0,
            residual_mismatch_e: 0.0,
            beta: BETA0,
            modulus: 1.0,
            profile: AnalogProfile::ideal(),
            integrator_dc_gain_db: None,
            symbol_rate: 10e9,
            trace_every: 100,
            convergence_window: 1000,
            settle_tolerance: 0.01,
            weight_max: 10.0 * 2f64.sqrt(),
            degeneracy_restart: false,
            restart_seed: 0,
        }
    }
}

/// Delays and profile after defaults and overrides are applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedEq {
    pub profile: AnalogProfile,
    pub tau_d: f64,
    pub tau_c: f64,
    pub tau_e: f64,
}

impl EqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l < 1 {
            return Err(Error::config("eq.l must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("eq.beta must be positive"));
        }
        if !(self.modulus > 0.0 && self.modulus.is_finite()) {
            return Err(Error::config("eq.modulus must be positive"));
        }
        if !(self.symbol_rate > 0.0 && self.symbol_rate.is_finite()) {
            return Err(Error::config("eq.symbol_rate must be positive"));
        }
        if let Some(t) = self.tau_d {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config("eq.tau_d must be positive"));
            }
        }
        for (name, v) in [("eq.tau_c", self.tau_c), ("eq.tau_e", self.tau_e)] {
            if let Some(t) = v {
                if !(t >= 0.0 && t.is_finite()) {
                    return Err(Error::config(format!("{name} must be non-negative")));
                }
            }
        }
        if !self.residual_mismatch_c.is_finite() || !self.residual_mismatch_e.is_finite() {
            return Err(Error::config("eq residual mismatches must be finite"));
        }
        if self.trace_every == 0 || self.convergence_window == 0 {
            return Err(Error::config(
                "eq trace and window lengths must be positive",
            ));
        }
        if !(self.settle_tolerance > 0.0) {
            return Err(Error::config("eq.settle_tolerance must be positive"));
        }
        if !(self.weight_max > 0.0) {
            return Err(Error::config("eq.weight_max must be positive"));
        }
        if let Some(g) = self.integrator_dc_gain_db {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::config("eq.integrator_dc_gain_db must be positive"));
            }
        }
        self.profile.validate()
    }

    pub fn symbol_period(&self) -> f64 {
        1.0 / self.symbol_rate
    }

    /// Applies defaults: tap spacing, the integrator override and the
    /// latency-matching compensation delays.
    pub fn resolve(&self) -> Result<ResolvedEq> {
        self.validate()?;
        let mut profile = self.profile.clone();
        if let Some(db) = self.integrator_dc_gain_db {
            let rate = profile.integrator.integrator_rate();
            profile.integrator.dc_gain = db_to_linear(db);
            profile.integrator.f3db = rate / (2.0 * PI * profile.integrator.dc_gain);
        }
        let tau_d = match self.tau_d {
            Some(t) => t,
            None if profile.delay_cell.group_delay > 0.0 => profile.delay_cell.group_delay,
            None => 0.5 * self.symbol_period(),
        };
        profile.delay_cell.group_delay = tau_d;
        let d1 = profile.multiplier_port1.pole_delay();
        let d2 = profile.multiplier_port2.pole_delay();
        let da = profile.adder.pole_delay();
        // forward: tap signal on port 1, then the adder
        let forward = d1 + da;
        // squarer: both ports, then the adder forming A² − |x|²
        let squarer = 0.5 * (d1 + d2) + da;
        // error multiplier: delayed output on port 1, bracket on port 2
        let tau_e = self.tau_e.unwrap_or(squarer + d2 - d1) + self.residual_mismatch_e;
        let error = squarer + d2;
        // update multiplier: error on port 1, conj(input) on port 2
        let tau_c = self.tau_c.unwrap_or(forward + error + d1 - d2) + self.residual_mismatch_c;
        if tau_e < 0.0 || tau_c < 0.0 {
            return Err(Error::config(
                "compensation delays plus residual mismatch must be non-negative",
            ));
        }
        Ok(ResolvedEq {
            profile,
            tau_d,
            tau_c,
            tau_e,
        })
    }
}

/// `x_eq(t − τe)·(A² − |x_eq(t)|²)`.
#[inline]
pub fn error_generate(x_now: Complex64, x_delayed: Complex64, modulus: f64) -> Complex64 {
    x_delayed * (modulus * modulus - x_now.norm_sqr())
}

/// Power-of-two ring buffer of past samples, newest at delay 0.
#[derive(Debug, Clone)]
struct History {
    buf: Vec<Complex64>,
    head: usize,
    mask: usize,
}

impl History {
    fn new(depth: usize) -> Self {
        let cap = (depth + 1).next_power_of_two();
        History {
            buf: vec![ZERO; cap],
            head: 0,
            mask: cap - 1,
        }
    }

    #[inline]
    fn push(&mut self, v: Complex64) {
        self.head = (self.head + 1) & self.mask;
        self.buf[self.head] = v;
    }

    #[inline]
    fn at(&self, delay: usize) -> Complex64 {
        self.buf[(self.head.wrapping_sub(delay)) & self.mask]
    }

    /// Linear interpolation between neighbouring past samples.
    #[inline]
    fn linear(&self, delay: f64) -> Complex64 {
        let whole = delay.floor();
        let f = delay - whole;
        let w = whole as usize;
        if f < 1e-12 {
            self.at(w)
        } else {
            self.at(w) * (1.0 - f) + self.at(w + 1) * f
        }
    }
}

/// A causal band-limited read at a fixed delay.
#[derive(Debug, Clone)]
struct TapRead {
    whole: usize,
    kernel: InterpKernel,
}

impl TapRead {
    #[inline]
    fn read(&self, h: &History) -> Complex64 {
        let mut acc = ZERO;
        for (m, &w) in self.kernel.offsets().zip(self.kernel.weights()) {
            acc += h.at((self.whole as i64 + m) as usize) * w;
        }
        acc
    }

    fn depth(&self) -> usize {
        self.whole + self.kernel.reach()
    }
}

/// Splits a delay in samples into whole and fractional parts, snapping
/// rounding noise to the integer.
fn split_delay(d: f64) -> (i64, f64) {
    let mut whole = d.floor();
    let mut frac = d - whole;
    if frac > 1.0 - 1e-9 {
        whole += 1.0;
        frac = 0.0;
    } else if frac < 1e-9 {
        frac = 0.0;
    }
    (whole as i64, frac)
}

/// One tap output: a delayed read followed by `k` delay-cell poles.
#[derive(Debug, Clone)]
struct Tap {
    read: TapRead,
    poles: Vec<OnePole<Complex64>>,
}

impl Tap {
    #[inline]
    fn output(&mut self, h: &History) -> Complex64 {
        let mut v = self.read.read(h);
        for p in &mut self.poles {
            v = p.step(v);
        }
        v
    }
}

/// Per-polarization loop components.
#[derive(Debug, Clone)]
struct Branch {
    fwd: Vec<ComplexMultiplier>,
    fwd_cross: Vec<ComplexMultiplier>,
    adder: OnePole<Complex64>,
    squarer: ComplexMultiplier,
    bracket: OnePole<Complex64>,
    error: ComplexMultiplier,
    out_hist: History,
}

/// Everything the equalizer carries from one sample to the next.
#[derive(Debug, Clone)]
pub struct Equalizer {
    pub weights: ButterflyWeights,
    /// One complex integrator (I and Q) per weight, `xx, xy, yx, yy` order.
    integrators: [Vec<LeakyIntegrator>; 4],
    update: [Vec<ComplexMultiplier>; 4],
    x_hist: History,
    y_hist: History,
    taps_fwd: [Vec<Tap>; 2],
    taps_upd: [Vec<Tap>; 2],
    branch: [Branch; 2],
    modulus: f64,
    drive_scale: f64,
    tau_e_samples: f64,
    /// Input-to-output latency added so fractional tap reads stay causal,
    /// in samples.
    pub bulk_latency: usize,
    pub sample_rate: f64,
    pub time: f64,
    pub samples_seen: usize,
    last: [Complex64; 2],
    tap_now: [Vec<Complex64>; 2],
}

impl Equalizer {
    /// Builds the equalizer in its power-on state.
    pub fn new(cfg: &EqConfig, sample_rate: f64) -> Result<Self> {
        Self::with_initial(cfg, sample_rate, &ButterflyWeights::reset(cfg.l + 1))
    }

    pub fn with_initial(
        cfg: &EqConfig,
        sample_rate: f64,
        initial: &ButterflyWeights,
    ) -> Result<Self> {
        let r = cfg.resolve()?;
        let taps = cfg.l + 1;
        if initial.taps() != taps {
            return Err(Error::invalid("initial weights have the wrong tap count"));
        }
        let fs = sample_rate;
        let dt = 1.0 / fs;
        let p = &r.profile;

        let pure = (r.tau_d - p.delay_cell.pole_delay()) * fs;
        let fwd_delays: Vec<f64> = (0..taps).map(|k| k as f64 * pure).collect();
        let upd_delays: Vec<f64> = fwd_delays.iter().map(|d| d + r.tau_c * fs).collect();
        // Smallest common latency that keeps every fractional read causal.
        let mut bulk = 0i64;
        for &d in fwd_delays.iter().chain(&upd_delays) {
            let (whole, frac) = split_delay(d);
            let need = if frac == 0.0 {
                -whole
            } else {
                InterpKernel::new(frac).lookahead() as i64 - whole
            };
            bulk = bulk.max(need);
        }
        let make_taps = |delays: &[f64]| -> Result<Vec<Tap>> {
            delays
                .iter()
                .enumerate()
                .map(|(k, &d)| {
                    let (whole, frac) = split_delay(d);
                    let kernel = InterpKernel::new(frac);
                    let whole = (whole + bulk) as usize;
                    let poles = (0..k)
                        .map(|_| OnePole::new(p.delay_cell.dc_gain, p.delay_cell.f3db, fs))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Tap {
                        read: TapRead { whole, kernel },
                        poles,
                    })
                })
                .collect()
        };
        let taps_fwd = [make_taps(&fwd_delays)?, make_taps(&fwd_delays)?];
        let taps_upd = [make_taps(&upd_delays)?, make_taps(&upd_delays)?];
        let depth = taps_fwd[0]
            .iter()
            .chain(&taps_upd[0])
            .map(|t| t.read.depth())
            .max()
            .unwrap_or(0);

        let mult = || ComplexMultiplier::new(p, 1.0, fs);
        let mults = |n: usize| (0..n).map(|_| mult()).collect::<Result<Vec<_>>>();
        let adder = || OnePole::<Complex64>::new(1.0, p.adder.f3db, fs);
        let tau_e_samples = r.tau_e * fs;
        let branch = || -> Result<Branch> {
            Ok(Branch {
                fwd: mults(taps)?,
                fwd_cross: mults(taps)?,
                adder: adder()?,
                squarer: mult()?,
                bracket: adder()?,
                error: mult()?,
                out_hist: History::new(tau_e_samples.ceil() as usize + 2),
            })
        };
        let integrators = {
            let f = initial.filters();
            let mk = |h: &Vec<Complex64>| {
                h.iter()
                    .map(|&v| LeakyIntegrator::new(&p.integrator, dt, v))
                    .collect::<Result<Vec<_>>>()
            };
            [mk(f[0])?, mk(f[1])?, mk(f[2])?, mk(f[3])?]
        };
        Ok(Equalizer {
            weights: initial.clone(),
            integrators,
            update: [mults(taps)?, mults(taps)?, mults(taps)?, mults(taps)?],
            x_hist: History::new(depth),
            y_hist: History::new(depth),
            taps_fwd,
            taps_upd,
            branch: [branch()?, branch()?],
            modulus: cfg.modulus,
            drive_scale: cfg.beta / p.integrator.integrator_rate(),
            tau_e_samples,
            bulk_latency: bulk as usize,
            sample_rate: fs,
            time: 0.0,
            samples_seen: 0,
            last: [ZERO; 2],
            tap_now: [vec![ZERO; taps], vec![ZERO; taps]],
        })
    }

    /// Takes one input sample per polarization and returns the butterfly
    /// outputs under the current weights. Weights are not touched.
    pub fn forward(&mut self, x_in: Complex64, y_in: Complex64) -> (Complex64, Complex64) {
        self.x_hist.push(x_in);
        self.y_hist.push(y_in);
        for (pol, hist) in [(0, &self.x_hist), (1, &self.y_hist)] {
            for (k, tap) in self.taps_fwd[pol].iter_mut().enumerate() {
                self.tap_now[pol][k] = tap.output(hist);
            }
        }
        let w = &self.weights;
        let [bx, by] = &mut self.branch;
        let mut sx = ZERO;
        let mut sy = ZERO;
        for k in 0..w.taps() {
            let (xk, yk) = (self.tap_now[0][k], self.tap_now[1][k]);
            sx += bx.fwd[k].step(xk, w.h_xx[k]) + bx.fwd_cross[k].step(yk, w.h_xy[k]);
            sy += by.fwd[k].step(xk, w.h_yx[k]) + by.fwd_cross[k].step(yk, w.h_yy[k]);
        }
        let out = [bx.adder.step(sx), by.adder.step(sy)];
        self.last = out;
        self.samples_seen += 1;
        self.time = self.samples_seen as f64 / self.sample_rate;
        (out[0], out[1])
    }

    /// Advances the error generators and all weight integrators by one
    /// sample, using the outputs of the preceding `forward`. Returns the
    /// error signals.
    pub fn update_step(&mut self) -> [Complex64; 2] {
        let a2 = self.modulus * self.modulus;
        let mut eps = [ZERO; 2];
        for (pol, br) in self.branch.iter_mut().enumerate() {
            let v = self.last[pol];
            br.out_hist.push(v);
            let p = br.squarer.step(v, v.conj()).re;
            let bracket = br.bracket.step(Complex64::new(a2 - p, 0.0));
            let delayed = br.out_hist.linear(self.tau_e_samples);
            eps[pol] = br.error.step(delayed, bracket);
        }
        let taps = self.weights.taps();
        let mut xu = [ZERO; 8];
        let mut yu = [ZERO; 8];
        let (mut xv, mut yv);
        let (xs, ys): (&mut [Complex64], &mut [Complex64]) = if taps <= 8 {
            (&mut xu[..taps], &mut yu[..taps])
        } else {
            xv = vec![ZERO; taps];
            yv = vec![ZERO; taps];
            (&mut xv[..], &mut yv[..])
        };
        for k in 0..taps {
            xs[k] = self.taps_upd[0][k].output(&self.x_hist).conj();
            ys[k] = self.taps_upd[1][k].output(&self.y_hist).conj();
        }
        let scale = self.drive_scale;
        // xx ← ε_x·x̄*, xy ← ε_x·ȳ*, yx ← ε_y·x̄*, yy ← ε_y·ȳ*
        let drives: [(usize, &[Complex64]); 4] = [(0, xs), (0, ys), (1, xs), (1, ys)];
        let weights = self.weights.filters_mut();
        for (f, (wf, (e, inp))) in weights.into_iter().zip(drives).enumerate() {
            for k in 0..taps {
                let d = self.update[f][k].step(eps[e], inp[k]);
                wf[k] = self.integrators[f][k].step(d * scale);
            }
        }
        eps
    }

    /// `forward` followed by `update_step`.
    pub fn step(&mut self, x_in: Complex64, y_in: Complex64) -> (Complex64, Complex64) {
        let out = self.forward(x_in, y_in);
        self.update_step();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqTrace {
    pub times: Vec<f64>,
    pub weights: Vec<ButterflyWeights>,
    /// Mean of `(A² − |out|²)²` over each trace interval, per polarization.
    pub modulus_objective: Vec<[f64; 2]>,
    /// Time after which the weights stay settled, if they do.
    pub converged_at: Option<f64>,
    pub final_weights: ButterflyWeights,
    /// Weights the reported attempt started from (the reset state unless a
    /// degeneracy restart happened).
    pub initial_weights: ButterflyWeights,
    pub restarts: usize,
    pub warnings: Vec<String>,
    /// Latency of the output relative to the input, s.
    pub latency: f64,
}

impl EqTrace {
    pub fn converged(&self) -> bool {
        self.converged_at.is_some()
    }

    /// `time`, the weights as `h_xx_0_re, h_xx_0_im, …`, then the per-pol
    /// modulus objective.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "time")?;
        let taps = self.final_weights.taps();
        for name in ["xx", "xy", "yx", "yy"] {
            for k in 0..taps {
                write!(out, ",h_{name}_{k}_re,h_{name}_{k}_im")?;
            }
        }
        writeln!(out, ",objective_x,objective_y")?;
        for ((t, w), e) in self
            .times
            .iter()
            .zip(&self.weights)
            .zip(&self.modulus_objective)
        {
            write!(out, "{t:.6e}")?;
            for h in w.flat() {
                write!(out, ",{:.9e},{:.9e}", h.re, h.im)?;
            }
            writeln!(out, ",{:.9e},{:.9e}", e[0], e[1])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Outcome of one attempt: outputs, trace, or a divergence.
fn run_once(
    quad: &QuadWaveform,
    cfg: &EqConfig,
    initial: &ButterflyWeights,
) -> Result<(Vec<Complex64>, Vec<Complex64>, EqTrace)> {
    let fs = quad.sample_rate;
    let mut eq = Equalizer::with_initial(cfg, fs, initial)?;
    let sps = fs / cfg.symbol_rate;
    let trace_samples = ((cfg.trace_every as f64 * sps).round() as usize).max(1);
    let window_samples = ((cfg.convergence_window as f64 * sps).round() as usize).max(1);
    let a2 = cfg.modulus * cfg.modulus;
    let n = quad.len();
    let mut xo = Vec::with_capacity(n);
    let mut yo = Vec::with_capacity(n);
    let mut trace = EqTrace {
        times: Vec::new(),
        weights: Vec::new(),
        modulus_objective: Vec::new(),
        converged_at: None,
        final_weights: initial.clone(),
        initial_weights: initial.clone(),
        restarts: 0,
        warnings: Vec::new(),
        latency: eq.bulk_latency as f64 / fs,
    };
    let mut acc = [0.0; 2];
    let mut acc_n = 0usize;
    let mut snapshots = vec![(0.0, initial.flat())];
    let limit = cfg.weight_max;
    for i in 0..n {
        let x = Complex64::new(quad.xi[i], quad.xq[i]);
        let y = Complex64::new(quad.yi[i], quad.yq[i]);
        let (a, b) = eq.step(x, y);
        xo.push(a);
        yo.push(b);
        acc[0] += (a2 - a.norm_sqr()).powi(2);
        acc[1] += (a2 - b.norm_sqr()).powi(2);
        acc_n += 1;
        let m = eq.weights.max_abs();
        if m > limit {
            return Err(Error::Divergence {
                time: eq.time,
                magnitude: m,
            });
        }
        if (i + 1) % trace_samples == 0 || i + 1 == n {
            trace.times.push(eq.time);
            trace.weights.push(eq.weights.clone());
            trace
                .modulus_objective
                .push([acc[0] / acc_n as f64, acc[1] / acc_n as f64]);
            acc = [0.0; 2];
            acc_n = 0;
        }
        if (i + 1) % window_samples == 0 {
            snapshots.push((eq.time, eq.weights.flat()));
        }
    }
    trace.final_weights = eq.weights.clone();
    trace.converged_at = settle_time(&snapshots, cfg.settle_tolerance);
    Ok((xo, yo, trace))
}

/// Start of the first window after which every window-to-window relative
/// weight change stays below `tol`.
fn settle_time(snaps: &[(f64, Vec<Complex64>)], tol: f64) -> Option<f64> {
    if snaps.len() < 3 {
        return None;
    }
    let change = |a: &[Complex64], b: &[Complex64]| {
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_sqr()).sum();
        let r: f64 = b.iter().map(|q| q.norm_sqr()).sum();
        (d / r.max(1e-300)).sqrt()
    };
    let mut settled_from = None;
    for i in 1..snaps.len() {
        if change(&snaps[i - 1].1, &snaps[i].1) < tol {
            settled_from.get_or_insert(snaps[i - 1].0);
        } else {
            settled_from = None;
        }
    }
    // A trailing single quiet window is not enough evidence.
    let last_two_quiet = change(&snaps[snaps.len() - 3].1, &snaps[snaps.len() - 2].1) < tol;
    settled_from.filter(|_| last_two_quiet)
}

/// Runs the equalizer over the whole input.
///
/// Outputs go through the profile's buffer stage. A collapse of both
/// outputs onto one polarization is reported as a warning and, if enabled,
/// retried from a randomized reset.
pub fn run(quad: &QuadWaveform, cfg: &EqConfig) -> Result<(QuadWaveform, EqTrace)> {
    quad.validate()?;
    let r = cfg.resolve()?;
    let taps = cfg.l + 1;
    let reset = ButterflyWeights::reset(taps);
    let threshold = 0.1 * reset.dominant_det().norm();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.restart_seed);
    let mut initial = reset.clone();
    let mut restarts = 0;
    let mut warnings = Vec::new();
    let (xo, yo, mut trace) = loop {
        let (xo, yo, mut trace) = run_once(quad, cfg, &initial)?;
        let det = trace.final_weights.dominant_det().norm();
        if det >= threshold {
            trace.restarts = restarts;
            trace.warnings = warnings;
            break (xo, yo, trace);
        }
        warnings.push(format!(
            "degenerate solution: |det| of dominant tap matrix {det:.3e} below {threshold:.3e}"
        ));
        if !cfg.degeneracy_restart || restarts >= 3 {
            trace.restarts = restarts;
            trace.warnings = warnings;
            break (xo, yo, trace);
        }
        restarts += 1;
        let [t, f, s] = random_jones_angles(&mut rng);
        let u = jones_rotation(t, f, s).0;
        initial = ButterflyWeights::zeros(taps);
        initial.h_xx[0] = reset_tap() * u[0][0];
        initial.h_xy[0] = reset_tap() * u[0][1];
        initial.h_yx[0] = reset_tap() * u[1][0];
        initial.h_yy[0] = reset_tap() * u[1][1];
    };
    let buf = &r.profile.buffer;
    let to_wave = |v: Vec<Complex64>| Waveform::with_t0(v, quad.sample_rate, quad.t0);
    let bx = buffer(&to_wave(xo)?, buf)?;
    let by = buffer(&to_wave(yo)?, buf)?;
    trace.latency += buf.pole_delay();
    let out = QuadWaveform::from_dual(&crate::sigkit::DualPolWaveform::new(bx, by)?);
    Ok((out, trace))
}
