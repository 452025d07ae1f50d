//! Discrete-time fractionally spaced CMA, kept deliberately plain. It is the
//! oracle the analog equalizer is checked against.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cmaeq::ButterflyWeights;
use crate::error::{Error, Result};
use crate::sigkit::QuadWaveform;

/// Step of one per-symbol update relative to `β·T`. Calibrated once on the
/// transparent channel so that the oracle settles in the same number of
/// symbols as the ideal-profile analog equalizer; frozen since.
pub const MU_SCALE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtCmaConfig {
    pub mu: f64,
    pub taps_per_pol: usize,
    pub samples_per_symbol_in: usize,
    pub modulus: f64,
    /// Update at every input sample (T/2) instead of once per symbol. Off by
    /// default: the boundary samples then pull the taps away from the analog
    /// solution.
    pub update_every_sample: bool,
    pub weight_max: f64,
    /// Trajectory snapshot interval, symbols.
    pub trace_every: usize,
}

impl DtCmaConfig {
    /// Step matched to an analog loop of rate `beta` at `symbol_rate`.
    pub fn matched(beta: f64, symbol_rate: f64, taps_per_pol: usize) -> Self {
        DtCmaConfig {
            mu: MU_SCALE * beta / symbol_rate,
            taps_per_pol,
            samples_per_symbol_in: 2,
            modulus: 1.0,
            update_every_sample: false,
            weight_max: 10.0 * std::f64::consts::SQRT_2,
            trace_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::config("mu must be positive"));
        }
        if self.taps_per_pol == 0 {
            return Err(Error::config("taps_per_pol must be at least 1"));
        }
        if self.samples_per_symbol_in != 2 {
            return Err(Error::config(
                "the oracle runs at exactly 2 samples per symbol",
            ));
        }
        if !(self.modulus > 0.0) || self.trace_every == 0 {
            return Err(Error::config("modulus and trace interval must be positive"));
        }
        Ok(())
    }
}

/// Picks every `sps/2`-th sample starting at `phase`, giving 2 samples per
/// symbol with the even samples on `phase`.
pub fn decimate_to_half_symbol(
    quad: &QuadWaveform,
    sps: usize,
    phase: usize,
) -> Result<QuadWaveform> {
    quad.validate()?;
    if sps < 2 || !sps.is_multiple_of(2) {
        return Err(Error::invalid(format!("sps must be even, got {sps}")));
    }
    if phase >= sps {
        return Err(Error::invalid("phase must be below sps"));
    }
    let step = sps / 2;
    let pick = |v: &[f64]| {
        v.iter()
            .skip(phase)
            .step_by(step)
            .copied()
            .collect::<Vec<_>>()
    };
    Ok(QuadWaveform {
        xi: pick(&quad.xi),
        xq: pick(&quad.xq),
        yi: pick(&quad.yi),
        yq: pick(&quad.yq),
        sample_rate: quad.sample_rate / step as f64,
        t0: quad.t0 + phase as f64 / quad.sample_rate,
    })
}

#[derive(Debug, Clone)]
pub struct DtCmaOutput {
    /// Butterfly outputs at 2 samples per symbol; even samples are symbols.
    pub x: Vec<Complex64>,
    pub y: Vec<Complex64>,
    pub trajectory: Vec<ButterflyWeights>,
    pub final_weights: ButterflyWeights,
}

impl DtCmaOutput {
    pub fn symbols(&self) -> [Vec<Complex64>; 2] {
        let even = |v: &[Complex64]| v.iter().step_by(2).copied().collect();
        [even(&self.x), even(&self.y)]
    }
}

/// Runs the recursion `y = Hᵀu`, `e = y(A² − |y|²)`, `h ← h + μ·e·conj(u)`
/// from the equalizer's reset state.
pub fn dtcma_run(quad: &QuadWaveform, cfg: &DtCmaConfig) -> Result<DtCmaOutput> {
    dtcma_run_from(quad, cfg, &ButterflyWeights::reset(cfg.taps_per_pol))
}

/// As [`dtcma_run`], starting from `initial`.
pub fn dtcma_run_from(
    quad: &QuadWaveform,
    cfg: &DtCmaConfig,
    initial: &ButterflyWeights,
) -> Result<DtCmaOutput> {
    cfg.validate()?;
    quad.validate()?;
    let (x, y) = (quad.x(), quad.y());
    let taps = cfg.taps_per_pol;
    if initial.taps() != taps {
        return Err(Error::invalid("initial weights have the wrong tap count"));
    }
    let a2 = cfg.modulus * cfg.modulus;
    let mut h = initial.clone();
    let mut out = DtCmaOutput {
        x: Vec::with_capacity(x.len()),
        y: Vec::with_capacity(x.len()),
        trajectory: Vec::new(),
        final_weights: h.clone(),
    };
    let past = |v: &[Complex64], n: usize, k: usize| {
        if n >= k {
            v[n - k]
        } else {
            Complex64::new(0.0, 0.0)
        }
    };
    for n in 0..x.len() {
        let mut yx = Complex64::new(0.0, 0.0);
        let mut yy = Complex64::new(0.0, 0.0);
        for k in 0..taps {
            let (xu, yu) = (past(&x, n, k), past(&y, n, k));
            yx += h.h_xx[k] * xu + h.h_xy[k] * yu;
            yy += h.h_yx[k] * xu + h.h_yy[k] * yu;
        }
        out.x.push(yx);
        out.y.push(yy);
        if cfg.update_every_sample || n % 2 == 0 {
            let ex = yx * (a2 - yx.norm_sqr());
            let ey = yy * (a2 - yy.norm_sqr());
            for k in 0..taps {
                let (xu, yu) = (past(&x, n, k).conj(), past(&y, n, k).conj());
                h.h_xx[k] += cfg.mu * ex * xu;
                h.h_xy[k] += cfg.mu * ex * yu;
                h.h_yx[k] += cfg.mu * ey * xu;
                h.h_yy[k] += cfg.mu * ey * yu;
            }
            let m = h.max_abs();
            if m > cfg.weight_max {
                return Err(Error::Divergence {
                    time: n as f64 / quad.sample_rate,
                    magnitude: m,
                });
            }
        }
        if (n + 1) % (2 * cfg.trace_every) == 0 {
            out.trajectory.push(h.clone());
        }
    }
    out.final_weights = h;
    Ok(out)
}

/// Distance between two tap sets after removing one complex scale per output
/// polarization: `sqrt(½·Σ_p ‖â_p − e^{jφ_p}·b̂_p‖²)` over unit-norm stacks
/// `[h_xx; h_xy]` and `[h_yx; h_yy]`. Zero for identical sets, √2 for
/// orthogonal ones.
pub fn compare_taps(a: &ButterflyWeights, b: &ButterflyWeights) -> Result<f64> {
    if a.taps() != b.taps() {
        return Err(Error::invalid(format!(
            "tap counts differ ({} vs {})",
            a.taps(),
            b.taps()
        )));
    }
    let stack = |w: &ButterflyWeights, p: usize| -> Vec<Complex64> {
        if p == 0 {
            w.h_xx.iter().chain(&w.h_xy).copied().collect()
        } else {
            w.h_yx.iter().chain(&w.h_yy).copied().collect()
        }
    };
    let mut d2 = 0.0;
    for p in 0..2 {
        let (sa, sb) = (stack(a, p), stack(b, p));
        let na = sa.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let nb = sb.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateInput(
                "cannot compare an all-zero tap set".into(),
            ));
        }
        let inner: Complex64 = sa.iter().zip(&sb).map(|(u, v)| u.conj() * v).sum();
        let align = if inner.norm() > 0.0 {
            inner.conj() / inner.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        d2 += sa
            .iter()
            .zip(&sb)
            .map(|(u, v)| (u / na - align * v / nb).norm_sqr())
            .sum::<f64>();
    }
    Ok((d2 / 2.0).sqrt())
}
