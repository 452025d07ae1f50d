//! Behavioral models of the equalizer IC's building blocks.
//!
//! Each cell is a gain, a one-pole bandwidth and (for the delay cell) a pure
//! delay, optionally with cubic compression. Block operations work on whole
//! waveforms; the streaming structs are what the equalizer loop steps.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigkit::{fractional_delay, one_pole_group_delay, OnePole, Waveform};

/// Integration rate `dc_gain·2π·f3db` of the measured integrator, 1/s.
pub const CHIP_INTEGRATOR_RATE: f64 = 5.532_433_264_685_819e7;

/// Compression giving a 10% product deficit at full swing on both ports.
pub const CHIP_NONLINEARITY: f64 = 0.051_316_701_949_486_2;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

pub fn linear_to_db(g: f64) -> f64 {
    20.0 * g.log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellParams {
    /// Linear voltage gain at DC.
    pub dc_gain: f64,
    /// −3 dB bandwidth, Hz; `inf` (or absent) for none.
    #[serde(
        with = "crate::sigkit::unlimited",
        default = "crate::sigkit::unlimited::infinite"
    )]
    pub f3db: f64,
    /// Total group delay, s. Includes the pole's own low-frequency delay.
    pub group_delay: f64,
    /// Cubic compression coefficient, 0 for a linear cell.
    pub nonlinearity_coeff: f64,
}

impl CellParams {
    pub fn ideal() -> Self {
        CellParams {
            dc_gain: 1.0,
            f3db: f64::INFINITY,
            group_delay: 0.0,
            nonlinearity_coeff: 0.0,
        }
    }

    /// A gain stage whose only delay is that of its pole.
    pub fn stage(gain_db: f64, f3db: f64) -> Self {
        CellParams {
            dc_gain: db_to_linear(gain_db),
            f3db,
            group_delay: one_pole_group_delay(f3db),
            nonlinearity_coeff: 0.0,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.dc_gain.is_finite() && self.dc_gain > 0.0) {
            return Err(Error::config(format!("{name}.dc_gain must be positive")));
        }
        if !(self.f3db > 0.0) {
            return Err(Error::config(format!("{name}.f3db must be positive")));
        }
        if !self.group_delay.is_finite() {
            return Err(Error::config(format!("{name}.group_delay must be finite")));
        }
        // Beyond 1/3 the cubic stops being monotone inside the swing.
        if !(0.0..=1.0 / 3.0).contains(&self.nonlinearity_coeff) {
            return Err(Error::config(format!(
                "{name}.nonlinearity_coeff must lie in [0, 1/3]"
            )));
        }
        Ok(())
    }

    pub fn pole_delay(&self) -> f64 {
        one_pole_group_delay(self.f3db)
    }

    /// Integration rate `K = dc_gain·ω_c` of a leaky integrator.
    pub fn integrator_rate(&self) -> f64 {
        self.dc_gain * 2.0 * PI * self.f3db
    }

    fn one_pole<T>(&self, gain: f64, sample_rate: f64) -> Result<OnePole<T>>
    where
        T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    {
        OnePole::new(gain, self.f3db, sample_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalogProfile {
    pub delay_cell: CellParams,
    pub multiplier_port1: CellParams,
    pub multiplier_port2: CellParams,
    pub adder: CellParams,
    pub integrator: CellParams,
    pub buffer: CellParams,
    /// Input level at which a multiplier delivers its nominal gain; 1.0 is
    /// 100 mV.
    pub multiplier_reference: f64,
    /// Full swing of the compressing stages.
    pub vmax: f64,
}

impl AnalogProfile {
    /// Unit gains, unlimited bandwidth, no compression and an integrator
    /// with the measured integration rate but negligible leak.
    pub fn ideal() -> Self {
        let dc_gain = 1e12;
        AnalogProfile {
            delay_cell: CellParams::ideal(),
            multiplier_port1: CellParams::ideal(),
            multiplier_port2: CellParams::ideal(),
            adder: CellParams::ideal(),
            integrator: CellParams {
                dc_gain,
                f3db: CHIP_INTEGRATOR_RATE / (2.0 * PI * dc_gain),
                group_delay: 0.0,
                nonlinearity_coeff: 0.0,
            },
            buffer: CellParams::ideal(),
            multiplier_reference: 1.0,
            vmax: 2.0,
        }
    }

    /// The measured characterization of the fabricated cells.
    pub fn chip() -> Self {
        let port = |gain_db, f3db| CellParams {
            nonlinearity_coeff: CHIP_NONLINEARITY,
            ..CellParams::stage(gain_db, f3db)
        };
        AnalogProfile {
            delay_cell: CellParams {
                dc_gain: db_to_linear(-1.4),
                f3db: 20.7e9,
                group_delay: 24.3e-12,
                nonlinearity_coeff: 0.0,
            },
            multiplier_port1: port(7.4, 20.2e9),
            multiplier_port2: port(6.02, 17.9e9),
            adder: CellParams::stage(12.3, 18.4e9),
            integrator: CellParams {
                dc_gain: db_to_linear(103.9),
                f3db: 56.2,
                group_delay: 0.0,
                nonlinearity_coeff: 0.0,
            },
            buffer: CellParams::stage(4.9, 37.8e9),
            multiplier_reference: 2.0,
            vmax: 2.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ideal" => Ok(Self::ideal()),
            "chip" => Ok(Self::chip()),
            _ => Err(Error::config(format!(
                "unknown analog profile '{name}' (expected ideal or chip)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.delay_cell.validate("delay_cell")?;
        self.multiplier_port1.validate("multiplier_port1")?;
        self.multiplier_port2.validate("multiplier_port2")?;
        self.adder.validate("adder")?;
        self.integrator.validate("integrator")?;
        self.buffer.validate("buffer")?;
        if !(self.multiplier_reference > 0.0 && self.multiplier_reference.is_finite()) {
            return Err(Error::config("multiplier_reference must be positive"));
        }
        if !(self.vmax > 0.0 && self.vmax.is_finite()) {
            return Err(Error::config("vmax must be positive"));
        }
        Ok(())
    }

    /// Conversion gain of one Gilbert cell: the geometric mean of the port
    /// gains, referred to the nominal input level.
    pub fn multiplier_gain(&self) -> f64 {
        (self.multiplier_port1.dc_gain * self.multiplier_port2.dc_gain).sqrt()
            / self.multiplier_reference
    }
}

/// Accepts either a preset name or a full profile table.
pub fn deserialize_profile<'de, D>(d: D) -> std::result::Result<AnalogProfile, D::Error>
where
    D: serde::Deserializer<'de>,
{
    struct V;
    impl<'de> serde::de::Visitor<'de> for V {
        type Value = AnalogProfile;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a profile name (\"ideal\" or \"chip\") or a profile table")
        }

        fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<AnalogProfile, E> {
            AnalogProfile::preset(v).map_err(E::custom)
        }

        fn visit_map<M: serde::de::MapAccess<'de>>(
            self,
            map: M,
        ) -> std::result::Result<AnalogProfile, M::Error> {
            AnalogProfile::deserialize(serde::de::value::MapAccessDeserializer::new(map))
        }
    }
    d.deserialize_any(V)
}

/// Cubic compression `v·(1 − c·(v/vmax)²)`, held flat beyond `vmax`.
#[inline]
pub fn sat(v: f64, coeff: f64, vmax: f64) -> f64 {
    if coeff == 0.0 {
        return v;
    }
    let u = v.clamp(-vmax, vmax);
    u * (1.0 - coeff * (u / vmax) * (u / vmax))
}

/// Streaming complex multiplier built from four Gilbert cells.
///
/// Port bandwidths filter the operands, each rail is compressed, and the
/// cross products are summed in the current domain.
#[derive(Debug, Clone)]
pub struct ComplexMultiplier {
    pa: OnePole<Complex64>,
    pb: OnePole<Complex64>,
    gain: f64,
    ca: f64,
    cb: f64,
    vmax: f64,
}

impl ComplexMultiplier {
    /// `gain` overrides the conversion gain (the equalizer uses 1).
    pub fn new(profile: &AnalogProfile, gain: f64, sample_rate: f64) -> Result<Self> {
        Ok(ComplexMultiplier {
            pa: profile.multiplier_port1.one_pole(1.0, sample_rate)?,
            pb: profile.multiplier_port2.one_pole(1.0, sample_rate)?,
            gain,
            ca: profile.multiplier_port1.nonlinearity_coeff,
            cb: profile.multiplier_port2.nonlinearity_coeff,
            vmax: profile.vmax,
        })
    }

    #[inline]
    pub fn step(&mut self, a: Complex64, b: Complex64) -> Complex64 {
        let a = self.pa.step(a);
        let b = self.pb.step(b);
        let (ai, aq) = (sat(a.re, self.ca, self.vmax), sat(a.im, self.ca, self.vmax));
        let (bi, bq) = (sat(b.re, self.cb, self.vmax), sat(b.im, self.cb, self.vmax));
        Complex64::new(ai * bi - aq * bq, ai * bq + aq * bi) * self.gain
    }

    pub fn settle_to(&mut self, a: Complex64, b: Complex64) {
        self.pa.settle_to(a);
        self.pb.settle_to(b);
    }
}

/// Streaming leaky integrator `v̇ = −ω_c·v + K·u`, forward Euler.
#[derive(Debug, Clone)]
pub struct LeakyIntegrator {
    state: Complex64,
    decay: f64,
    drive: f64,
}

impl LeakyIntegrator {
    pub fn new(p: &CellParams, dt: f64, initial: Complex64) -> Result<Self> {
        p.validate("integrator")?;
        let omega = 2.0 * PI * p.f3db;
        if !(dt > 0.0) || dt * omega >= 2.0 {
            return Err(Error::config(format!(
                "integrator step unstable: dt·ω_c = {:.3e} (must be < 2)",
                dt * omega
            )));
        }
        Ok(LeakyIntegrator {
            state: initial,
            decay: 1.0 - dt * omega,
            drive: dt * p.integrator_rate(),
        })
    }

    #[inline]
    pub fn step(&mut self, u: Complex64) -> Complex64 {
        self.state = self.state * self.decay + u * self.drive;
        self.state
    }

    pub fn value(&self) -> Complex64 {
        self.state
    }
}

/// Pure delay plus the cell's pole, with the pole's own delay taken out of
/// the pure part so the total group delay is `p.group_delay`.
pub fn delay_cell(w: &Waveform, p: &CellParams) -> Result<Waveform> {
    p.validate("delay_cell")?;
    let pure = p.group_delay - p.pole_delay();
    let delayed = if pure == 0.0 {
        w.clone()
    } else {
        fractional_delay(w, pure)?
    };
    filter_settled(&delayed, p.dc_gain, p.f3db)
}

/// One-pole filter whose state starts as if the first sample had always
/// been applied.
fn filter_settled(w: &Waveform, gain: f64, f3db: f64) -> Result<Waveform> {
    let mut lp = OnePole::<Complex64>::new(gain, f3db, w.sample_rate)?;
    lp.settle_to(w.samples[0]);
    Ok(w.map_samples(w.samples.iter().map(|&s| lp.step(s)).collect()))
}

/// Real Gilbert-cell product of the real parts of `a` and `b`.
pub fn gilbert_multiply(
    a: &Waveform,
    b: &Waveform,
    p1: &CellParams,
    p2: &CellParams,
    profile: &AnalogProfile,
) -> Result<Waveform> {
    if !a.same_grid(b) {
        return Err(Error::invalid("multiplier operands are on different grids"));
    }
    p1.validate("multiplier_port1")?;
    p2.validate("multiplier_port2")?;
    let k = (p1.dc_gain * p2.dc_gain).sqrt() / profile.multiplier_reference;
    let real = |w: &Waveform, f3db| {
        filter_settled(
            &w.map_samples(w.samples.iter().map(|s| s.re.into()).collect()),
            1.0,
            f3db,
        )
    };
    let fa = real(a, p1.f3db)?;
    let fb = real(b, p2.f3db)?;
    let out = fa
        .samples
        .iter()
        .zip(&fb.samples)
        .map(|(x, y)| {
            let v = sat(x.re, p1.nonlinearity_coeff, profile.vmax)
                * sat(y.re, p2.nonlinearity_coeff, profile.vmax);
            Complex64::new(k * v, 0.0)
        })
        .collect();
    Ok(a.map_samples(out))
}

/// `(aI + j·aQ)(bI + j·bQ)` from four Gilbert cells and two ideal sums.
pub fn complex_multiply(a: &Waveform, b: &Waveform, profile: &AnalogProfile) -> Result<Waveform> {
    if !a.same_grid(b) {
        return Err(Error::invalid("multiplier operands are on different grids"));
    }
    profile.validate()?;
    let mut m = ComplexMultiplier::new(profile, profile.multiplier_gain(), a.sample_rate)?;
    m.settle_to(a.samples[0], b.samples[0]);
    Ok(a.map_samples(
        a.samples
            .iter()
            .zip(&b.samples)
            .map(|(&x, &y)| m.step(x, y))
            .collect(),
    ))
}

/// Runs `u` through a leaky integrator starting at `initial`.
pub fn leaky_integrate(u: &Waveform, p: &CellParams, initial: Complex64) -> Result<Waveform> {
    let mut int = LeakyIntegrator::new(p, u.dt(), initial)?;
    Ok(u.map_samples(u.samples.iter().map(|&s| int.step(s)).collect()))
}

/// Output buffer: gain and bandwidth at the chip boundary.
pub fn buffer(w: &Waveform, p: &CellParams) -> Result<Waveform> {
    p.validate("buffer")?;
    filter_settled(w, p.dc_gain, p.f3db)
}
