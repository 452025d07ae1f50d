//! Signal containers and the sample-level primitives every other stage is
//! built from.
//!
//! Amplitudes are in normalized internal units: the 100 mV single-ended
//! reference amplitude of the analog chip maps to `1.0`.

mod filter;
mod interp;

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use filter::one_pole_group_delay;
pub use filter::{
    fft_frequencies, freq_domain_filter, freq_domain_filter_with, gaussian_lowpass,
    single_pole_lowpass, OnePole,
};
pub use interp::{fractional_delay, InterpKernel, INTERP_HALF_WIDTH};

/// Uniformly sampled complex baseband signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<Complex64>,
    /// Samples per second.
    pub sample_rate: f64,
    /// Time of the first sample, in seconds.
    pub t0: f64,
    /// Sample indices that are free of edge effects from earlier processing.
    pub valid: Range<usize>,
}

impl Waveform {
    pub fn new(samples: Vec<Complex64>, sample_rate: f64) -> Result<Self> {
        Self::with_t0(samples, sample_rate, 0.0)
    }

    pub fn with_t0(samples: Vec<Complex64>, sample_rate: f64, t0: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform has no samples"));
        }
        let valid = 0..samples.len();
        Ok(Waveform {
            samples,
            sample_rate,
            t0,
            valid,
        })
    }

    pub fn from_real(samples: &[f64], sample_rate: f64) -> Result<Self> {
        Self::new(
            samples.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            sample_rate,
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn time(&self, index: usize) -> f64 {
        self.t0 + index as f64 / self.sample_rate
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> f64 {
        self.energy() / self.samples.len() as f64
    }

    /// Builds a waveform on the same grid with new samples, keeping the
    /// valid range.
    pub fn map_samples(&self, samples: Vec<Complex64>) -> Waveform {
        debug_assert_eq!(samples.len(), self.samples.len());
        Waveform {
            samples,
            sample_rate: self.sample_rate,
            t0: self.t0,
            valid: self.valid.clone(),
        }
    }

    pub fn scaled(&self, gain: Complex64) -> Waveform {
        self.map_samples(self.samples.iter().map(|&s| s * gain).collect())
    }

    pub fn real_part(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.re).collect()
    }

    pub fn imag_part(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.im).collect()
    }

    /// Writes `t,re,im` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,re,im")?;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(out, "{:.6e},{:.9e},{:.9e}", self.time(i), s.re, s.im)?;
        }
        out.flush()?;
        Ok(())
    }

    pub(crate) fn same_grid(&self, other: &Waveform) -> bool {
        self.samples.len() == other.samples.len() && self.sample_rate == other.sample_rate
    }
}

/// The X/Y polarization pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPolWaveform {
    pub x: Waveform,
    pub y: Waveform,
}

impl DualPolWaveform {
    pub fn new(x: Waveform, y: Waveform) -> Result<Self> {
        if !x.same_grid(&y) {
            return Err(Error::invalid(
                "X and Y polarizations must share sample rate and length",
            ));
        }
        Ok(DualPolWaveform { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.x.sample_rate
    }

    /// Instantaneous total power |x|² + |y|² per sample.
    pub fn total_power(&self) -> Vec<f64> {
        self.x
            .samples
            .iter()
            .zip(&self.y.samples)
            .map(|(a, b)| a.norm_sqr() + b.norm_sqr())
            .collect()
    }

    pub fn energy(&self) -> f64 {
        self.x.energy() + self.y.energy()
    }
}

/// Serde adapter for bandwidth-like values where `f64::INFINITY` means
/// unlimited. TOML writes `inf`; JSON has no infinity literal and writes
/// `null`, which reads back as infinity.
pub mod unlimited {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(*v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }

    pub fn infinite() -> f64 {
        f64::INFINITY
    }
}

/// The four real electrical rails out of the coherent front-end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadWaveform {
    pub xi: Vec<f64>,
    pub xq: Vec<f64>,
    pub yi: Vec<f64>,
    pub yq: Vec<f64>,
    pub sample_rate: f64,
    pub t0: f64,
}

impl QuadWaveform {
    pub fn from_dual(dual: &DualPolWaveform) -> QuadWaveform {
        QuadWaveform {
            xi: dual.x.real_part(),
            xq: dual.x.imag_part(),
            yi: dual.y.real_part(),
            yq: dual.y.imag_part(),
            sample_rate: dual.x.sample_rate,
            t0: dual.x.t0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.xi.len();
        if n == 0 {
            return Err(Error::invalid("quad waveform has no samples"));
        }
        if self.xq.len() != n || self.yi.len() != n || self.yq.len() != n {
            return Err(Error::invalid("quad rails differ in length"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::invalid("quad sample rate must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    pub fn x(&self) -> Vec<Complex64> {
        join_rails(&self.xi, &self.xq)
    }

    pub fn y(&self) -> Vec<Complex64> {
        join_rails(&self.yi, &self.yq)
    }

    pub fn to_dual(&self) -> Result<DualPolWaveform> {
        self.validate()?;
        DualPolWaveform::new(
            Waveform::with_t0(self.x(), self.sample_rate, self.t0)?,
            Waveform::with_t0(self.y(), self.sample_rate, self.t0)?,
        )
    }
}

fn join_rails(i: &[f64], q: &[f64]) -> Vec<Complex64> {
    i.iter()
        .zip(q)
        .map(|(&re, &im)| Complex64::new(re, im))
        .collect()
}
