use std::f64::consts::PI;
use std::ops::{Add, Mul};

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

/// Streaming one-pole low-pass, `H(f) = g / (1 + j f / f3db)`, discretized
/// with the bilinear transform (pre-warped so the −3 dB point is exact).
///
/// An infinite `f3db` degenerates to a pure gain.
#[derive(Debug, Clone)]
pub struct OnePole<T> {
    gain: f64,
    a: f64,
    b: f64,
    prev_in: T,
    prev_out: T,
    bypass: bool,
}

impl<T> OnePole<T>
where
    T: Copy + Default + Add<Output = T> + Mul<f64, Output = T>,
{
    pub fn new(dc_gain: f64, f3db: f64, sample_rate: f64) -> Result<Self> {
        if !(f3db > 0.0) {
            return Err(Error::invalid(format!(
                "cut-off frequency must be positive, got {f3db}"
            )));
        }
        if f3db.is_infinite() {
            return Ok(OnePole {
                gain: dc_gain,
                a: 0.0,
                b: 0.0,
                prev_in: T::default(),
                prev_out: T::default(),
                bypass: true,
            });
        }
        if f3db >= 0.5 * sample_rate {
            return Err(Error::invalid(format!(
                "cut-off {f3db:e} Hz is not below Nyquist ({:e} Hz)",
                0.5 * sample_rate
            )));
        }
        let k = (PI * f3db / sample_rate).tan();
        Ok(OnePole {
            gain: dc_gain,
            a: dc_gain * k / (1.0 + k),
            b: (1.0 - k) / (1.0 + k),
            prev_in: T::default(),
            prev_out: T::default(),
            bypass: false,
        })
    }

    #[inline]
    pub fn step(&mut self, input: T) -> T {
        if self.bypass {
            return input * self.gain;
        }
        let out = (input + self.prev_in) * self.a + self.prev_out * self.b;
        self.prev_in = input;
        self.prev_out = out;
        out
    }

    /// Seeds the state as if `input` had been applied forever.
    pub fn settle_to(&mut self, input: T) {
        self.prev_in = input;
        self.prev_out = input * self.gain;
    }

    pub fn dc_gain(&self) -> f64 {
        self.gain
    }
}

/// Group delay at DC of the analog prototype, `1 / (2π f3db)`.
pub(crate) fn one_pole_group_delay(f3db: f64) -> f64 {
    if f3db.is_infinite() {
        0.0
    } else {
        1.0 / (2.0 * PI * f3db)
    }
}

pub fn single_pole_lowpass(w: &Waveform, dc_gain: f64, f3db: f64) -> Result<Waveform> {
    let mut lp = OnePole::<Complex64>::new(dc_gain, f3db, w.sample_rate)?;
    Ok(w.map_samples(w.samples.iter().map(|&s| lp.step(s)).collect()))
}

/// FFT-order frequency grid (0, df, …, −df) for `n` points at `sample_rate`.
pub fn fft_frequencies(n: usize, sample_rate: f64) -> Vec<f64> {
    let df = sample_rate / n as f64;
    (0..n)
        .map(|k| {
            if k <= (n - 1) / 2 {
                k as f64 * df
            } else {
                (k as f64 - n as f64) * df
            }
        })
        .collect()
}

/// Multiplies the spectrum of `w` by a tabulated transfer function.
///
/// `w` is zero-padded by `guard` samples before the transform; `h` must be
/// sampled on [`fft_frequencies`] of the padded length. Wrap-around from the
/// circular convolution lands in the guard region, which is trimmed. With
/// `guard = 0` the filter is exactly circular.
pub fn freq_domain_filter(w: &Waveform, h: &[Complex64], guard: usize) -> Result<Waveform> {
    let n = w.len() + guard;
    if h.len() != n {
        return Err(Error::invalid(format!(
            "transfer function has {} points, FFT grid has {n}",
            h.len()
        )));
    }
    let mut buf = Vec::with_capacity(n);
    buf.extend_from_slice(&w.samples);
    buf.resize(n, Complex64::new(0.0, 0.0));
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (b, &hk) in buf.iter_mut().zip(h) {
        *b *= hk;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.truncate(w.len());
    for b in &mut buf {
        *b *= scale;
    }
    Ok(w.map_samples(buf))
}

/// [`freq_domain_filter`] with the transfer function given as a closure of
/// frequency in Hz.
pub fn freq_domain_filter_with<F>(w: &Waveform, guard: usize, h: F) -> Result<Waveform>
where
    F: Fn(f64) -> Complex64,
{
    let grid = fft_frequencies(w.len() + guard, w.sample_rate);
    let table: Vec<Complex64> = grid.into_iter().map(h).collect();
    freq_domain_filter(w, &table, guard)
}

/// Gaussian-shaped low-pass with magnitude −3 dB at `f3db`, applied
/// circularly in the frequency domain. An infinite `f3db` is a no-op.
pub fn gaussian_lowpass(w: &Waveform, f3db: f64) -> Result<Waveform> {
    if !(f3db > 0.0) {
        return Err(Error::invalid(format!(
            "bandwidth must be positive, got {f3db}"
        )));
    }
    if f3db.is_infinite() {
        return Ok(w.clone());
    }
    let c = std::f64::consts::LN_2 / 2.0;
    freq_domain_filter_with(w, 0, |f| {
        Complex64::new((-c * (f / f3db).powi(2)).exp(), 0.0)
    })
}
