//! DP-QPSK transmitter: PRBS data, Gray QPSK mapping, NRZ or raised-cosine
//! drive, polarization decorrelation delay and laser phase noise.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigkit::{freq_domain_filter_with, gaussian_lowpass, DualPolWaveform, Waveform};

/// Maximal-length LFSR taps `(n, m)` for the polynomial `xⁿ + xᵐ + 1`.
fn prbs_taps(order: u32) -> Option<(u32, u32)> {
    match order {
        7 => Some((7, 6)),
        15 => Some((15, 14)),
        23 => Some((23, 18)),
        _ => None,
    }
}

/// Generates `n` bits of a PRBS-7/15/23 sequence.
///
/// Fibonacci LFSR: the register's top bit is emitted each step, so the first
/// `order` outputs are the seed bits, most significant first.
pub fn prbs_generate(order: u32, seed: u32, n: usize) -> Result<Vec<u8>> {
    let (len, tap) = prbs_taps(order)
        .ok_or_else(|| Error::invalid(format!("unsupported PRBS order {order}")))?;
    let mask = (1u32 << len) - 1;
    let mut reg = seed & mask;
    if reg == 0 {
        return Err(Error::invalid("PRBS seed must be nonzero"));
    }
    let mut bits = Vec::with_capacity(n);
    for _ in 0..n {
        let out = (reg >> (len - 1)) & 1;
        let fb = out ^ ((reg >> (tap - 1)) & 1);
        reg = ((reg << 1) | fb) & mask;
        bits.push(out as u8);
    }
    Ok(bits)
}

/// Gray QPSK: bit 0 → +, bit 1 → −, on each axis.
pub fn qpsk_map(bits_i: &[u8], bits_q: &[u8], amplitude: f64) -> Result<Vec<Complex64>> {
    if bits_i.len() != bits_q.len() {
        return Err(Error::invalid(format!(
            "I and Q bit streams differ in length ({} vs {})",
            bits_i.len(),
            bits_q.len()
        )));
    }
    let s = amplitude * FRAC_1_SQRT_2;
    Ok(bits_i
        .iter()
        .zip(bits_q)
        .map(|(&bi, &bq)| {
            Complex64::new(if bi == 0 { s } else { -s }, if bq == 0 { s } else { -s })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PulseShape {
    Nrz,
    RaisedCosine { rolloff: f64 },
}

/// LFSR seeds for the four tributaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSeeds {
    pub xi: u32,
    pub xq: u32,
    pub yi: u32,
    pub yq: u32,
}

impl Default for StreamSeeds {
    fn default() -> Self {
        StreamSeeds {
            xi: 0x0000_7f01,
            xq: 0x0012_3457,
            yi: 0x0040_0a3b,
            yq: 0x0007_5c11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TxConfig {
    /// Symbols per second per polarization.
    pub symbol_rate: f64,
    pub prbs_order: u32,
    pub seeds: StreamSeeds,
    /// Seed of the laser phase-noise process.
    pub phase_seed: u64,
    /// Optical delay on the Y branch, seconds.
    pub decorrelation_delay: f64,
    /// Hz; 0 disables phase noise.
    pub laser_linewidth: f64,
    /// −3 dB bandwidth of the drive electronics, Hz; `inf` for none.
    #[serde(with = "crate::sigkit::unlimited")]
    pub tx_bandwidth: f64,
    pub amplitude: f64,
    pub pulse: PulseShape,
}

impl Default for TxConfig {
    fn default() -> Self {
        TxConfig {
            symbol_rate: 10e9,
            prbs_order: 15,
            seeds: StreamSeeds::default(),
            phase_seed: 1,
            // 2 m of PM fiber at ~5 ns/m
            decorrelation_delay: 10e-9,
            laser_linewidth: 0.0,
            tx_bandwidth: f64::INFINITY,
            amplitude: 1.0,
            pulse: PulseShape::Nrz,
        }
    }
}

impl TxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.symbol_rate > 0.0 && self.symbol_rate.is_finite()) {
            return Err(Error::config("tx.symbol_rate must be positive"));
        }
        if prbs_taps(self.prbs_order).is_none() {
            return Err(Error::config("tx.prbs_order must be 7, 15 or 23"));
        }
        if !(self.decorrelation_delay >= 0.0) {
            return Err(Error::config("tx.decorrelation_delay must be non-negative"));
        }
        if !(self.laser_linewidth >= 0.0) {
            return Err(Error::config("tx.laser_linewidth must be non-negative"));
        }
        if !(self.tx_bandwidth > 0.0) {
            return Err(Error::config("tx.tx_bandwidth must be positive"));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::config("tx.amplitude must be positive"));
        }
        if let PulseShape::RaisedCosine { rolloff } = self.pulse {
            if !(0.0..=1.0).contains(&rolloff) {
                return Err(Error::config("tx.pulse.rolloff must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Transmitted symbols as they sit on the output waveform, one per symbol
/// slot. Symbol `k` is centred on sample `k·sps + sps/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolFrame {
    pub amplitude: f64,
    pub x_syms: Vec<Complex64>,
    pub y_syms: Vec<Complex64>,
    pub x_bits: [Vec<u8>; 2],
    pub y_bits: [Vec<u8>; 2],
    /// Whole-symbol part of the Y decorrelation delay.
    pub y_delay_symbols: usize,
}

impl SymbolFrame {
    pub fn len(&self) -> usize {
        self.x_syms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_syms.is_empty()
    }

    pub fn syms(&self, pol: usize) -> &[Complex64] {
        if pol == 0 {
            &self.x_syms
        } else {
            &self.y_syms
        }
    }

    pub fn bits(&self, pol: usize) -> &[Vec<u8>; 2] {
        if pol == 0 {
            &self.x_bits
        } else {
            &self.y_bits
        }
    }

    /// Writes `k,x_re,x_im,y_re,y_im,x_bi,x_bq,y_bi,y_bq` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "k,x_re,x_im,y_re,y_im,x_bi,x_bq,y_bi,y_bq")?;
        for k in 0..self.len() {
            let (x, y) = (self.x_syms[k], self.y_syms[k]);
            writeln!(
                out,
                "{k},{:.9},{:.9},{:.9},{:.9},{},{},{},{}",
                x.re,
                x.im,
                y.re,
                y.im,
                self.x_bits[0][k],
                self.x_bits[1][k],
                self.y_bits[0][k],
                self.y_bits[1][k]
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Transmission {
    pub signal: DualPolWaveform,
    pub frame: SymbolFrame,
    /// Laser phase in radians per sample, shared by both polarizations.
    pub laser_phase: Vec<f64>,
}

fn shape(symbols: &[Complex64], sps: usize, fs: f64, pulse: PulseShape) -> Result<Waveform> {
    match pulse {
        PulseShape::Nrz => {
            let s = symbols
                .iter()
                .flat_map(|&s| std::iter::repeat_n(s, sps))
                .collect();
            Waveform::new(s, fs)
        }
        PulseShape::RaisedCosine { rolloff } => {
            // Impulses at symbol centres through a zero-ISI raised-cosine
            // spectrum scaled by sps.
            let mut s = vec![Complex64::new(0.0, 0.0); symbols.len() * sps];
            for (k, &sym) in symbols.iter().enumerate() {
                s[k * sps + sps / 2] = sym;
            }
            let w = Waveform::new(s, fs)?;
            let rs = fs / sps as f64;
            let gain = sps as f64;
            freq_domain_filter_with(&w, 0, |f| {
                Complex64::new(gain * raised_cosine(f.abs(), rs, rolloff), 0.0)
            })
        }
    }
}

fn raised_cosine(f: f64, rs: f64, beta: f64) -> f64 {
    let f1 = (1.0 - beta) * rs / 2.0;
    let f2 = (1.0 + beta) * rs / 2.0;
    if f <= f1 {
        1.0
    } else if f >= f2 {
        0.0
    } else {
        0.5 * (1.0 + (PI / (beta * rs) * (f - f1)).cos())
    }
}

/// Wiener phase: increments ~ N(0, 2π·linewidth·dt), starting at 0.
pub(crate) fn wiener_phase(n: usize, linewidth: f64, dt: f64, seed: u64) -> Vec<f64> {
    if linewidth == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = Normal::new(0.0, (2.0 * PI * linewidth * dt).sqrt()).expect("finite sigma");
    let mut phase = Vec::with_capacity(n);
    let mut acc = 0.0;
    for _ in 0..n {
        phase.push(acc);
        acc += step.sample(&mut rng);
    }
    phase
}

pub fn transmit(cfg: &TxConfig, n_symbols: usize, sps: usize) -> Result<Transmission> {
    cfg.validate()?;
    if n_symbols == 0 {
        return Err(Error::invalid("n_symbols must be at least 1"));
    }
    if sps == 0 {
        return Err(Error::invalid("sps must be at least 1"));
    }
    let fs = cfg.symbol_rate * sps as f64;
    let gen = |seed| prbs_generate(cfg.prbs_order, seed, n_symbols);
    let x_bits = [gen(cfg.seeds.xi)?, gen(cfg.seeds.xq)?];
    let y_raw = [gen(cfg.seeds.yi)?, gen(cfg.seeds.yq)?];
    let x_syms = qpsk_map(&x_bits[0], &x_bits[1], cfg.amplitude)?;
    let y_raw_syms = qpsk_map(&y_raw[0], &y_raw[1], cfg.amplitude)?;

    let x = gaussian_lowpass(&shape(&x_syms, sps, fs, cfg.pulse)?, cfg.tx_bandwidth)?;
    let y = gaussian_lowpass(&shape(&y_raw_syms, sps, fs, cfg.pulse)?, cfg.tx_bandwidth)?;

    // The waveform is treated as periodic, so the PM-fiber delay is a
    // circular shift and the frame is rotated by the same whole number of
    // symbols.
    let delay = cfg.decorrelation_delay;
    let y = if delay > 0.0 {
        freq_domain_filter_with(&y, 0, |f| Complex64::from_polar(1.0, -2.0 * PI * f * delay))?
    } else {
        y
    };
    let d = (delay * cfg.symbol_rate).round() as usize % n_symbols;
    let rotate = |v: &[u8]| -> Vec<u8> {
        (0..n_symbols)
            .map(|k| v[(k + n_symbols - d) % n_symbols])
            .collect()
    };
    let y_bits = [rotate(&y_raw[0]), rotate(&y_raw[1])];
    let y_syms = (0..n_symbols)
        .map(|k| y_raw_syms[(k + n_symbols - d) % n_symbols])
        .collect();

    let laser_phase = wiener_phase(x.len(), cfg.laser_linewidth, 1.0 / fs, cfg.phase_seed);
    let rot = |w: Waveform| -> Waveform {
        if cfg.laser_linewidth == 0.0 {
            return w;
        }
        let s = w
            .samples
            .iter()
            .zip(&laser_phase)
            .map(|(&s, &p)| s * Complex64::from_polar(1.0, p))
            .collect();
        w.map_samples(s)
    };
    let signal = DualPolWaveform::new(rot(x), rot(y))?;
    Ok(Transmission {
        signal,
        frame: SymbolFrame {
            amplitude: cfg.amplitude,
            x_syms,
            y_syms,
            x_bits,
            y_bits,
            y_delay_symbols: d,
        },
        laser_phase,
    })
}
