//! EVM, BER (estimated and counted), ambiguity resolution and eye statistics.

use std::io::Write;
use std::path::Path;

use libm::erfc;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigkit::Waveform;
use crate::txchain::SymbolFrame;

/// Hard-decision FEC threshold.
pub const FEC_LIMIT: f64 = 3.8e-3;

/// Fewest symbols an EVM figure is reported over.
pub const MIN_EVM_SYMBOLS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvmReport {
    pub evm_percent: f64,
    pub n: usize,
    /// Sampling instant as a fraction of the symbol period.
    pub sampling_phase: Option<f64>,
    pub per_polarization: Vec<f64>,
}

/// `sqrt(mean |s − r|²)/A`, in percent, against the given (known) reference.
pub fn evm(symbols: &[Complex64], reference: &[Complex64], a: f64) -> Result<EvmReport> {
    if symbols.len() != reference.len() {
        return Err(Error::invalid("symbols and reference differ in length"));
    }
    if !(a > 0.0) {
        return Err(Error::invalid("reference modulus must be positive"));
    }
    let n = symbols.len();
    if n < MIN_EVM_SYMBOLS {
        return Err(Error::InsufficientData {
            needed: MIN_EVM_SYMBOLS,
            got: n,
        });
    }
    let ms = symbols
        .iter()
        .zip(reference)
        .map(|(s, r)| (s - r).norm_sqr())
        .sum::<f64>()
        / n as f64;
    Ok(EvmReport {
        evm_percent: ms.sqrt() / a * 100.0,
        n,
        sampling_phase: None,
        per_polarization: Vec::new(),
    })
}

/// Pools two polarizations: total EVM over both, with the per-pol figures kept.
pub fn evm_dual(
    symbols: [&[Complex64]; 2],
    reference: [&[Complex64]; 2],
    a: f64,
) -> Result<EvmReport> {
    let x = evm(symbols[0], reference[0], a)?;
    let y = evm(symbols[1], reference[1], a)?;
    let n = x.n + y.n;
    let pooled = ((x.evm_percent.powi(2) * x.n as f64 + y.evm_percent.powi(2) * y.n as f64)
        / n as f64)
        .sqrt();
    Ok(EvmReport {
        evm_percent: pooled,
        n,
        sampling_phase: None,
        per_polarization: vec![x.evm_percent, y.evm_percent],
    })
}

/// Gaussian tail probability.
#[inline]
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerEstimate {
    pub ber: f64,
    pub p: u32,
    pub m: u32,
    /// Set when the EVM was exactly zero.
    pub exact_signal: bool,
}

/// BER of a square constellation from its EVM (a fraction, not percent).
pub fn ber_from_evm(evm: f64, p: u32, m: u32) -> Result<BerEstimate> {
    if p < 2 || m != p * p {
        return Err(Error::invalid(format!(
            "need P ≥ 2 and M = P² (got P={p}, M={m})"
        )));
    }
    if !(evm >= 0.0) || !evm.is_finite() {
        return Err(Error::invalid(format!(
            "EVM must be finite and ≥ 0, got {evm}"
        )));
    }
    if evm == 0.0 {
        return Ok(BerEstimate {
            ber: 0.0,
            p,
            m,
            exact_signal: true,
        });
    }
    let pf = p as f64;
    let lp = pf.log2();
    let lm = (m as f64).log2();
    let arg = (3.0 * lp / (pf * pf - 1.0) * 2.0 / (evm * evm * lm)).sqrt();
    let ber = 2.0 * (1.0 - 1.0 / pf) / lp * q_function(arg);
    Ok(BerEstimate {
        ber: ber.min(0.5),
        p,
        m,
        exact_signal: false,
    })
}

/// Quadrant index 0..4 counter-clockwise from the first quadrant.
#[inline]
fn quadrant(v: Complex64) -> u8 {
    match (v.re >= 0.0, v.im >= 0.0) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    }
}

/// Blind static phase of a QPSK stream relative to the grid at π/4 + kπ/2,
/// from the fourth-power average. Folded to (−π/4, π/4].
pub fn fourth_power_phase(symbols: &[Complex64]) -> f64 {
    let m: Complex64 = symbols.iter().map(|s| -s.powu(4)).sum();
    m.arg() / 4.0
}

/// `j^k`.
#[inline]
pub fn quarter_turn(k: u8) -> Complex64 {
    match k % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// Received output `o` carries transmitted polarization `source[o]`, rotated
/// back by `j^rotation[o]`, with `rx[o][i] ↔ tx[(start + i − lag[o]) mod N]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub swap: bool,
    pub rotation: [u8; 2],
    pub lag: [i64; 2],
    pub symbol_errors: [usize; 2],
    pub n: usize,
    pub start: usize,
}

/// Candidate transform and its error count for one output.
#[derive(Debug, Clone, Copy)]
struct Best {
    errors: usize,
    rotation: u8,
    lag: i64,
}

fn best_for(rx: &[Complex64], tx: &[Complex64], start: usize, max_lag: usize) -> Best {
    let n_tx = tx.len() as i64;
    let rq: Vec<u8> = rx.iter().map(|&v| quadrant(v)).collect();
    let tq: Vec<u8> = tx.iter().map(|&v| quadrant(v)).collect();
    let mut best = Best {
        errors: usize::MAX,
        rotation: 0,
        lag: 0,
    };
    // lags in order 0, −1, 1, −2, 2, … so ties favour the smallest delay
    let lags = std::iter::once(0).chain((1..=max_lag as i64).flat_map(|l| [-l, l]));
    for lag in lags {
        let mut hist = [0usize; 4];
        for (i, &q) in rq.iter().enumerate() {
            let k = (start as i64 + i as i64 - lag).rem_euclid(n_tx) as usize;
            hist[((tq[k] + 4 - q) % 4) as usize] += 1;
        }
        for (r, &h) in hist.iter().enumerate() {
            let errors = rx.len() - h;
            if errors < best.errors {
                best = Best {
                    errors,
                    rotation: r as u8,
                    lag,
                };
            }
        }
    }
    best
}

/// Searches {identity, swap} × four rotations × lags in ±`max_lag` symbols.
pub fn resolve_ambiguity(
    rx: [&[Complex64]; 2],
    start: usize,
    frame: &SymbolFrame,
    max_lag: usize,
) -> Result<Alignment> {
    let n = rx[0].len();
    if rx[1].len() != n {
        return Err(Error::invalid("polarizations differ in symbol count"));
    }
    if n < 1000 {
        return Err(Error::InsufficientData {
            needed: 1000,
            got: n,
        });
    }
    if frame.is_empty() {
        return Err(Error::invalid("empty transmitted frame"));
    }
    let b = |o: usize, s: usize| best_for(rx[o], frame.syms(s), start, max_lag);
    let (ident, swap) = ([b(0, 0), b(1, 1)], [b(0, 1), b(1, 0)]);
    let total = |c: &[Best; 2]| c[0].errors + c[1].errors;
    let (is_swap, c) = if total(&swap) < total(&ident) {
        (true, swap)
    } else {
        (false, ident)
    };
    let rate = total(&c) as f64 / (2 * n) as f64;
    if rate > 0.4 {
        return Err(Error::AlignmentFailure { error_rate: rate });
    }
    Ok(Alignment {
        swap: is_swap,
        rotation: [c[0].rotation, c[1].rotation],
        lag: [c[0].lag, c[1].lag],
        symbol_errors: [c[0].errors, c[1].errors],
        n,
        start,
    })
}

/// Aligned received symbols of one output with their transmitted symbols and bits.
#[derive(Debug, Clone)]
pub struct AlignedPol {
    pub symbols: Vec<Complex64>,
    pub reference: Vec<Complex64>,
    pub bits_i: Vec<u8>,
    pub bits_q: Vec<u8>,
}

impl Alignment {
    pub fn source(&self, output: usize) -> usize {
        if self.swap {
            1 - output
        } else {
            output
        }
    }

    pub fn apply(&self, rx: &[Complex64], output: usize, frame: &SymbolFrame) -> AlignedPol {
        let s = self.source(output);
        let (tx, bits) = (frame.syms(s), frame.bits(s));
        let n_tx = tx.len() as i64;
        let rot = quarter_turn(self.rotation[output]);
        let mut out = AlignedPol {
            symbols: Vec::with_capacity(rx.len()),
            reference: Vec::with_capacity(rx.len()),
            bits_i: Vec::with_capacity(rx.len()),
            bits_q: Vec::with_capacity(rx.len()),
        };
        for (i, &v) in rx.iter().enumerate() {
            let k = (self.start as i64 + i as i64 - self.lag[output]).rem_euclid(n_tx) as usize;
            out.symbols.push(v * rot);
            out.reference.push(tx[k]);
            out.bits_i.push(bits[0][k]);
            out.bits_q.push(bits[1][k]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerCount {
    pub errors: u64,
    pub bits: u64,
    pub ber: f64,
}

/// Gray demapping (positive → 0) and exact error counting.
pub fn count_ber(symbols: &[Complex64], bits_i: &[u8], bits_q: &[u8]) -> Result<BerCount> {
    if symbols.len() != bits_i.len() || symbols.len() != bits_q.len() {
        return Err(Error::invalid("symbols and bit streams differ in length"));
    }
    let mut errors = 0u64;
    for ((s, &bi), &bq) in symbols.iter().zip(bits_i).zip(bits_q) {
        errors += ((s.re < 0.0) as u8 != bi) as u64 + ((s.im < 0.0) as u8 != bq) as u64;
    }
    let bits = 2 * symbols.len() as u64;
    Ok(BerCount {
        errors,
        bits,
        ber: if bits == 0 {
            0.0
        } else {
            errors as f64 / bits as f64
        },
    })
}

pub const EYE_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeStats {
    pub sps: usize,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// `histogram[phase][bin]` of the in-phase component.
    pub histogram: Vec<Vec<u64>>,
    /// Inner-eye height of the in-phase component per phase.
    pub heights: Vec<f64>,
    pub best_phase: usize,
    pub eye_height: f64,
    /// Fraction of the symbol period over which the eye is open.
    pub eye_width: f64,
}

impl EyeStats {
    pub fn mass(&self) -> u64 {
        self.histogram.iter().flatten().sum()
    }

    /// Writes `phase,amplitude,count` rows, one per histogram cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "phase,amplitude,count")?;
        let bw = (self.amplitude_max - self.amplitude_min) / EYE_BINS as f64;
        for (p, row) in self.histogram.iter().enumerate() {
            for (b, c) in row.iter().enumerate() {
                let amp = self.amplitude_min + (b as f64 + 0.5) * bw;
                writeln!(out, "{},{:.6e},{}", p as f64 / self.sps as f64, amp, c)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Inner-eye height from the two rails: (μ₊ − 3σ₊) − (μ₋ + 3σ₋).
fn inner_height(values: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut s, mut ss) = ([0usize; 2], [0.0; 2], [0.0; 2]);
    for v in values {
        let r = (v < 0.0) as usize;
        n[r] += 1;
        s[r] += v;
        ss[r] += v * v;
    }
    if n[0] == 0 || n[1] == 0 {
        return f64::NEG_INFINITY;
    }
    let stat = |r: usize| {
        let m = s[r] / n[r] as f64;
        (m, (ss[r] / n[r] as f64 - m * m).max(0.0).sqrt())
    };
    let (mp, sp) = stat(0);
    let (mn, sn) = stat(1);
    (mp - 3.0 * sp) - (mn + 3.0 * sn)
}

/// Picks the phase of largest inner-eye height. Phases within 1e-9 of the
/// best form a plateau; the centre of its longest run wins (lower index on
/// ties), and a flat eye resolves to mid-symbol.
pub fn best_sampling_phase(w: &Waveform, sps: usize) -> Result<(usize, EyeStats)> {
    if sps == 0 {
        return Err(Error::invalid("sps must be positive"));
    }
    let n_sym = w.len() / sps;
    if n_sym < 500 {
        return Err(Error::InsufficientData {
            needed: 500,
            got: n_sym,
        });
    }
    let at = |k: usize, p: usize| w.samples[k * sps + p].re;
    let heights: Vec<f64> = (0..sps)
        .map(|p| inner_height((0..n_sym).map(|k| at(k, p))))
        .collect();
    let hmax = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * hmax.abs().max(1e-12);
    let on: Vec<bool> = heights.iter().map(|&h| h >= hmax - tol).collect();
    let best_phase = if on.iter().all(|&b| b) {
        sps / 2
    } else {
        // longest circular run of plateau phases
        let start = on.iter().position(|&b| !b).expect("some phase off plateau");
        let (mut best, mut run_start, mut run_len) = ((usize::MAX, 0usize), 0, 0);
        for i in 1..=sps {
            let p = (start + i) % sps;
            if on[p] {
                if run_len == 0 {
                    run_start = p;
                }
                run_len += 1;
            }
            if !on[p] || i == sps {
                if run_len > 0 {
                    let centre = (run_start + (run_len - 1) / 2) % sps;
                    let better = best.0 == usize::MAX
                        || run_len > best.0
                        || (run_len == best.0 && centre < best.1);
                    if better {
                        best = (run_len, centre);
                    }
                }
                run_len = 0;
            }
        }
        best.1
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in &w.samples[..n_sym * sps] {
        lo = lo.min(v.re);
        hi = hi.max(v.re);
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let mut histogram = vec![vec![0u64; EYE_BINS]; sps];
    for k in 0..n_sym {
        for (p, row) in histogram.iter_mut().enumerate() {
            let b = ((at(k, p) - lo) / (hi - lo) * EYE_BINS as f64) as usize;
            row[b.min(EYE_BINS - 1)] += 1;
        }
    }
    let open = heights.iter().filter(|&&h| h > 0.0).count();
    Ok((
        best_phase,
        EyeStats {
            sps,
            amplitude_min: lo,
            amplitude_max: hi,
            histogram,
            eye_height: heights[best_phase],
            heights,
            best_phase,
            eye_width: open as f64 / sps as f64,
        },
    ))
}

/// Symbol-rate samples at `phase`, symbols `first..first + n`.
pub fn sample_symbols(
    w: &Waveform,
    sps: usize,
    phase: usize,
    first: usize,
    n: usize,
) -> Vec<Complex64> {
    (first..first + n)
        .map(|k| w.samples[k * sps + phase])
        .collect()
}

/// Spread of |s|² about its own mean, relative to that mean: the
/// steady-state modulus error of a constant-modulus output.
pub fn modulus_dispersion(symbols: &[Complex64]) -> f64 {
    let n = symbols.len() as f64;
    let p: Vec<f64> = symbols.iter().map(|s| s.norm_sqr()).collect();
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// One measurement point of the link. Figures that need the transmitted
/// sequence are absent when alignment fails (e.g. before polarization
/// demultiplexing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    /// Selected sample within the symbol, 0..sps.
    pub sampling_phase: usize,
    pub eye_height: f64,
    pub eye_width: f64,
    pub modulus_dispersion: f64,
    /// Static phase removed per polarization before deciding, radians.
    pub derotation: [f64; 2],
    pub alignment: Option<Alignment>,
    /// Magnitude of the gain that maps each polarization onto the reference.
    pub scale: Option<[f64; 2]>,
    pub evm: Option<EvmReport>,
    pub ber_estimate: Option<BerEstimate>,
    pub ber_counted: Option<BerCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stages: Vec<StageMetrics>,
}

impl MetricsReport {
    pub fn stage(&self, name: &str) -> Option<&StageMetrics> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

/// Writes `pol,re,im` rows of decided-phase samples.
pub fn write_constellation_csv(path: &Path, symbols: [&[Complex64]; 2]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "pol,re,im")?;
    for (p, syms) in symbols.iter().enumerate() {
        let name = if p == 0 { "x" } else { "y" };
        for s in syms.iter() {
            writeln!(out, "{name},{:.9e},{:.9e}", s.re, s.im)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::txchain::{qpsk_map, transmit, TxConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_qpsk(n: usize, seed: u64) -> (Vec<Complex64>, Vec<u8>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bi: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let bq: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        (qpsk_map(&bi, &bq, 1.0).unwrap(), bi, bq)
    }

    #[test]
    fn q_matches_table() {
        // 30-digit reference values
        let table = [
            (0.5, 0.30853753872598689636),
            (1.0, 0.15865525393145705141),
            (2.0, 0.0227501319481792072),
            (3.0, 0.0013498980316300945267),
            (3.5, 0.00023262907903552503635),
            (4.0, 0.000031671241833119921254),
            (5.0, 2.8665157187919391167e-7),
            (6.0, 9.865876450376981407e-10),
        ];
        for (x, q) in table {
            assert!((q_function(x) - q).abs() / q < 1e-12, "Q({x})");
        }
    }

    #[test]
    fn ber_from_evm_reference_points() {
        for (evm, tabulated, exact) in [
            (0.28, 1.8e-4, 0.000177519690373471151),
            (0.32, 8.9e-4, 0.00088902529910843205933),
            (0.33, 1.2e-3, 0.0012215424135802521705),
        ] {
            let b = ber_from_evm(evm, 2, 4).unwrap().ber;
            assert!((b - tabulated).abs() / tabulated < 0.05, "{evm}: {b}");
            assert!((b - exact).abs() / exact < 1e-12);
        }
        let z = ber_from_evm(0.0, 2, 4).unwrap();
        assert!(z.exact_signal && z.ber == 0.0);
        assert!(ber_from_evm(0.3, 2, 8).is_err());
    }

    #[test]
    fn ber_from_evm_is_decreasing() {
        let mut prev = 0.0;
        for i in 8..200 {
            let b = ber_from_evm(i as f64 * 0.005, 2, 4).unwrap().ber;
            assert!(b > prev);
            prev = b;
        }
    }

    #[test]
    fn evm_examples() {
        let (r, _, _) = random_qpsk(1000, 1);
        assert_eq!(evm(&r, &r, 1.0).unwrap().evm_percent, 0.0);
        let d: Vec<Complex64> = r.iter().map(|v| v * 1.28).collect();
        assert!((evm(&d, &r, 1.0).unwrap().evm_percent - 28.0).abs() < 1e-6);
        assert!(matches!(
            evm(&r[..99], &r[..99], 1.0),
            Err(Error::InsufficientData { .. })
        ));
    }

    fn awgn(r: &[Complex64], sigma: f64, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        r.iter()
            .map(|v| {
                let nr: f64 = rng.sample(StandardNormal);
                let ni: f64 = rng.sample(StandardNormal);
                v + Complex64::new(nr, ni) * sigma
            })
            .collect()
    }

    #[test]
    fn evm_of_awgn() {
        let (r, _, _) = random_qpsk(1 << 16, 2);
        let s = awgn(&r, 0.28 / 2f64.sqrt(), 3);
        let e = evm(&s, &r, 1.0).unwrap().evm_percent;
        assert!((e - 28.0).abs() < 1.0, "{e}");
    }

    #[test]
    fn counted_ber_matches_estimate_under_awgn() {
        let (r, bi, bq) = random_qpsk(1 << 17, 4);
        let s = awgn(&r, 0.28 / 2f64.sqrt(), 5);
        let c = count_ber(&s, &bi, &bq).unwrap();
        assert_eq!(c.bits, 1 << 18);
        let est = ber_from_evm(0.28, 2, 4).unwrap().ber;
        assert!(c.ber > est / 2.0 && c.ber < est * 2.0, "{} vs {est}", c.ber);
    }

    #[test]
    fn count_ber_single_flip() {
        let (mut r, bi, bq) = random_qpsk(10_000, 6);
        assert_eq!(count_ber(&r, &bi, &bq).unwrap().errors, 0);
        r[500] = r[500].conj();
        let c = count_ber(&r, &bi, &bq).unwrap();
        assert_eq!(c.errors, 1);
        assert_eq!(c.ber, 1.0 / 20_000.0);
    }

    fn frame(n: usize) -> SymbolFrame {
        transmit(&TxConfig::default(), n, 1).unwrap().frame
    }

    #[test]
    fn alignment_identity() {
        let f = frame(4000);
        let a = resolve_ambiguity([&f.x_syms, &f.y_syms], 0, &f, 20).unwrap();
        assert!(!a.swap);
        assert_eq!(a.rotation, [0, 0]);
        assert_eq!(a.lag, [0, 0]);
        assert_eq!(a.symbol_errors, [0, 0]);
    }

    #[test]
    fn alignment_swap_rotation_and_lag() {
        let f = frame(4000);
        let j = Complex64::new(0.0, 1.0);
        // rx0 carries Y rotated by j; rx1 carries X delayed by 3 symbols
        let rx0: Vec<Complex64> = f.y_syms.iter().map(|v| v * j).collect();
        let rx1: Vec<Complex64> = (0..4000).map(|i| f.x_syms[(i + 4000 - 3) % 4000]).collect();
        let a = resolve_ambiguity([&rx0, &rx1], 0, &f, 20).unwrap();
        assert!(a.swap);
        assert_eq!(a.rotation, [3, 0]);
        assert_eq!(a.lag, [0, 3]);
        let p = a.apply(&rx0, 0, &f);
        assert_eq!(
            count_ber(&p.symbols, &p.bits_i, &p.bits_q).unwrap().errors,
            0
        );
    }

    #[test]
    fn alignment_rejects_unrelated() {
        let f = frame(4000);
        let (a, _, _) = random_qpsk(4000, 7);
        let (b, _, _) = random_qpsk(4000, 8);
        match resolve_ambiguity([&a, &b], 0, &f, 4) {
            Err(Error::AlignmentFailure { error_rate }) => {
                assert!(error_rate > 0.6 && error_rate < 0.75, "{error_rate}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn alignment_is_exhaustive_minimum() {
        let f = frame(2000);
        let (mut rx0, mut rx1) = (f.y_syms.clone(), f.x_syms.clone());
        let noisy = awgn(&rx0, 0.3, 9);
        rx0.copy_from_slice(&noisy);
        let noisy = awgn(&rx1, 0.3, 10);
        rx1.copy_from_slice(&noisy);
        let a = resolve_ambiguity([&rx0, &rx1], 5, &f, 6).unwrap();
        let found: usize = a.symbol_errors.iter().sum();
        let n = f.len() as i64;
        for swap in [false, true] {
            let mut total = 0;
            for (o, rx) in [&rx0, &rx1].iter().enumerate() {
                let src = f.syms(if swap { 1 - o } else { o });
                let mut best = usize::MAX;
                for rot in 0..4 {
                    for lag in -6i64..=6 {
                        let e = (0..rx.len())
                            .filter(|&i| {
                                let k = (5 + i as i64 - lag).rem_euclid(n) as usize;
                                let v = rx[i] * quarter_turn(rot);
                                (v.re < 0.0) != (src[k].re < 0.0)
                                    || (v.im < 0.0) != (src[k].im < 0.0)
                            })
                            .count();
                        best = best.min(e);
                    }
                }
                total += best;
            }
            assert!(found <= total);
        }
    }

    fn nrz(n: usize, sps: usize, bw: Option<f64>) -> Waveform {
        let cfg = TxConfig {
            tx_bandwidth: bw.unwrap_or(f64::INFINITY),
            ..TxConfig::default()
        };
        transmit(&cfg, n, sps).unwrap().signal.x
    }

    #[test]
    fn ideal_nrz_samples_mid_symbol() {
        let (p, eye) = best_sampling_phase(&nrz(1000, 16, None), 16).unwrap();
        assert_eq!(p, 8);
        assert_eq!(eye.mass(), 16_000);
    }

    #[test]
    fn phase_follows_delay() {
        let w = nrz(2000, 16, Some(6e9));
        let (p0, _) = best_sampling_phase(&w, 16).unwrap();
        for k in [1usize, 5, 11] {
            let mut s = w.samples.clone();
            s.rotate_right(k);
            let (pk, _) = best_sampling_phase(&w.map_samples(s), 16).unwrap();
            assert_eq!(pk, (p0 + k) % 16);
        }
    }

    #[test]
    fn eye_phase_matches_brute_force_evm() {
        let sps = 16;
        let tx = transmit(
            &TxConfig {
                tx_bandwidth: 5e9,
                ..TxConfig::default()
            },
            3000,
            sps,
        )
        .unwrap();
        let w = &tx.signal.x;
        let (p, _) = best_sampling_phase(w, sps).unwrap();
        let evm_at = |ph: usize| {
            let s = sample_symbols(w, sps, ph, 0, 3000);
            let scale = (s.iter().map(|v| v.norm_sqr()).sum::<f64>() / 3000.0).sqrt();
            let s: Vec<Complex64> = s.iter().map(|v| v / scale).collect();
            evm(&s, &tx.frame.x_syms, 1.0).unwrap().evm_percent
        };
        let brute = (0..sps)
            .min_by(|&a, &b| evm_at(a).partial_cmp(&evm_at(b)).unwrap())
            .unwrap();
        assert_eq!(p, brute);
    }

    #[test]
    fn eye_needs_500_symbols() {
        assert!(best_sampling_phase(&nrz(499, 8, None), 8).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn evm_rotation_invariant(seed in 0u64..1000, phi in 0.0f64..6.3) {
            let (r, _, _) = random_qpsk(200, seed);
            let s = awgn(&r, 0.1, seed + 1);
            let rot = Complex64::from_polar(1.0, phi);
            let rs: Vec<Complex64> = s.iter().map(|v| v * rot).collect();
            let rr: Vec<Complex64> = r.iter().map(|v| v * rot).collect();
            let a = evm(&s, &r, 1.0).unwrap().evm_percent;
            let b = evm(&rs, &rr, 1.0).unwrap().evm_percent;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn eye_mass_is_sample_count(n in 500usize..700, sps in 2usize..9) {
            let w = nrz(n, sps, Some(8e9));
            let (_, eye) = best_sampling_phase(&w, sps).unwrap();
            prop_assert_eq!(eye.mass(), (n * sps) as u64);
        }
    }
}
