//! Coherent receiver front-end: LO mixing, ideal 90° hybrid with balanced
//! detection, electrical bandwidth limit and per-polarization AGC.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigkit::{gaussian_lowpass, DualPolWaveform, QuadWaveform, Waveform};
use crate::txchain::wiener_phase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RxConfig {
    /// LO minus carrier frequency, Hz.
    pub lo_frequency_offset: f64,
    pub lo_phase: f64,
    /// Linewidth of the LO phase noise not shared with the transmit laser.
    pub lo_linewidth: f64,
    /// LO taken from the transmit laser, so its phase noise cancels.
    pub shared_laser: bool,
    /// RMS amplitude per polarization after AGC; 1.0 is 100 mV single-ended
    /// (400 mVpp differential).
    pub agc_target: f64,
    /// −3 dB bandwidth of the photodiode/TIA chain, Hz; `inf` for none.
    #[serde(with = "crate::sigkit::unlimited")]
    pub rx_bandwidth: f64,
}

impl Default for RxConfig {
    fn default() -> Self {
        RxConfig {
            lo_frequency_offset: 0.0,
            lo_phase: 0.0,
            lo_linewidth: 0.0,
            shared_laser: true,
            agc_target: 1.0,
            rx_bandwidth: f64::INFINITY,
        }
    }
}

impl RxConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lo_frequency_offset.is_finite() || !self.lo_phase.is_finite() {
            return Err(Error::config("rx LO offset and phase must be finite"));
        }
        if !(self.lo_linewidth >= 0.0) {
            return Err(Error::config("rx.lo_linewidth must be non-negative"));
        }
        if !(self.agc_target > 0.0 && self.agc_target.is_finite()) {
            return Err(Error::config("rx.agc_target must be positive"));
        }
        if !(self.rx_bandwidth > 0.0) {
            return Err(Error::config("rx.rx_bandwidth must be positive"));
        }
        Ok(())
    }
}

/// Mixes both polarizations with the LO and splits them into I/Q rails.
///
/// `laser_phase` is the transmit laser's phase trajectory; with
/// `shared_laser` it is part of the LO and cancels. Any extra LO phase noise
/// draws its seed from `rng`.
pub fn coherent_detect<R: Rng + ?Sized>(
    sig: &DualPolWaveform,
    cfg: &RxConfig,
    laser_phase: Option<&[f64]>,
    rng: &mut R,
) -> Result<QuadWaveform> {
    cfg.validate()?;
    let n = sig.len();
    if let Some(p) = laser_phase {
        if p.len() != n {
            return Err(Error::invalid("laser phase length differs from signal"));
        }
    }
    let dt = 1.0 / sig.sample_rate();
    let extra = wiener_phase(n, cfg.lo_linewidth, dt, rng.gen());
    let lo: Vec<Complex64> = (0..n)
        .map(|i| {
            let t = sig.x.time(i);
            let mut phase = 2.0 * PI * cfg.lo_frequency_offset * t + cfg.lo_phase + extra[i];
            if cfg.shared_laser {
                if let Some(p) = laser_phase {
                    phase += p[i];
                }
            }
            Complex64::from_polar(1.0, phase)
        })
        .collect();
    let mix = |w: &Waveform| -> Result<Waveform> {
        let s = w
            .samples
            .iter()
            .zip(&lo)
            .map(|(&s, l)| s * l.conj())
            .collect();
        gaussian_lowpass(&w.map_samples(s), cfg.rx_bandwidth)
    };
    let dual = DualPolWaveform::new(mix(&sig.x)?, mix(&sig.y)?)?;
    Ok(QuadWaveform::from_dual(&dual))
}

/// One real gain per polarization taking its mean |·|² to `target²`.
pub fn agc(quad: &QuadWaveform, target: f64) -> Result<(QuadWaveform, [f64; 2])> {
    quad.validate()?;
    if !(target > 0.0) {
        return Err(Error::invalid("AGC target must be positive"));
    }
    let gain = |i: &[f64], q: &[f64]| -> Result<f64> {
        let p: f64 = i.iter().zip(q).map(|(a, b)| a * a + b * b).sum::<f64>() / i.len() as f64;
        if p <= 0.0 {
            return Err(Error::DegenerateInput("AGC input has zero power".into()));
        }
        Ok(target / p.sqrt())
    };
    let gx = gain(&quad.xi, &quad.xq)?;
    let gy = gain(&quad.yi, &quad.yq)?;
    let scale = |v: &[f64], g: f64| v.iter().map(|a| a * g).collect::<Vec<_>>();
    Ok((
        QuadWaveform {
            xi: scale(&quad.xi, gx),
            xq: scale(&quad.xq, gx),
            yi: scale(&quad.yi, gy),
            yq: scale(&quad.yq, gy),
            sample_rate: quad.sample_rate,
            t0: quad.t0,
        },
        [gx, gy],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fiberchan::{apply_channel, ChannelConfig, NoiseSpec};
    use crate::txchain::{transmit, TxConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rustfft::FftPlanner;

    fn tx(n: usize, linewidth: f64) -> crate::txchain::Transmission {
        transmit(
            &TxConfig {
                laser_linewidth: linewidth,
                ..TxConfig::default()
            },
            n,
            8,
        )
        .unwrap()
    }

    #[test]
    fn transparent_detection() {
        let t = tx(256, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = coherent_detect(&t.signal, &RxConfig::default(), None, &mut rng).unwrap();
        for (a, b) in q.x().iter().zip(&t.signal.x.samples) {
            assert!((a - b).norm() < 1e-12);
        }
        for (a, b) in q.y().iter().zip(&t.signal.y.samples) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn frequency_offset_rotates_carrier() {
        let n = 4096;
        let fs = 80e9;
        let carrier = Waveform::new(vec![Complex64::new(1.0, 0.0); n], fs).unwrap();
        let sig = DualPolWaveform::new(carrier.clone(), carrier).unwrap();
        let cfg = RxConfig {
            lo_frequency_offset: 100e6,
            ..RxConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = coherent_detect(&sig, &cfg, None, &mut rng).unwrap();
        let mut spec = q.x();
        FftPlanner::new().plan_fft_forward(n).process(&mut spec);
        let peak = (0..n)
            .max_by(|&a, &b| spec[a].norm().total_cmp(&spec[b].norm()))
            .unwrap();
        let df = fs / n as f64;
        let f = if peak > n / 2 {
            peak as f64 - n as f64
        } else {
            peak as f64
        } * df;
        assert!((f.abs() - 100e6).abs() <= df, "peak at {f}");
    }

    #[test]
    fn shared_laser_cancels_phase_noise() {
        let t = tx(512, 10e6);
        let clean = tx(512, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = coherent_detect(
            &t.signal,
            &RxConfig::default(),
            Some(&t.laser_phase),
            &mut rng,
        )
        .unwrap();
        // residual phase relative to the noiseless signal stays fixed
        for (a, b) in q.x().iter().zip(&clean.signal.x.samples) {
            assert!((a - b).norm() < 1e-9);
        }
        let unshared = RxConfig {
            shared_laser: false,
            ..RxConfig::default()
        };
        let q = coherent_detect(&t.signal, &unshared, Some(&t.laser_phase), &mut rng).unwrap();
        let worst = q
            .x()
            .iter()
            .zip(&clean.signal.x.samples)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(worst > 1e-3);
    }

    #[test]
    fn detection_is_linear() {
        let a = tx(128, 0.0).signal;
        let b = transmit(
            &TxConfig {
                seeds: crate::txchain::StreamSeeds {
                    xi: 3,
                    xq: 5,
                    yi: 7,
                    yq: 11,
                },
                ..TxConfig::default()
            },
            128,
            8,
        )
        .unwrap()
        .signal;
        let cfg = RxConfig {
            lo_frequency_offset: 50e6,
            lo_phase: 0.4,
            rx_bandwidth: 8e9,
            ..RxConfig::default()
        };
        let sum = DualPolWaveform::new(
            a.x.map_samples(
                a.x.samples
                    .iter()
                    .zip(&b.x.samples)
                    .map(|(p, q)| p * 2.0 - q)
                    .collect(),
            ),
            a.y.map_samples(
                a.y.samples
                    .iter()
                    .zip(&b.y.samples)
                    .map(|(p, q)| p * 2.0 - q)
                    .collect(),
            ),
        )
        .unwrap();
        let det = |s: &DualPolWaveform| {
            coherent_detect(s, &cfg, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
        };
        let (qa, qb, qs) = (det(&a), det(&b), det(&sum));
        for i in 0..qa.len() {
            assert!((qa.xi[i] * 2.0 - qb.xi[i] - qs.xi[i]).abs() < 1e-12);
            assert!((qa.yq[i] * 2.0 - qb.yq[i] - qs.yq[i]).abs() < 1e-12);
        }
    }

    fn quad_of(t: &crate::txchain::Transmission) -> QuadWaveform {
        QuadWaveform::from_dual(&t.signal)
    }

    #[test]
    fn agc_fixed_point_and_inverse_scaling() {
        let q = quad_of(&tx(256, 0.0));
        let (_, g) = agc(&q, 1.0).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6 && (g[1] - 1.0).abs() < 1e-6);
        let half = QuadWaveform {
            xi: q.xi.iter().map(|v| v * 0.5).collect(),
            xq: q.xq.iter().map(|v| v * 0.5).collect(),
            yi: q.yi.iter().map(|v| v * 0.5).collect(),
            yq: q.yq.iter().map(|v| v * 0.5).collect(),
            ..q.clone()
        };
        let (_, g) = agc(&half, 1.0).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-3 && (g[1] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn agc_preserves_iq_ratio() {
        let q = quad_of(&tx(64, 0.0));
        let (out, _) = agc(&q, 0.7).unwrap();
        for i in 0..q.len() {
            let rx = q.xi[i] / q.xq[i];
            let ry = q.yi[i] / q.yq[i];
            assert!((rx - out.xi[i] / out.xq[i]).abs() <= 1e-14 * rx.abs());
            assert!((ry - out.yi[i] / out.yq[i]).abs() <= 1e-14 * ry.abs());
        }
    }

    #[test]
    fn agc_rejects_silence() {
        let mut q = quad_of(&tx(16, 0.0));
        q.xi.iter_mut()
            .chain(q.xq.iter_mut())
            .for_each(|v| *v = 0.0);
        assert!(matches!(agc(&q, 1.0), Err(Error::DegenerateInput(_))));
    }

    /// E|1 + n| for complex Gaussian n with per-component std `s`, by
    /// brute-force quadrature.
    fn rician_mean(s: f64) -> f64 {
        let m = 600;
        let h = 16.0 * s / m as f64;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for a in 0..=m {
            for b in 0..=m {
                let u = -8.0 * s + a as f64 * h;
                let v = -8.0 * s + b as f64 * h;
                let w = (-(u * u + v * v) / (2.0 * s * s)).exp();
                acc += w * Complex64::new(1.0 + u, v).norm();
                wsum += w;
            }
        }
        acc / wsum
    }

    #[test]
    fn agc_on_noisy_qpsk_mean_modulus() {
        let evm = 0.30;
        let t = tx(1 << 13, 0.0);
        let ch = ChannelConfig {
            attenuation: 0.0,
            noise: NoiseSpec::TargetEvm { evm },
            ..ChannelConfig::default()
        };
        let noisy = apply_channel(&t.signal, &ch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let q = QuadWaveform::from_dual(&noisy);
        let (out, _) = agc(&q, 1.0).unwrap();
        let x = out.x();
        let n = x.len() as f64;
        let rms = (x.iter().map(|s| s.norm_sqr()).sum::<f64>() / n).sqrt();
        assert!((rms - 1.0).abs() < 1e-9);
        // The mean modulus sits below the RMS by the Rician moment ratio.
        let mean_mod = x.iter().map(|s| s.norm()).sum::<f64>() / n;
        let expect = rician_mean(evm / 2f64.sqrt()) / (1.0 + evm * evm).sqrt();
        assert!((mean_mod - expect).abs() < 0.005, "{mean_mod} vs {expect}");
    }
}
