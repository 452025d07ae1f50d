//! Standard single-mode fiber impairments: chromatic dispersion,
//! first-order DGD, polarization rotation, attenuation and additive noise.

use std::f64::consts::PI;
use std::ops::Mul;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigkit::{fft_frequencies, freq_domain_filter, DualPolWaveform};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Additive noise at the channel output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    None,
    /// RMS of the complex noise per sample, internal units.
    Sigma {
        sigma: f64,
    },
    /// Noise RMS set to `evm` × signal RMS.
    TargetEvm {
        evm: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub length_km: f64,
    /// ps/(nm·km)
    pub dispersion_d: f64,
    pub wavelength_nm: f64,
    /// (θ, φ, ψ) of [`jones_rotation`], radians.
    pub jones_angles: [f64; 3],
    /// Differential group delay, seconds.
    pub dgd: f64,
    /// dB/km
    pub attenuation: f64,
    pub noise: NoiseSpec,
    /// Signal/LO optical path difference, seconds. Bookkeeping only; the
    /// resulting carrier offset is configured on the receiver.
    pub lo_path_delay: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            length_km: 0.0,
            dispersion_d: 17.0,
            wavelength_nm: 1550.0,
            jones_angles: [0.0; 3],
            dgd: 0.0,
            attenuation: 0.2,
            noise: NoiseSpec::None,
            lo_path_delay: 0.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.length_km >= 0.0 && self.length_km.is_finite()) {
            return Err(Error::config("channel.length_km must be non-negative"));
        }
        if !self.dispersion_d.is_finite() {
            return Err(Error::config("channel.dispersion_d must be finite"));
        }
        if !(self.wavelength_nm > 0.0) {
            return Err(Error::config("channel.wavelength_nm must be positive"));
        }
        if !self.jones_angles.iter().all(|a| a.is_finite()) {
            return Err(Error::config("channel.jones_angles must be finite"));
        }
        if !(self.dgd >= 0.0 && self.dgd.is_finite()) {
            return Err(Error::config("channel.dgd must be non-negative"));
        }
        if !(self.attenuation >= 0.0) {
            return Err(Error::config("channel.attenuation must be non-negative"));
        }
        match self.noise {
            NoiseSpec::Sigma { sigma } if !(sigma >= 0.0) => {
                Err(Error::config("channel.noise.sigma must be non-negative"))
            }
            NoiseSpec::TargetEvm { evm } if !(evm >= 0.0) => {
                Err(Error::config("channel.noise.evm must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

/// Dispersion transfer function `exp(+j π D λ² z f² / c)` on the grid `f`.
pub fn cd_transfer(f: &[f64], d_ps_nm_km: f64, lambda_nm: f64, z_km: f64) -> Vec<Complex64> {
    let coeff = cd_phase_coefficient(d_ps_nm_km, lambda_nm, z_km);
    f.iter()
        .map(|&fk| Complex64::from_polar(1.0, coeff * fk * fk))
        .collect()
}

/// π D λ² z / c in rad/Hz², SI units throughout.
fn cd_phase_coefficient(d_ps_nm_km: f64, lambda_nm: f64, z_km: f64) -> f64 {
    let d = d_ps_nm_km * 1e-12 / (1e-9 * 1e3);
    let lambda = lambda_nm * 1e-9;
    let z = z_km * 1e3;
    PI * d * lambda * lambda * z / SPEED_OF_LIGHT
}

/// 2×2 complex polarization transfer matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JonesMatrix(pub [[Complex64; 2]; 2]);

impl JonesMatrix {
    pub fn identity() -> Self {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        JonesMatrix([[one, zero], [zero, one]])
    }

    pub fn dagger(&self) -> Self {
        let m = &self.0;
        JonesMatrix([
            [m[0][0].conj(), m[1][0].conj()],
            [m[0][1].conj(), m[1][1].conj()],
        ])
    }

    pub fn det(&self) -> Complex64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d.norm() < 1e-300 {
            return None;
        }
        let m = &self.0;
        Some(JonesMatrix([
            [m[1][1] / d, -m[0][1] / d],
            [-m[1][0] / d, m[0][0] / d],
        ]))
    }

    #[inline]
    pub fn apply(&self, x: Complex64, y: Complex64) -> (Complex64, Complex64) {
        let m = &self.0;
        (m[0][0] * x + m[0][1] * y, m[1][0] * x + m[1][1] * y)
    }

    /// Largest entry-wise deviation of `J·J†` from the identity.
    pub fn unitarity_error(&self) -> f64 {
        let p = *self * self.dagger();
        let id = JonesMatrix::identity();
        let mut worst: f64 = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                worst = worst.max((p.0[r][c] - id.0[r][c]).norm());
            }
        }
        worst
    }

    pub fn frobenius_sqr(&self) -> f64 {
        self.0.iter().flatten().map(|v| v.norm_sqr()).sum()
    }
}

impl Mul for JonesMatrix {
    type Output = JonesMatrix;

    fn mul(self, rhs: JonesMatrix) -> JonesMatrix {
        let (a, b) = (&self.0, &rhs.0);
        let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
        }
        JonesMatrix(out)
    }
}

fn planar_rotation(a: f64) -> JonesMatrix {
    let (s, c) = a.sin_cos();
    let c = Complex64::new(c, 0.0);
    let s = Complex64::new(s, 0.0);
    JonesMatrix([[c, -s], [s, c]])
}

/// `R(θ) · diag(e^{jφ}, e^{−jφ}) · R(ψ)`.
pub fn jones_rotation(theta: f64, phi: f64, psi: f64) -> JonesMatrix {
    let zero = Complex64::new(0.0, 0.0);
    let retarder = JonesMatrix([
        [Complex64::from_polar(1.0, phi), zero],
        [zero, Complex64::from_polar(1.0, -phi)],
    ]);
    planar_rotation(theta) * retarder * planar_rotation(psi)
}

/// Uniform draws over the rotation angles; φ ∈ [0, π/2) spans every
/// retardance.
pub fn random_jones_angles<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [
        rng.gen_range(-PI..PI),
        rng.gen_range(0.0..PI / 2.0),
        rng.gen_range(-PI..PI),
    ]
}

/// CD → DGD → Jones rotation → attenuation → AWGN.
pub fn apply_channel<R: Rng + ?Sized>(
    sig: &DualPolWaveform,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<DualPolWaveform> {
    cfg.validate()?;
    let fs = sig.sample_rate();
    let n = sig.len();
    let (mut x, mut y) = (sig.x.clone(), sig.y.clone());

    if cfg.length_km > 0.0 || cfg.dgd > 0.0 {
        let grid = fft_frequencies(n, fs);
        let cd = cd_transfer(&grid, cfg.dispersion_d, cfg.wavelength_nm, cfg.length_km);
        let half = cfg.dgd / 2.0;
        let hx: Vec<Complex64> = grid
            .iter()
            .zip(&cd)
            .map(|(&f, &h)| h * Complex64::from_polar(1.0, -2.0 * PI * f * half))
            .collect();
        let hy: Vec<Complex64> = grid
            .iter()
            .zip(&cd)
            .map(|(&f, &h)| h * Complex64::from_polar(1.0, 2.0 * PI * f * half))
            .collect();
        x = freq_domain_filter(&x, &hx, 0)?;
        y = freq_domain_filter(&y, &hy, 0)?;
    }

    let j = jones_rotation(
        cfg.jones_angles[0],
        cfg.jones_angles[1],
        cfg.jones_angles[2],
    );
    let loss = 10f64.powf(-cfg.attenuation * cfg.length_km / 20.0);
    for (a, b) in x.samples.iter_mut().zip(y.samples.iter_mut()) {
        let (p, q) = j.apply(*a, *b);
        *a = p * loss;
        *b = q * loss;
    }

    let sigma = match cfg.noise {
        NoiseSpec::None => 0.0,
        NoiseSpec::Sigma { sigma } => sigma,
        NoiseSpec::TargetEvm { evm } => {
            let rms = ((x.mean_power() + y.mean_power()) / 2.0).sqrt();
            evm * rms
        }
    };
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma / 2f64.sqrt()).expect("finite sigma");
        for s in x.samples.iter_mut().chain(y.samples.iter_mut()) {
            *s += Complex64::new(normal.sample(rng), normal.sample(rng));
        }
    }
    DualPolWaveform::new(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigkit::Waveform;
    use crate::txchain::{transmit, TxConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn transparent() -> ChannelConfig {
        ChannelConfig {
            attenuation: 0.0,
            ..ChannelConfig::default()
        }
    }

    fn random_dual(seed: u64, n: usize) -> DualPolWaveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = || {
            let s = (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            Waveform::new(s, 80e9).unwrap()
        };
        DualPolWaveform::new(w(), w()).unwrap()
    }

    #[test]
    fn zero_length_is_unit_transfer() {
        let grid = fft_frequencies(64, 1e11);
        for h in cd_transfer(&grid, 17.0, 1550.0, 0.0) {
            assert_eq!(h, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn cd_phase_closed_form() {
        let f = 5e9;
        let h = cd_transfer(&[f], 17.0, 1550.0, 10.0)[0];
        // π · 17e-6 s/m² · (1.55e-6 m)² · 1e4 m · f² / c
        let expected = PI * 17e-6 * 1.55e-6 * 1.55e-6 * 1e4 * f * f / 299_792_458.0;
        assert!((h.arg() - expected).abs() < 1e-9);
        assert!((h.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cd_group_delay_spread_over_10ghz() {
        // τ(f) = (1/2π) dφ/df, by central differences at the band edges.
        let phase = |f: f64| cd_transfer(&[f], 17.0, 1550.0, 10.0)[0].arg();
        let df = 1e6;
        let tau = |f: f64| (phase(f + df) - phase(f - df)) / (2.0 * df) / (2.0 * PI);
        let spread = tau(5e9) - tau(-5e9);
        let analytic = 17e-6 * 1.55e-6 * 1.55e-6 * 1e4 * 10e9 / 299_792_458.0;
        assert!((spread - analytic).abs() / analytic < 1e-4);
        assert!((spread - 13.6e-12).abs() < 0.1e-12);
    }

    #[test]
    fn jones_special_cases() {
        let id = jones_rotation(0.0, 0.0, 0.0);
        assert_eq!(id, JonesMatrix::identity());
        let swap = jones_rotation(PI / 2.0, 0.0, 0.0);
        let (a, b) = swap.apply(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0));
        assert!(a.norm() < 1e-15 && (b.norm() - 1.0).abs() < 1e-15);
        let (a, b) = swap.apply(Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0));
        assert!((a.norm() - 1.0).abs() < 1e-15 && b.norm() < 1e-15);
    }

    #[test]
    fn transparent_channel_is_identity() {
        let sig = random_dual(1, 512);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = apply_channel(&sig, &transparent(), &mut rng).unwrap();
        for (a, b) in sig.x.samples.iter().zip(&out.x.samples) {
            assert!((a - b).norm() < 1e-9);
        }
        for (a, b) in sig.y.samples.iter().zip(&out.y.samples) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn noise_hits_target_evm() {
        let tx = transmit(
            &TxConfig {
                decorrelation_delay: 0.0,
                ..TxConfig::default()
            },
            1 << 14,
            4,
        )
        .unwrap();
        let cfg = ChannelConfig {
            noise: NoiseSpec::TargetEvm { evm: 0.30 },
            ..transparent()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = apply_channel(&tx.signal, &cfg, &mut rng).unwrap();
        let err: f64 = (0..tx.frame.len())
            .map(|k| (out.x.samples[k * 4 + 2] - tx.frame.x_syms[k]).norm_sqr())
            .sum();
        let evm = (err / tx.frame.len() as f64).sqrt() / tx.frame.amplitude;
        assert!((evm - 0.30).abs() < 0.01, "evm {evm}");
    }

    #[test]
    fn fixed_seed_reproduces_noise() {
        let sig = random_dual(2, 256);
        let cfg = ChannelConfig {
            noise: NoiseSpec::Sigma { sigma: 0.1 },
            ..transparent()
        };
        let a = apply_channel(&sig, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = apply_channel(&sig, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = apply_channel(&sig, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_rejected() {
        let sig = random_dual(3, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = ChannelConfig {
            length_km: -1.0,
            ..transparent()
        };
        assert!(matches!(
            apply_channel(&sig, &bad, &mut rng),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn jones_is_unitary(theta in -10.0f64..10.0, phi in -10.0f64..10.0, psi in -10.0f64..10.0) {
            let j = jones_rotation(theta, phi, psi);
            prop_assert!(j.unitarity_error() < 1e-12);
        }

        #[test]
        fn cd_is_all_pass(z in 0.0f64..80.0, d in -20.0f64..20.0, seed in any::<u64>()) {
            let sig = random_dual(seed, 300);
            let grid = fft_frequencies(300, sig.sample_rate());
            let h = cd_transfer(&grid, d, 1550.0, z);
            let out = freq_domain_filter(&sig.x, &h, 0).unwrap();
            prop_assert!((out.energy() - sig.x.energy()).abs() / sig.x.energy() < 1e-9);
        }

        #[test]
        fn unitary_channel_preserves_instantaneous_power(
            theta in -4.0f64..4.0, phi in -4.0f64..4.0, psi in -4.0f64..4.0, seed in any::<u64>()
        ) {
            let sig = random_dual(seed, 200);
            let cfg = ChannelConfig { jones_angles: [theta, phi, psi], ..transparent() };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = apply_channel(&sig, &cfg, &mut rng).unwrap();
            for (p, q) in sig.total_power().iter().zip(out.total_power()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn dispersive_unitary_channel_conserves_energy(
            z in 0.0f64..20.0, dgd in 0.0f64..30e-12, theta in -4.0f64..4.0, seed in any::<u64>()
        ) {
            let sig = random_dual(seed, 256);
            let cfg = ChannelConfig {
                length_km: z, dgd, jones_angles: [theta, 0.3, -0.2], ..transparent()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = apply_channel(&sig, &cfg, &mut rng).unwrap();
            prop_assert!((out.energy() - sig.energy()).abs() / sig.energy() < 1e-9);
        }
    }
}
