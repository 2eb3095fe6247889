//! SIMO LFM echo synthesis with geometry-consistent delay, Doppler, amplitude and steering.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ComplexTensor, Tensor};

pub const SPEED_OF_LIGHT: f64 = 3e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarConfig {
    pub f_c: f64,
    pub t_r: f64,
    pub f_s: f64,
    pub k_t: f64,
    pub n_y: usize,
    pub n_z: usize,
    /// Range from which per-record echo SNR is drawn, in dB.
    pub snr_db_range: [f64; 2],
    pub occlusion_db: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        RadarConfig {
            f_c: 10e9,
            t_r: 1e-6,
            f_s: 60e6,
            k_t: 3e13,
            n_y: 4,
            n_z: 4,
            snr_db_range: [0.0, 25.0],
            occlusion_db: 20.0,
        }
    }
}

impl RadarConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("radar: {m}")));
        if !(self.f_c > 0.0) {
            return bad("f_c must be positive");
        }
        if !(self.t_r > 0.0 && self.f_s > 0.0) || self.num_samples() < 8 {
            return bad("f_s * t_r must give at least 8 samples");
        }
        if self.n_y == 0 || self.n_z == 0 {
            return bad("n_y and n_z must be at least 1");
        }
        if !(self.snr_db_range[0] <= self.snr_db_range[1]) {
            return bad("snr_db_range must be ordered");
        }
        Ok(())
    }

    /// `floor(F_s * T_r)` fast-time samples.
    pub fn num_samples(&self) -> usize {
        (self.f_s * self.t_r + 1e-9).floor() as usize
    }

    pub fn num_antennas(&self) -> usize {
        self.n_y * self.n_z
    }
}

pub fn wavelength(config: &RadarConfig) -> f64 {
    SPEED_OF_LIGHT / config.f_c
}

pub fn delay(d: f64) -> f64 {
    2.0 * d / SPEED_OF_LIGHT
}

pub fn doppler(config: &RadarConfig, v: f64) -> f64 {
    2.0 * config.f_c * v / SPEED_OF_LIGHT
}

/// `λ ε / ((4π)^{3/2} d²)`
pub fn amplitude(lambda: f64, rcs: f64, d: f64) -> f64 {
    lambda * rcs / ((4.0 * PI).powf(1.5) * d * d)
}

/// Kronecker product of the two uniform-array phase vectors; entry `p * n_y + q`
/// has phase `−π (p sin θ + q sin φ cos θ)`.
pub fn steering_vector(theta: f64, phi: f64, n_z: usize, n_y: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(n_z * n_y);
    for p in 0..n_z {
        for q in 0..n_y {
            let phase = -PI * (p as f64 * theta.sin() + q as f64 * phi.sin() * theta.cos());
            out.push(Complex64::from_polar(1.0, phase));
        }
    }
    out
}

fn cis_cycles(cycles: f64) -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI * cycles.rem_euclid(1.0))
}

/// Geometry and target parameters of one echo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoParams {
    pub distance: f64,
    pub radial_velocity: f64,
    pub pitch: f64,
    pub azimuth: f64,
    pub rcs: f64,
    pub occluded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EchoMeta {
    pub device: usize,
    pub target: usize,
    pub frame: usize,
}

/// Complex echo `[antennas, samples]` with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoTensor {
    pub values: ComplexTensor<f64>,
    pub meta: EchoMeta,
}

/// Noiseless echo followed by complex AWGN at `snr_db` (skipped when `None`).
pub fn echo(config: &RadarConfig, p: &EchoParams, snr_db: Option<f64>, rng: &mut impl Rng) -> Result<ComplexTensor<f64>> {
    if !(p.distance > 0.0) {
        return Err(Error::Domain(format!("echo distance must be positive, got {}", p.distance)));
    }
    let tau = delay(p.distance);
    if tau >= config.t_r {
        return Err(Error::Domain(format!(
            "echo outside window: delay {tau:.3e} s >= T_r {:.3e} s",
            config.t_r
        )));
    }
    let mut amp = amplitude(wavelength(config), p.rcs, p.distance);
    if p.occluded {
        amp *= 10f64.powf(-config.occlusion_db / 20.0);
    }
    let mu = doppler(config, p.radial_velocity);
    let steer = steering_vector(p.pitch, p.azimuth, config.n_z, config.n_y);
    let m = config.num_samples();
    let temporal: Vec<Complex64> = (0..m)
        .map(|i| {
            let t = i as f64 / config.f_s;
            let s = t - tau;
            amp * cis_cycles(mu * t) * cis_cycles(config.f_c * s + 0.5 * config.k_t * s * s)
        })
        .collect();
    let a = steer.len();
    let mut re = Vec::with_capacity(a * m);
    let mut im = Vec::with_capacity(a * m);
    for sv in &steer {
        for tv in &temporal {
            let z = sv * tv;
            re.push(z.re);
            im.push(z.im);
        }
    }
    if let Some(snr) = snr_db {
        let power = amp * amp;
        let sigma = (power * 10f64.powf(-snr / 10.0) / 2.0).sqrt();
        for (r, i) in re.iter_mut().zip(im.iter_mut()) {
            let nr: f64 = StandardNormal.sample(rng);
            let ni: f64 = StandardNormal.sample(rng);
            *r += sigma * nr;
            *i += sigma * ni;
        }
    }
    ComplexTensor::new(Tensor::new(vec![a, m], re)?, Tensor::new(vec![a, m], im)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> EchoParams {
        EchoParams {
            distance: 60.0,
            radial_velocity: 4.0,
            pitch: 0.3,
            azimuth: -1.1,
            rcs: 10.0,
            occluded: false,
        }
    }

    #[test]
    fn scalar_formulas() {
        let mut c = RadarConfig::default();
        assert!((wavelength(&c) - 0.03).abs() < 1e-15);
        c.f_c = 3e8;
        assert_eq!(wavelength(&c), 1.0);
        c.f_c = 24e9;
        assert!((wavelength(&c) - 0.0125).abs() < 1e-15);
        assert!((delay(150.0) - 1e-6).abs() < 1e-18);
        assert!((doppler(&RadarConfig::default(), 15.0) - 1000.0).abs() < 1e-9);
        let oracle = 0.03 * 100.0 / ((4.0 * PI) * (4.0 * PI).sqrt() * 1e4);
        assert!((amplitude(0.03, 100.0, 100.0) - oracle).abs() < 1e-18);
        assert!((amplitude(0.03, 100.0, 100.0) - 6.73e-6).abs() < 1e-8);
    }

    #[test]
    fn default_shape_is_16_by_60() {
        let c = RadarConfig::default();
        assert_eq!(c.num_samples(), 60);
        let e = echo(&c, &params(), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(e.shape(), &[16, 60]);
    }

    #[test]
    fn steering_half_pi_pitch() {
        let s = steering_vector(PI / 2.0, 0.7, 2, 2);
        let expect = [1.0, 1.0, -1.0, -1.0];
        for (z, e) in s.iter().zip(expect) {
            assert!((z.re - e).abs() < 1e-12 && z.im.abs() < 1e-12);
        }
    }

    #[test]
    fn domain_errors() {
        let c = RadarConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = params();
        p.distance = 0.0;
        assert!(echo(&c, &p, None, &mut rng).is_err());
        p.distance = 150.0;
        assert!(echo(&c, &p, None, &mut rng).is_err());
    }

    #[test]
    fn occlusion_attenuates_by_20_db() {
        let c = RadarConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = echo(&c, &params(), None, &mut rng).unwrap();
        let b = echo(&c, &EchoParams { occluded: true, ..params() }, None, &mut rng).unwrap();
        for (x, y) in a.re.data().iter().zip(b.re.data()) {
            assert!((x * 0.1 - y).abs() < 1e-18);
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let c = RadarConfig::default();
        let a = echo(&c, &params(), Some(5.0), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = echo(&c, &params(), Some(5.0), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
