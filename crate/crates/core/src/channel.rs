//! Semantic transmission channel: I/Q modulation with unit power, AWGN,
//! rate and delay accounting, and the natural-language channel context.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bits carried per complex symbol: float32 I and Q.
pub const BITS_PER_SYMBOL: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub bandwidth_hz: f64,
    pub power_w: f64,
    /// Channel gain `H`; AWGN only, so 1 by default.
    pub gain: f64,
    pub snr_db_range: [f64; 2],
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            bandwidth_hz: 1000.0,
            power_w: 1.0,
            gain: 1.0,
            snr_db_range: [0.0, 25.0],
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0 && self.power_w > 0.0 && self.gain > 0.0) {
            return Err(Error::Config("channel: bandwidth_hz, power_w and gain must be positive".into()));
        }
        if !(self.snr_db_range[0] <= self.snr_db_range[1]) || !self.snr_db_range.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("channel: snr_db_range must be an ordered finite pair".into()));
        }
        Ok(())
    }

    /// Noise power for a given SNR at the configured transmit power and gain.
    pub fn noise_power(&self, snr_db: f64) -> f64 {
        self.power_w * self.gain / 10f64.powf(snr_db / 10.0)
    }
}

/// Link condition for one transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Link {
    Lossless,
    Awgn { snr_db: f64 },
}

/// Pairs consecutive float32 code values into I/Q symbols and scales them to unit mean power.
/// Returns the symbols and the scale needed to undo the normalisation.
pub fn modulate(e: &[f32]) -> Result<(Vec<Complex64>, f64)> {
    if e.len() % 2 != 0 {
        return Err(Error::Domain(format!("modulate needs an even number of values, got {}", e.len())));
    }
    let wide: Vec<f64> = e.iter().map(|&v| v as f64).collect();
    let scale = modulation_scale(&wide);
    let c = wide.chunks_exact(2).map(|p| Complex64::new(p[0] / scale, p[1] / scale)).collect();
    Ok((c, scale))
}

/// `sqrt(mean |c|²)` over the I/Q pairs of `e`; 1 for an all-zero or empty code.
pub fn modulation_scale(e: &[f64]) -> f64 {
    let symbols = e.len() / 2;
    if symbols == 0 {
        return 1.0;
    }
    let p = e.iter().map(|v| v * v).sum::<f64>() / symbols as f64;
    if p > 0.0 {
        p.sqrt()
    } else {
        1.0
    }
}

/// Undoes [`modulate`]; exact on noiseless symbols because the float64 round trip
/// stays well inside half a float32 ulp.
pub fn demodulate(c: &[Complex64], scale: f64) -> Vec<f32> {
    c.iter().flat_map(|z| [(z.re * scale) as f32, (z.im * scale) as f32]).collect()
}

/// Complex AWGN with per-component variance `10^(−snr/10) / 2`.
pub fn awgn(n: usize, snr_db: f64, rng: &mut impl Rng) -> Vec<Complex64> {
    let sigma = (10f64.powf(-snr_db / 10.0) / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            Complex64::new(sigma * a, sigma * b)
        })
        .collect()
}

/// `y = H c + n` with `H = 1`.
pub fn transmit(c: &[Complex64], link: Link, rng: &mut impl Rng) -> Result<Vec<Complex64>> {
    match link {
        Link::Lossless => Ok(c.to_vec()),
        Link::Awgn { snr_db } => {
            if !snr_db.is_finite() {
                return Err(Error::Domain(format!("snr must be finite, got {snr_db}")));
            }
            let n = awgn(c.len(), snr_db, rng);
            Ok(c.iter().zip(n).map(|(a, b)| a + b).collect())
        }
    }
}

/// Additive perturbation, in code units, equivalent to
/// `demodulate(transmit(modulate(e))) − e`. Zero for the lossless link.
pub fn code_noise(e: &[f64], link: Link, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if e.len() % 2 != 0 {
        return Err(Error::Domain(format!("modulate needs an even number of values, got {}", e.len())));
    }
    match link {
        Link::Lossless => Ok(vec![0.0; e.len()]),
        Link::Awgn { snr_db } => {
            if !snr_db.is_finite() {
                return Err(Error::Domain(format!("snr must be finite, got {snr_db}")));
            }
            let scale = modulation_scale(e);
            Ok(awgn(e.len() / 2, snr_db, rng).iter().flat_map(|z| [z.re * scale, z.im * scale]).collect())
        }
    }
}

/// `B log₂(1 + P H / N₀)` in bits per second.
pub fn rate(config: &ChannelConfig, h: f64, n0: f64) -> f64 {
    config.bandwidth_hz * (1.0 + config.power_w * h / n0).log2()
}

/// `Z / V` seconds.
pub fn delay(payload_bits: f64, rate_bps: f64) -> Result<f64> {
    if !(rate_bps > 0.0) {
        return Err(Error::Domain(format!("rate must be positive, got {rate_bps}")));
    }
    Ok(payload_bits / rate_bps)
}

pub fn payload_bits(num_symbols: usize) -> usize {
    num_symbols * BITS_PER_SYMBOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelContext {
    pub snr_db: f64,
    pub distance_m: f64,
    pub text: String,
}

pub fn render_context(snr_db: f64, distance_m: f64) -> ChannelContext {
    ChannelContext {
        snr_db,
        distance_m,
        text: format!("the snr is {snr_db:.1} db and the distance is {distance_m:.1} m"),
    }
}

/// Inverse of [`render_context`] on template strings.
pub fn parse_context(text: &str) -> Result<(f64, f64)> {
    let bad = || Error::Domain(format!("not a channel context: `{text}`"));
    let w: Vec<&str> = text.split_whitespace().collect();
    if w.len() != 11 || w[..3] != ["the", "snr", "is"] || w[4..9] != ["db", "and", "the", "distance", "is"] || w[10] != "m" {
        return Err(bad());
    }
    let snr = w[3].parse().map_err(|_| bad())?;
    let dist = w[9].parse().map_err(|_| bad())?;
    Ok((snr, dist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn modulate_unit_pair() {
        let (c, s) = modulate(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(c, vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)]);
        assert!(modulate(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn rate_and_delay() {
        let c = ChannelConfig::default();
        assert_eq!(rate(&c, 1.0, 1.0), 1000.0);
        assert_eq!(rate(&c, 3.0, 1.0), 2000.0);
        let z = ChannelConfig {
            bandwidth_hz: 0.0,
            ..c
        };
        assert_eq!(rate(&z, 1.0, 1.0), 0.0);
        assert_eq!(delay(8000.0, 1000.0).unwrap(), 8.0);
        assert_eq!(delay(0.0, 1000.0).unwrap(), 0.0);
        assert!(delay(1.0, 0.0).is_err());
        assert_eq!(payload_bits(512), 32768);
    }

    #[test]
    fn context_template() {
        assert_eq!(render_context(5.0, 50.0).text, "the snr is 5.0 db and the distance is 50.0 m");
        assert_eq!(render_context(0.0, 141.4).text, "the snr is 0.0 db and the distance is 141.4 m");
        assert_eq!(parse_context(&render_context(5.0, 50.0).text).unwrap(), (5.0, 50.0));
        assert!(parse_context("hello").is_err());
    }

    #[test]
    fn lossless_transmit_is_identity() {
        let (c, _) = modulate(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        let y = transmit(&c, Link::Lossless, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(y, c);
    }
}
