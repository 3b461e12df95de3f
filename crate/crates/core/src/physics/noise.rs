//! Low-dose sinogram simulation: Poisson photon statistics plus Gaussian
//! electronic noise, followed by the log transform.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::Sinogram;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Counts below this floor are clamped before taking the log.
pub const COUNT_FLOOR: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Normal-dose incident photons per detector bin.
    pub i0: f64,
    /// Fraction of `i0` delivered in the low-dose scan.
    pub dose_fraction: f64,
    /// Variance of the additive electronic noise, in counts².
    pub elec_var: f64,
    /// Physical attenuation per unit image value per pixel length. Sinogram
    /// samples are multiplied by this before Beer-Lambert and divided by it after
    /// the log transform, so the output stays in the units of `H`.
    pub atten_scale: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { i0: 1e5, dose_fraction: 0.2, elec_var: 8.2, atten_scale: 0.02, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.i0 > 0.0 && self.i0.is_finite()) {
            return Err(Error::InvalidArgument(format!("i0 must be positive, got {}", self.i0)));
        }
        if !(self.dose_fraction > 0.0 && self.dose_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("dose_fraction must be in (0, 1], got {}", self.dose_fraction)));
        }
        if !(self.elec_var >= 0.0 && self.elec_var.is_finite()) {
            return Err(Error::InvalidArgument(format!("elec_var must be non-negative, got {}", self.elec_var)));
        }
        if !(self.atten_scale > 0.0 && self.atten_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("atten_scale must be positive, got {}", self.atten_scale)));
        }
        Ok(())
    }

    /// Expected low-dose photon count behind a line integral `y`.
    pub fn expected_counts(&self, y: f64) -> f64 {
        self.dose_fraction * self.i0 * (-y * self.atten_scale).exp()
    }
}

/// One detector reading: `Poisson(λ) + N(0, elec_std²)`.
pub fn draw_counts<R: Rng + ?Sized>(lambda: f64, elec_std: f64, rng: &mut R) -> f64 {
    let quantum = if lambda > 0.0 {
        Poisson::new(lambda).map(|p| p.sample(rng)).unwrap_or(lambda)
    } else {
        0.0
    };
    let electronic = if elec_std > 0.0 {
        Normal::new(0.0, elec_std).expect("finite std").sample(rng)
    } else {
        0.0
    };
    quantum + electronic
}

/// Simulate a low-dose measurement of `clean`. Deterministic for a fixed seed.
pub fn simulate_ldct(clean: &Sinogram, cfg: &NoiseConfig) -> Result<Sinogram> {
    cfg.validate()?;
    if let Some(v) = clean.samples().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("clean sinogram samples must be non-negative, found {v}")));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let blank = cfg.dose_fraction * cfg.i0;
    let elec_std = cfg.elec_var.sqrt();
    let samples = clean
        .samples()
        .iter()
        .map(|&y| {
            let counts = draw_counts(cfg.expected_counts(y), elec_std, &mut rng);
            -(counts.max(COUNT_FLOOR) / blank).ln() / cfg.atten_scale
        })
        .collect();
    Sinogram::new(clean.n_views(), clean.n_dets(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_sino() -> Sinogram {
        Sinogram::new(3, 4, (0..12).map(|i| i as f64 * 2.5).collect()).unwrap()
    }

    #[test]
    fn noiseless_limit_recovers_clean() {
        let cfg = NoiseConfig { i0: 1e12, dose_fraction: 1.0, elec_var: 0.0, ..NoiseConfig::default() };
        let clean = ramp_sino();
        let noisy = simulate_ldct(&clean, &cfg).unwrap();
        for (a, b) in clean.samples().iter().zip(noisy.samples()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let cfg = NoiseConfig { seed: 99, ..NoiseConfig::default() };
        let a = simulate_ldct(&ramp_sino(), &cfg).unwrap();
        let b = simulate_ldct(&ramp_sino(), &cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate_ldct(&ramp_sino(), &NoiseConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        let s = ramp_sino();
        for cfg in [
            NoiseConfig { i0: 0.0, ..NoiseConfig::default() },
            NoiseConfig { i0: -5.0, ..NoiseConfig::default() },
            NoiseConfig { dose_fraction: 0.0, ..NoiseConfig::default() },
            NoiseConfig { dose_fraction: 1.5, ..NoiseConfig::default() },
            NoiseConfig { elec_var: -1.0, ..NoiseConfig::default() },
        ] {
            assert!(simulate_ldct(&s, &cfg).is_err());
        }
        let neg = Sinogram::new(1, 2, vec![1.0, -0.5]).unwrap();
        assert!(simulate_ldct(&neg, &NoiseConfig::default()).is_err());
    }

    #[test]
    fn counts_floor_bounds_output() {
        // A huge line integral drives λ to ~0; the floor keeps the log finite.
        let clean = Sinogram::new(1, 1, vec![1e6]).unwrap();
        let cfg = NoiseConfig { elec_var: 0.0, ..NoiseConfig::default() };
        let y = simulate_ldct(&clean, &cfg).unwrap().samples()[0];
        let cap = (cfg.dose_fraction * cfg.i0).ln() / cfg.atten_scale;
        assert!((y - cap).abs() < 1e-9);
    }

    #[test]
    fn low_dose_settings_accepted() {
        let cfg = NoiseConfig { dose_fraction: 0.2, elec_var: 8.2, ..NoiseConfig::default() };
        assert!(cfg.validate().is_ok());
    }
}
