//! Scaled forward model with signal-dependent Gaussian measurement noise.
//!
//! A view is simulated as `y_j = (μ·p)·A_j(x/1000) + w_j` where `x` is in
//! modified Hounsfield units and `w_j ~ N(0, diag(exp(ℓ)/λ₀))`, with `ℓ` the
//! noiseless scaled line integral.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{radon_single_view, Image, Projection, Sinogram, Unit, ViewGeometry};

/// HU per water unit.
pub const HU_PER_WATER: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConstants {
    /// Water X-ray attenuation, cm⁻¹.
    #[serde(rename = "mu_per_cm", default = "default_mu")]
    pub mu: f64,
    /// Pixel pitch, cm.
    #[serde(rename = "pitch_cm", default = "default_pitch")]
    pub pitch: f64,
    /// Empty-scan photon count.
    #[serde(default = "default_lambda0")]
    pub lambda0: f64,
}

fn default_mu() -> f64 {
    0.17
}
fn default_pitch() -> f64 {
    0.186
}
fn default_lambda0() -> f64 {
    1600.0
}

impl Default for PhysicsConstants {
    fn default() -> Self {
        PhysicsConstants {
            mu: default_mu(),
            pitch: default_pitch(),
            lambda0: default_lambda0(),
        }
    }
}

impl PhysicsConstants {
    pub fn new(mu: f64, pitch: f64, lambda0: f64) -> Result<Self> {
        let c = PhysicsConstants { mu, pitch, lambda0 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu", self.mu), ("pitch", self.pitch), ("lambda0", self.lambda0)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid!("{name} must be positive and finite, got {v}"));
            }
        }
        Ok(())
    }

    /// `μ·p`: converts a pixel-length line integral of a water-unit image
    /// into dimensionless attenuation.
    pub fn scale(&self) -> f64 {
        self.mu * self.pitch
    }
}

/// Noise switch and seed. The stream for detector `k` of view `j` depends
/// only on `(seed, j, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub enabled: bool,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn off() -> Self {
        NoiseSpec {
            enabled: false,
            seed: 0,
        }
    }

    pub fn seeded(seed: u64) -> Self {
        NoiseSpec {
            enabled: true,
            seed,
        }
    }
}

pub fn scale_to_water_units(image: &Image) -> Result<Image> {
    if image.unit() != Unit::Hu {
        return Err(invalid!("expected an HU image, got {:?}", image.unit()));
    }
    Ok(image.map(|v| v / HU_PER_WATER).retag(Unit::Water))
}

/// `(μp)·A_j(x/1000)`.
pub fn noiseless_projection(
    image: &Image,
    geom: &ViewGeometry,
    phys: &PhysicsConstants,
    j: usize,
) -> Result<Projection> {
    let water = scale_to_water_units(image)?;
    let mut p = radon_single_view(&water, geom, j)?;
    let s = phys.scale();
    p.values.iter_mut().for_each(|v| *v *= s);
    Ok(p)
}

/// Measurement variance `exp(ℓ)/λ₀` for scaled line integral `ℓ`.
pub fn noise_variance(line_integral: f64, phys: &PhysicsConstants) -> f64 {
    line_integral.exp() / phys.lambda0
}

/// Standard normal draw for one (seed, view, detector) cell. Each cell owns
/// two 64-bit words of a ChaCha8 stream, consumed by a Box-Muller transform.
pub fn standard_normal_at(seed: u64, view: usize, detector: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(view as u64);
    rng.set_word_pos(4 * detector as u128);
    // 53-bit uniforms; u1 in (0, 1] keeps the log finite.
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64;
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Adds independent Gaussian noise to a noiseless sinogram in place.
pub fn add_noise(sino: &mut Sinogram, phys: &PhysicsConstants, noise: NoiseSpec) {
    if !noise.enabled {
        return;
    }
    for col in sino.columns_mut() {
        let j = col.view_index;
        for (k, v) in col.values.iter_mut().enumerate() {
            let sd = noise_variance(*v, phys).sqrt();
            *v += sd * standard_normal_at(noise.seed, j, k);
        }
    }
}

pub fn simulate_sinogram(
    image: &Image,
    geom: &ViewGeometry,
    phys: &PhysicsConstants,
    noise: NoiseSpec,
) -> Result<Sinogram> {
    let columns = (0..geom.n_views())
        .map(|j| noiseless_projection(image, geom, phys, j))
        .collect::<Result<Vec<_>>>()?;
    let mut sino = Sinogram::new(columns)?;
    add_noise(&mut sino, phys, noise);
    Ok(sino)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hu_scaling() {
        let img = Image::from_vec(2, vec![0.0, 1000.0, 2000.0, -1000.0], Unit::Hu).unwrap();
        let w = scale_to_water_units(&img).unwrap();
        assert_eq!(w.data(), &[0.0, 1.0, 2.0, -1.0]);
        assert_eq!(w.unit(), Unit::Water);
        assert!(scale_to_water_units(&w).is_err());
    }

    #[test]
    fn variance_values() {
        let phys = PhysicsConstants::default();
        assert_eq!(noise_variance(0.0, &phys), 1.0 / 1600.0);
        assert!((noise_variance(0.6324, &phys) - 1.177e-3).abs() < 1e-6);
        let doubled = PhysicsConstants {
            lambda0: 3200.0,
            ..phys
        };
        assert_eq!(
            noise_variance(0.4, &doubled),
            noise_variance(0.4, &phys) / 2.0
        );
    }

    #[test]
    fn constants_are_validated() {
        assert!(PhysicsConstants::new(0.0, 0.186, 1600.0).is_err());
        assert!(PhysicsConstants::new(0.17, -1.0, 1600.0).is_err());
        assert!(PhysicsConstants::new(0.17, 0.186, f64::NAN).is_err());
        assert!(PhysicsConstants::new(0.17, 0.186, 1600.0).is_ok());
    }

    #[test]
    fn doubling_mu_doubles_projection() {
        let g = ViewGeometry::new(16, 3).unwrap();
        let img = Image::from_fn(16, Unit::Hu, |r, c| ((r * 7 + c * 3) % 11) as f64 * 100.0);
        let phys = PhysicsConstants::default();
        let twice = PhysicsConstants {
            mu: 2.0 * phys.mu,
            ..phys
        };
        for j in 0..3 {
            let a = noiseless_projection(&img, &g, &phys, j).unwrap();
            let b = noiseless_projection(&img, &g, &twice, j).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn noise_is_deterministic_and_order_free() {
        let g = ViewGeometry::new(16, 4).unwrap();
        let img = Image::from_fn(16, Unit::Hu, |_, _| 500.0);
        let phys = PhysicsConstants::default();
        let a = simulate_sinogram(&img, &g, &phys, NoiseSpec::seeded(42)).unwrap();
        let b = simulate_sinogram(&img, &g, &phys, NoiseSpec::seeded(42)).unwrap();
        assert_eq!(a, b);
        let c = simulate_sinogram(&img, &g, &phys, NoiseSpec::seeded(43)).unwrap();
        assert_ne!(a, c);
        let z = standard_normal_at(42, 2, 5);
        let clean = noiseless_projection(&img, &g, &phys, 2).unwrap().values[5];
        let expected = clean + noise_variance(clean, &phys).sqrt() * z;
        assert_eq!(a.columns()[2].values[5], expected);
    }

    #[test]
    fn noise_disabled_is_noiseless() {
        let g = ViewGeometry::new(16, 2).unwrap();
        let img = Image::from_fn(16, Unit::Hu, |r, _| r as f64 * 10.0);
        let phys = PhysicsConstants::default();
        let s = simulate_sinogram(&img, &g, &phys, NoiseSpec::off()).unwrap();
        for j in 0..2 {
            assert_eq!(
                s.columns()[j],
                noiseless_projection(&img, &g, &phys, j).unwrap()
            );
        }
    }

    #[test]
    fn constants_json_keys() {
        let phys: PhysicsConstants =
            serde_json::from_str(r#"{"mu_per_cm": 0.159, "pitch_cm": 0.186, "lambda0": 1600}"#)
                .unwrap();
        assert_eq!(phys.mu, 0.159);
        assert!(serde_json::from_str::<PhysicsConstants>(r#"{"mu": 1.0}"#).is_err());
    }
}
