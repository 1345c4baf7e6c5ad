//! Seeded synthetic baggage-like phantoms in HU.
//!
//! A phantom is an air background, an optional thin high-density container
//! outline and a random number of uniform ellipses and rotated rectangles.
//! Later shapes overwrite earlier ones. Everything lies inside the inscribed
//! circle of the grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Image, Unit};

pub const MIN_HU: f64 = -1000.0;
pub const MAX_HU: f64 = 3000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub n_pixels: usize,
    /// Inclusive `[min, max]` object count.
    pub n_objects: [usize; 2],
    /// Object densities are drawn uniformly from this HU interval.
    pub density_range_hu: [f64; 2],
    pub container: bool,
    pub container_hu: f64,
    /// Sub-samples per pixel side used for area-weighted rasterization.
    pub supersample: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_pixels: 64,
            n_objects: [3, 8],
            density_range_hu: [-200.0, 2200.0],
            container: true,
            container_hu: 2400.0,
            supersample: 2,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pixels < 4 {
            return Err(invalid!("phantom side {} is too small", self.n_pixels));
        }
        if self.n_objects[0] > self.n_objects[1] {
            return Err(invalid!(
                "object count range [{}, {}] is empty",
                self.n_objects[0],
                self.n_objects[1]
            ));
        }
        let [lo, hi] = self.density_range_hu;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(invalid!("density range [{lo}, {hi}] is empty"));
        }
        if self.supersample == 0 {
            return Err(invalid!("supersample must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        cos: f64,
        sin: f64,
    },
    Rect {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        cos: f64,
        sin: f64,
    },
    Frame {
        hw: f64,
        hh: f64,
        thickness: f64,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse {
                cx,
                cy,
                a,
                b,
                cos,
                sin,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Rect {
                cx,
                cy,
                hw,
                hh,
                cos,
                sin,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Frame { hw, hh, thickness } => {
                let inside_outer = x.abs() <= hw && y.abs() <= hh;
                let inside_inner = x.abs() < hw - thickness && y.abs() < hh - thickness;
                inside_outer && !inside_inner
            }
        }
    }
}

fn rasterize(n: usize, supersample: usize, shapes: &[(Shape, f64)]) -> Image {
    let center = (n as f64 - 1.0) / 2.0;
    let ss = supersample as f64;
    let norm = 1.0 / (ss * ss);
    Image::from_fn(n, Unit::Hu, |r, c| {
        let mut acc = 0.0;
        for sr in 0..supersample {
            for sc in 0..supersample {
                let x = c as f64 - center - 0.5 + (sc as f64 + 0.5) / ss;
                let y = r as f64 - center - 0.5 + (sr as f64 + 0.5) / ss;
                let value = shapes
                    .iter()
                    .rev()
                    .find(|(s, _)| s.contains(x, y))
                    .map_or(0.0, |&(_, v)| v);
                acc += value;
            }
        }
        acc * norm
    })
}

/// Centered disk of `radius` pixels, area-weighted with `supersample²`
/// samples per pixel.
pub fn disk(n: usize, radius: f64, value: f64, unit: Unit, supersample: usize) -> Image {
    let shape = Shape::Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: radius,
        b: radius,
        cos: 1.0,
        sin: 0.0,
    };
    rasterize(n, supersample.max(1), &[(shape, value)]).retag(unit)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Image> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let radius = spec.n_pixels as f64 / 2.0 - 1.0;
    let clamp = |v: f64| v.clamp(MIN_HU, MAX_HU);
    let mut shapes = Vec::new();

    // Region that object bounding circles must stay inside: either the
    // container interior or the inscribed circle.
    let mut interior = None;
    if spec.container {
        let angle = rng.random_range(0.25..0.65) * std::f64::consts::FRAC_PI_2;
        let diag = radius * rng.random_range(0.85..0.98);
        let (hw, hh) = (diag * angle.cos(), diag * angle.sin());
        let thickness = (spec.n_pixels as f64 / 64.0).max(1.0);
        shapes.push((Shape::Frame { hw, hh, thickness }, clamp(spec.container_hu)));
        interior = Some((hw - thickness, hh - thickness));
    }

    let count = rng.random_range(spec.n_objects[0]..=spec.n_objects[1]);
    let [lo, hi] = spec.density_range_hu;
    for _ in 0..count {
        let (bound, cx, cy) = match interior {
            Some((iw, ih)) => {
                let bound = iw.min(ih) * rng.random_range(0.1..0.45);
                let cx = rng.random_range(-(iw - bound)..=(iw - bound));
                let cy = rng.random_range(-(ih - bound)..=(ih - bound));
                (bound, cx, cy)
            }
            None => {
                let bound = radius * rng.random_range(0.05..0.35);
                let rho = (radius - bound) * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                (bound, rho * phi.cos(), rho * phi.sin())
            }
        };
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        let density = clamp(if lo == hi { lo } else { rng.random_range(lo..hi) });
        let shape = if rng.random_bool(0.6) {
            Shape::Ellipse {
                cx,
                cy,
                a: bound,
                b: bound * rng.random_range(0.3..1.0),
                cos,
                sin,
            }
        } else {
            // Half-diagonal equals the bounding radius.
            let phi = rng.random_range(0.2..1.37f64);
            Shape::Rect {
                cx,
                cy,
                hw: bound * phi.cos(),
                hh: bound * phi.sin(),
                cos,
                sin,
            }
        };
        shapes.push((shape, density));
    }
    Ok(rasterize(spec.n_pixels, spec.supersample, &shapes))
}

/// One phantom with the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub seed: u64,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Phantom>,
    pub test: Vec<Phantom>,
}

/// splitmix64 finalizer; a bijection on u64.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeds for `count` phantoms derived from a master seed. Distinct because
/// `mix64` is a bijection.
pub fn phantom_seeds(master_seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64)
        .map(|i| mix64(master_seed.wrapping_add(i)))
        .collect()
}

/// Measurement-noise seed paired with a phantom seed. Kept apart from the
/// phantom's own random stream.
pub fn noise_seed(phantom_seed: u64) -> u64 {
    mix64(phantom_seed ^ 0xa076_1d64_78bd_642f)
}

/// Number of training items for a split; the rest are test items.
pub fn train_count(count: usize, split_ratio: f64) -> usize {
    (count as f64 * split_ratio).round() as usize
}

/// Deterministic train/test phantom split. `spec.seed` is the master seed.
pub fn generate_dataset(spec: &PhantomSpec, count: usize, split_ratio: f64) -> Result<DatasetSplit> {
    if count < 2 {
        return Err(invalid!("dataset needs at least 2 phantoms, got {count}"));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(invalid!("split ratio must lie in (0, 1), got {split_ratio}"));
    }
    let n_train = train_count(count, split_ratio).clamp(1, count - 1);
    let mut phantoms = phantom_seeds(spec.seed, count)
        .into_iter()
        .map(|seed| {
            Ok(Phantom {
                seed,
                image: generate_phantom(&spec.with_seed(seed))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let test = phantoms.split_off(n_train);
    Ok(DatasetSplit {
        train: phantoms,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_for_seed() {
        let spec = PhantomSpec::default().with_seed(17);
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        let other = generate_phantom(&spec.with_seed(18)).unwrap();
        assert_ne!(generate_phantom(&spec).unwrap(), other);
    }

    #[test]
    fn zero_objects_without_container_is_air() {
        let spec = PhantomSpec {
            n_objects: [0, 0],
            container: false,
            ..PhantomSpec::default()
        };
        let img = generate_phantom(&spec).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        assert_eq!(img.unit(), Unit::Hu);
    }

    #[test]
    fn degenerate_spec_rejected() {
        let spec = PhantomSpec {
            n_objects: [5, 2],
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn values_in_range_over_many_seeds() {
        let base = PhantomSpec {
            n_pixels: 32,
            ..PhantomSpec::default()
        };
        for seed in 0..1000 {
            let img = generate_phantom(&base.with_seed(seed)).unwrap();
            assert!(img.data().iter().all(|&v| (MIN_HU..=MAX_HU).contains(&v)));
        }
    }

    #[test]
    fn objects_stay_in_inscribed_circle() {
        for container in [true, false] {
            let base = PhantomSpec {
                n_pixels: 48,
                container,
                ..PhantomSpec::default()
            };
            let c = 23.5;
            for seed in 0..50 {
                let img = generate_phantom(&base.with_seed(seed)).unwrap();
                for r in 0..48 {
                    for col in 0..48 {
                        let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
                        if d > 24.0 {
                            assert_eq!(img.get(r, col), 0.0, "seed {seed} ({r},{col})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn paper_split_counts() {
        let spec = PhantomSpec {
            n_pixels: 8,
            n_objects: [0, 1],
            ..PhantomSpec::default()
        };
        let split = generate_dataset(&spec, 188, 153.0 / 188.0).unwrap();
        assert_eq!(split.train.len(), 153);
        assert_eq!(split.test.len(), 35);
    }

    #[test]
    fn split_is_disjoint_partition() {
        let spec = PhantomSpec {
            n_pixels: 16,
            ..PhantomSpec::default()
        };
        let split = generate_dataset(&spec, 10, 0.8).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.test.len(), 2);
        let train: HashSet<u64> = split.train.iter().map(|p| p.seed).collect();
        let test: HashSet<u64> = split.test.iter().map(|p| p.seed).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), 10);
        assert!(generate_dataset(&spec, 10, 1.0).is_err());
        assert!(generate_dataset(&spec, 1, 0.5).is_err());
    }

    #[test]
    fn disk_area_matches() {
        let d = disk(64, 10.0, 1.0, Unit::Water, 8);
        let area: f64 = d.data().iter().sum();
        assert!((area - std::f64::consts::PI * 100.0).abs() < 1.0);
    }
}
