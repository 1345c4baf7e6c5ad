//! Parallel-beam projector, its exact adjoint, Ram-Lak filtering and FBP.
//!
//! The projector rotates the image about its center and sums along the
//! vertical axis: for detector `k` at signed offset `s = k - (N-1)/2` and ray
//! sample `t = i - (N-1)/2`, the image is sampled bilinearly at
//! `s·(cos θ, sin θ) + t·(-sin θ, cos θ)` (column offset, row offset) and the
//! `N` samples are summed. Samples falling outside the grid read zero. Path
//! length is therefore measured in pixels; physical scaling is applied by
//! [`crate::physics`].
//!
//! The backprojector scatters each detector value with the same bilinear
//! weights, so it is the exact transpose of the projector.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Unit tag carried by every [`Image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    /// Modified Hounsfield units: air 0, water 1000.
    #[serde(rename = "HU")]
    Hu,
    /// Water-relative units: air 0, water 1.
    #[serde(rename = "water1")]
    Water,
}

/// Square grid of attenuation values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
    unit: Unit,
}

impl Image {
    pub fn zeros(side: usize, unit: Unit) -> Self {
        Image {
            side,
            data: vec![0.0; side * side],
            unit,
        }
    }

    /// Wraps a row-major buffer. Fails unless the buffer is `side²` long and
    /// every entry is finite.
    pub fn from_vec(side: usize, data: Vec<f64>, unit: Unit) -> Result<Self> {
        if data.len() != side * side {
            return Err(invalid!(
                "image buffer has {} entries, expected {}x{}",
                data.len(),
                side,
                side
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("image entry {i} is not finite"));
        }
        Ok(Image { side, data, unit })
    }

    pub fn from_fn(side: usize, unit: Unit, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                data.push(f(r, c));
            }
        }
        Image { side, data, unit }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.side + col] = value;
    }

    /// Same values under a different unit tag. Callers are responsible for
    /// having converted the values.
    pub(crate) fn retag(mut self, unit: Unit) -> Self {
        self.unit = unit;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Image {
            side: self.side,
            data: self.data.iter().map(|&v| f(v)).collect(),
            unit: self.unit,
        }
    }

    /// Square window of side `size` whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Self> {
        if top + size > self.side || left + size > self.side {
            return Err(invalid!(
                "crop {size}x{size} at ({top},{left}) exceeds {0}x{0} image",
                self.side
            ));
        }
        Ok(Image::from_fn(size, self.unit, |r, c| {
            self.get(top + r, left + c)
        }))
    }

    /// Removes `margin` pixels from every border.
    pub fn crop_center(&self, margin: usize) -> Result<Self> {
        if 2 * margin >= self.side {
            return Err(invalid!(
                "margin {margin} leaves nothing of a {0}x{0} image",
                self.side
            ));
        }
        self.crop(margin, margin, self.side - 2 * margin)
    }
}

/// Line integrals of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub values: Vec<f64>,
    pub view_index: usize,
}

impl Projection {
    pub fn zeros(len: usize, view_index: usize) -> Self {
        Projection {
            values: vec![0.0; len],
            view_index,
        }
    }
}

/// All views of one acquisition, ordered by view index.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    columns: Vec<Projection>,
}

impl Sinogram {
    pub fn new(columns: Vec<Projection>) -> Result<Self> {
        for (j, col) in columns.iter().enumerate() {
            if col.view_index != j {
                return Err(invalid!(
                    "sinogram column {j} carries view index {}",
                    col.view_index
                ));
            }
            if let Some(len) = columns.first().map(|c| c.values.len()) {
                if col.values.len() != len {
                    return Err(invalid!("sinogram columns have unequal lengths"));
                }
            }
        }
        Ok(Sinogram { columns })
    }

    pub fn zeros(geom: &ViewGeometry) -> Self {
        Sinogram {
            columns: (0..geom.n_views())
                .map(|j| Projection::zeros(geom.n_pixels(), j))
                .collect(),
        }
    }

    pub fn columns(&self) -> &[Projection] {
        &self.columns
    }

    pub fn columns_mut(&mut self) -> &mut [Projection] {
        &mut self.columns
    }

    pub fn n_views(&self) -> usize {
        self.columns.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.columns.first().map_or(0, |c| c.values.len())
    }

    /// Row-major `(view, detector)` buffer.
    pub fn to_flat(&self) -> Vec<f64> {
        self.columns
            .iter()
            .flat_map(|c| c.values.iter().copied())
            .collect()
    }

    pub fn from_flat(n_views: usize, n_detectors: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n_views * n_detectors {
            return Err(invalid!(
                "sinogram buffer has {} entries, expected {n_views}x{n_detectors}",
                data.len()
            ));
        }
        Sinogram::new(
            data.chunks(n_detectors.max(1))
                .take(n_views)
                .enumerate()
                .map(|(j, chunk)| Projection {
                    values: chunk.to_vec(),
                    view_index: j,
                })
                .collect(),
        )
    }
}

/// Equi-spaced half-turn parallel-beam geometry with `n_pixels` detectors
/// and an `n_pixels²` image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGeometry {
    n_pixels: usize,
    angles: Vec<f64>,
}

impl ViewGeometry {
    pub fn new(n_pixels: usize, n_views: usize) -> Result<Self> {
        if n_pixels < 2 {
            return Err(invalid!("need at least 2 pixels, got {n_pixels}"));
        }
        if n_views < 1 {
            return Err(invalid!("need at least one view"));
        }
        let angles = (0..n_views)
            .map(|j| j as f64 * PI / n_views as f64)
            .collect();
        Ok(ViewGeometry { n_pixels, angles })
    }

    pub fn n_pixels(&self) -> usize {
        self.n_pixels
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn angle(&self, j: usize) -> Result<f64> {
        self.angles
            .get(j)
            .copied()
            .ok_or_else(|| invalid!("view {j} out of range for {} views", self.n_views()))
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.side() != self.n_pixels {
            return Err(invalid!(
                "image side {} does not match geometry n_pixels {}",
                image.side(),
                self.n_pixels
            ));
        }
        Ok(())
    }

    fn check_projection(&self, proj: &Projection) -> Result<()> {
        if proj.values.len() != self.n_pixels {
            return Err(invalid!(
                "projection length {} does not match geometry n_pixels {}",
                proj.values.len(),
                self.n_pixels
            ));
        }
        Ok(())
    }

    fn check_sinogram(&self, sino: &Sinogram) -> Result<()> {
        if sino.n_views() != self.n_views() {
            return Err(invalid!(
                "sinogram has {} views, geometry has {}",
                sino.n_views(),
                self.n_views()
            ));
        }
        if sino.n_detectors() != self.n_pixels {
            return Err(invalid!(
                "sinogram has {} detectors, geometry has {}",
                sino.n_detectors(),
                self.n_pixels
            ));
        }
        Ok(())
    }
}

/// Visits the bilinear footprint of every (detector, ray sample) pair at
/// `angle`, calling `f(detector, pixel_index, weight)`.
#[inline]
fn for_each_weight(n: usize, angle: f64, mut f: impl FnMut(usize, usize, f64)) {
    let (sin, cos) = angle.sin_cos();
    let center = (n as f64 - 1.0) / 2.0;
    let last = n as isize - 1;
    for k in 0..n {
        let s = k as f64 - center;
        for i in 0..n {
            let t = i as f64 - center;
            let fc = s * cos - t * sin + center;
            let fr = s * sin + t * cos + center;
            let c0 = fc.floor();
            let r0 = fr.floor();
            let wx = fc - c0;
            let wy = fr - r0;
            let (c0, r0) = (c0 as isize, r0 as isize);
            if c0 < -1 || r0 < -1 || c0 > last || r0 > last {
                continue;
            }
            let taps = [
                (r0, c0, (1.0 - wy) * (1.0 - wx)),
                (r0, c0 + 1, (1.0 - wy) * wx),
                (r0 + 1, c0, wy * (1.0 - wx)),
                (r0 + 1, c0 + 1, wy * wx),
            ];
            for (r, c, w) in taps {
                if w != 0.0 && r >= 0 && c >= 0 && r <= last && c <= last {
                    f(k, r as usize * n + c as usize, w);
                }
            }
        }
    }
}

/// Raw line integrals of `image` along parallel rays at an arbitrary angle.
pub fn project_at_angle(image: &Image, angle: f64) -> Vec<f64> {
    let n = image.side();
    let data = image.data();
    let mut out = vec![0.0; n];
    for_each_weight(n, angle, |k, p, w| out[k] += w * data[p]);
    out
}

/// Transpose of [`project_at_angle`].
pub fn backproject_at_angle(values: &[f64], angle: f64, unit: Unit) -> Image {
    let n = values.len();
    let mut img = Image::zeros(n, unit);
    let data = img.data_mut();
    for_each_weight(n, angle, |k, p, w| data[p] += w * values[k]);
    img
}

/// `A_j x`: raw projection of view `j`.
pub fn radon_single_view(image: &Image, geom: &ViewGeometry, j: usize) -> Result<Projection> {
    geom.check_image(image)?;
    let angle = geom.angle(j)?;
    Ok(Projection {
        values: project_at_angle(image, angle),
        view_index: j,
    })
}

pub fn radon_full(image: &Image, geom: &ViewGeometry) -> Result<Sinogram> {
    let columns = (0..geom.n_views())
        .map(|j| radon_single_view(image, geom, j))
        .collect::<Result<Vec<_>>>()?;
    Sinogram::new(columns)
}

/// `A_jᵀ p`: exact adjoint of [`radon_single_view`]. The result is tagged
/// water units; callers retag when the projection is in other units.
pub fn backproject_single_view(proj: &Projection, geom: &ViewGeometry) -> Result<Image> {
    geom.check_projection(proj)?;
    let angle = geom.angle(proj.view_index)?;
    Ok(backproject_at_angle(&proj.values, angle, Unit::Water))
}

/// Band-limited Ram-Lak taps for unit detector spacing, `h[0..len]`.
pub fn ramp_kernel(len: usize) -> Vec<f64> {
    (0..len)
        .map(|k| match k {
            0 => 0.25,
            k if k % 2 == 0 => 0.0,
            k => -1.0 / (PI * PI * (k * k) as f64),
        })
        .collect()
}

/// Direct spatial-domain convolution with the Ram-Lak kernel, truncated to
/// the detector row.
pub fn ramp_filter(proj: &Projection) -> Projection {
    let n = proj.values.len();
    let h = ramp_kernel(n);
    let p = &proj.values;
    let values = (0..n)
        .map(|k| {
            let mut acc = 0.0;
            for (m, &pm) in p.iter().enumerate() {
                acc += h[k.abs_diff(m)] * pm;
            }
            acc
        })
        .collect();
    Projection {
        values,
        view_index: proj.view_index,
    }
}

/// `A_j†(y_j) = (π/M)·A_jᵀ(ramp(y_j))`, one summand of [`fbp_full`].
pub fn fbp_single_view(proj: &Projection, geom: &ViewGeometry) -> Result<Image> {
    let filtered = ramp_filter(proj);
    let mut img = backproject_single_view(&filtered, geom)?;
    let weight = PI / geom.n_views() as f64;
    img.data_mut().iter_mut().for_each(|v| *v *= weight);
    Ok(img)
}

/// Sum of [`fbp_single_view`] over all views, accumulated in view order.
pub fn fbp_full(sino: &Sinogram, geom: &ViewGeometry) -> Result<Image> {
    geom.check_sinogram(sino)?;
    let mut acc = Image::zeros(geom.n_pixels(), Unit::Water);
    for col in sino.columns() {
        let img = fbp_single_view(col, geom)?;
        for (a, v) in acc.data_mut().iter_mut().zip(img.data()) {
            *a += v;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, rng: &mut impl Rng) -> Image {
        Image::from_fn(n, Unit::Water, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn geometry_angles_are_equispaced() {
        let g = ViewGeometry::new(16, 8).unwrap();
        for (j, a) in g.angles().iter().enumerate() {
            assert_eq!(*a, j as f64 * PI / 8.0);
        }
        assert!(ViewGeometry::new(1, 8).is_err());
        assert!(ViewGeometry::new(8, 0).is_err());
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let g = ViewGeometry::new(16, 4).unwrap();
        let img = Image::zeros(16, Unit::Water);
        for j in 0..4 {
            assert!(radon_single_view(&img, &g, j)
                .unwrap()
                .values
                .iter()
                .all(|&v| v == 0.0));
        }
        assert!(radon_full(&img, &g)
            .unwrap()
            .to_flat()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let g = ViewGeometry::new(16, 4).unwrap();
        let img = Image::zeros(8, Unit::Water);
        assert!(radon_single_view(&img, &g, 0).is_err());
        let img = Image::zeros(16, Unit::Water);
        assert!(radon_single_view(&img, &g, 4).is_err());
        assert!(backproject_single_view(&Projection::zeros(15, 0), &g).is_err());
        let sino = Sinogram::zeros(&ViewGeometry::new(16, 3).unwrap());
        assert!(fbp_full(&sino, &g).is_err());
    }

    #[test]
    fn single_view_sinogram_matches_radon_single_view() {
        let g = ViewGeometry::new(16, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(16, &mut rng);
        let sino = radon_full(&img, &g).unwrap();
        assert_eq!(sino.n_views(), 1);
        assert_eq!(sino.columns()[0], radon_single_view(&img, &g, 0).unwrap());
    }

    #[test]
    fn uniform_image_column_sums_at_zero_angle() {
        let n = 64;
        let g = ViewGeometry::new(n, 8).unwrap();
        let img = Image::from_fn(n, Unit::Water, |_, _| 1.0);
        let p = radon_single_view(&img, &g, 0).unwrap();
        for v in &p.values {
            assert_eq!(*v, 64.0);
        }
    }

    #[test]
    fn mirror_symmetry_between_zero_and_pi() {
        let n = 24;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(n, &mut rng);
        let mirrored = Image::from_fn(n, Unit::Water, |r, c| img.get(r, n - 1 - c));
        let p0 = project_at_angle(&img, 0.0);
        let ppi = project_at_angle(&mirrored, PI);
        for (a, b) in p0.iter().zip(&ppi) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn impulse_backprojects_onto_one_column() {
        let n = 16;
        let g = ViewGeometry::new(n, 4).unwrap();
        let mut p = Projection::zeros(n, 0);
        p.values[n / 2] = 1.0;
        let img = backproject_single_view(&p, &g).unwrap();
        for r in 0..n {
            for c in 0..n {
                let v = img.get(r, c);
                if c == n / 2 {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn adjoint_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n in &[16, 32] {
            let g = ViewGeometry::new(n, 5).unwrap();
            for j in 0..5 {
                let x = random_image(n, &mut rng);
                let p = Projection {
                    values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    view_index: j,
                };
                let ax = radon_single_view(&x, &g, j).unwrap();
                let atp = backproject_single_view(&p, &g).unwrap();
                let lhs: f64 = ax.values.iter().zip(&p.values).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.data().iter().zip(atp.data()).map(|(a, b)| a * b).sum();
                let norm_ax = ax.values.iter().map(|v| v * v).sum::<f64>().sqrt();
                let norm_p = p.values.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((lhs - rhs).abs() / (norm_ax * norm_p) < 1e-10);
            }
        }
    }

    #[test]
    fn ramp_kernel_closed_form() {
        let h = ramp_kernel(9);
        assert_eq!(h[0], 0.25);
        for k in 1..9 {
            let expected = if k % 2 == 0 {
                0.0
            } else {
                -1.0 / (PI * PI * (k * k) as f64)
            };
            assert!((h[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_filter_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Projection {
            values: (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
            view_index: 0,
        };
        let zero = ramp_filter(&Projection::zeros(32, 0));
        assert!(zero.values.iter().all(|&v| v == 0.0));
        // Scaling by a power of two commutes exactly with every rounding step.
        let scaled = Projection {
            values: p.values.iter().map(|v| v * 4.0).collect(),
            view_index: 0,
        };
        let a = ramp_filter(&scaled);
        let b = ramp_filter(&p);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(*x, 4.0 * y);
        }
    }

    #[test]
    fn ramp_filter_of_constant_has_small_interior_mean() {
        let p = Projection {
            values: vec![1.0; 256],
            view_index: 0,
        };
        let q = ramp_filter(&p);
        // Interior response decays like 1/(π²·distance to the edge).
        assert!(q.values[128].abs() < 5e-3);
    }

    #[test]
    fn fbp_is_sum_of_single_views() {
        let n = 16;
        let g = ViewGeometry::new(n, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(n, &mut rng);
        let sino = radon_full(&img, &g).unwrap();
        let full = fbp_full(&sino, &g).unwrap();
        let mut acc = vec![0.0; n * n];
        for col in sino.columns() {
            let z = fbp_single_view(col, &g).unwrap();
            for (a, v) in acc.iter_mut().zip(z.data()) {
                *a += v;
            }
        }
        assert_eq!(acc.as_slice(), full.data());
    }

    #[test]
    fn single_view_fbp_is_constant_along_rays() {
        let n = 32;
        let g = ViewGeometry::new(n, 4).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        let disk = Image::from_fn(n, Unit::Water, |r, col| {
            let (x, y) = (col as f64 - c, r as f64 - c);
            if x * x + y * y <= 64.0 {
                1.0
            } else {
                0.0
            }
        });
        let p = radon_single_view(&disk, &g, 0).unwrap();
        let z = fbp_single_view(&p, &g).unwrap();
        let mut dev: f64 = 0.0;
        for col in 0..n {
            let top = z.get(0, col);
            for r in 0..n {
                dev = dev.max((z.get(r, col) - top).abs());
            }
        }
        assert!(dev < 1e-9, "deviation along rays {dev}");
    }

    #[test]
    fn sinogram_flat_round_trip() {
        let g = ViewGeometry::new(8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sino = radon_full(&random_image(8, &mut rng), &g).unwrap();
        let back = Sinogram::from_flat(3, 8, &sino.to_flat()).unwrap();
        assert_eq!(back, sino);
    }

    #[test]
    fn crop_center_and_bounds() {
        let img = Image::from_fn(6, Unit::Hu, |r, c| (r * 6 + c) as f64);
        let cropped = img.crop_center(1).unwrap();
        assert_eq!(cropped.side(), 4);
        assert_eq!(cropped.get(0, 0), 7.0);
        assert!(img.crop(3, 3, 4).is_err());
        assert!(img.crop_center(3).is_err());
    }
}
