//! Stacked back projection: one single-view FBP image per view, in HU.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    backproject_at_angle, fbp_full, fbp_single_view, project_at_angle, ramp_kernel, Image, Projection,
    Sinogram, Unit, ViewGeometry,
};
use crate::nn::Tensor;
use crate::physics::{PhysicsConstants, HU_PER_WATER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SbpOptions {
    /// Ramp-filter each view before backprojection. When false the slices
    /// are plain backprojections with the same `π/M` weight.
    pub filtered: bool,
}

impl Default for SbpOptions {
    fn default() -> Self {
        SbpOptions { filtered: true }
    }
}

/// Ordered stack of `M` single-view images `Z_j`, all of one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SbpTensor {
    slices: Vec<Image>,
}

impl SbpTensor {
    pub fn new(slices: Vec<Image>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| invalid!("an SBP tensor needs at least one slice"))?;
        let (side, unit) = (first.side(), first.unit());
        if slices.iter().any(|s| s.side() != side || s.unit() != unit) {
            return Err(invalid!("SBP slices must share side and unit"));
        }
        Ok(SbpTensor { slices })
    }

    pub fn slices(&self) -> &[Image] {
        &self.slices
    }

    pub fn n_views(&self) -> usize {
        self.slices.len()
    }

    pub fn side(&self) -> usize {
        self.slices[0].side()
    }

    pub fn unit(&self) -> Unit {
        self.slices[0].unit()
    }

    /// Row-major `(view, row, col)` buffer.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices
            .iter()
            .flat_map(|s| s.data().iter().copied())
            .collect()
    }

    pub fn from_flat(n_views: usize, side: usize, data: &[f64], unit: Unit) -> Result<Self> {
        if data.len() != n_views * side * side {
            return Err(invalid!(
                "SBP buffer has {} entries, expected {n_views}x{side}x{side}",
                data.len()
            ));
        }
        SbpTensor::new(
            data.chunks(side * side)
                .map(|c| Image::from_vec(side, c.to_vec(), unit))
                .collect::<Result<_>>()?,
        )
    }

    /// Pixelwise sum over views.
    pub fn sum_views(&self) -> Image {
        let mut acc = Image::zeros(self.side(), self.unit());
        for s in &self.slices {
            for (a, v) in acc.data_mut().iter_mut().zip(s.data()) {
                *a += v;
            }
        }
        acc
    }

    /// Views as channels: a `(N, N, M)` tensor.
    pub fn to_channels(&self) -> Tensor<f64> {
        let (n, m) = (self.side(), self.n_views());
        let mut data = vec![0.0; n * n * m];
        for (j, s) in self.slices.iter().enumerate() {
            for (p, v) in s.data().iter().enumerate() {
                data[p * m + j] = *v;
            }
        }
        Tensor::from_vec(vec![n, n, m], data)
    }
}

/// `Z_j = (1000/(μp))·A_j†(y_j)` for every view.
pub fn build_sbp(
    sino: &Sinogram,
    geom: &ViewGeometry,
    phys: &PhysicsConstants,
    opts: SbpOptions,
) -> Result<SbpTensor> {
    if sino.n_views() != geom.n_views() || sino.n_detectors() != geom.n_pixels() {
        return Err(invalid!(
            "sinogram {}x{} does not match geometry {} views x {} detectors",
            sino.n_views(),
            sino.n_detectors(),
            geom.n_views(),
            geom.n_pixels()
        ));
    }
    let inverse_scale = HU_PER_WATER / phys.scale();
    let slices = sino
        .columns()
        .iter()
        .map(|col| {
            let z = if opts.filtered {
                fbp_single_view(col, geom)?
            } else {
                let angle = geom.angle(col.view_index)?;
                let mut z = backproject_at_angle(&col.values, angle, Unit::Water);
                let w = PI / geom.n_views() as f64;
                z.data_mut().iter_mut().for_each(|v| *v *= w);
                z
            };
            Ok(z.map(|v| v * inverse_scale).retag(Unit::Hu))
        })
        .collect::<Result<Vec<_>>>()?;
    SbpTensor::new(slices)
}

/// Full FBP of a measured sinogram, converted to HU.
pub fn fbp_hu(sino: &Sinogram, geom: &ViewGeometry, phys: &PhysicsConstants) -> Result<Image> {
    let inverse_scale = HU_PER_WATER / phys.scale();
    Ok(fbp_full(sino, geom)?
        .map(|v| v * inverse_scale)
        .retag(Unit::Hu))
}

/// Things that carry a unit tag and can be rescaled elementwise.
pub trait UnitTagged: Sized {
    fn unit(&self) -> Unit;
    fn rescaled(&self, f: impl Fn(f64) -> f64, unit: Unit) -> Self;
}

impl UnitTagged for Image {
    fn unit(&self) -> Unit {
        Image::unit(self)
    }

    fn rescaled(&self, f: impl Fn(f64) -> f64, unit: Unit) -> Self {
        self.map(f).retag(unit)
    }
}

impl UnitTagged for SbpTensor {
    fn unit(&self) -> Unit {
        SbpTensor::unit(self)
    }

    fn rescaled(&self, f: impl Fn(f64) -> f64, unit: Unit) -> Self {
        SbpTensor {
            slices: self.slices.iter().map(|s| s.rescaled(&f, unit)).collect(),
        }
    }
}

/// HU → water units (divide by 1000).
pub fn normalize_for_network<T: UnitTagged>(t: &T) -> Result<T> {
    if t.unit() != Unit::Hu {
        return Err(invalid!("normalize expects HU input, got {:?}", t.unit()));
    }
    Ok(t.rescaled(|v| v / HU_PER_WATER, Unit::Water))
}

/// Water units → HU (multiply by 1000).
pub fn denormalize_to_hu<T: UnitTagged>(t: &T) -> Result<T> {
    if t.unit() != Unit::Water {
        return Err(invalid!(
            "denormalize expects water-unit input, got {:?}",
            t.unit()
        ));
    }
    Ok(t.rescaled(|v| v * HU_PER_WATER, Unit::Hu))
}

/// View `j` becomes an `(N, N, 1)` tensor, in view order.
pub fn reshape_for_sequence(t: &SbpTensor) -> Vec<Tensor<f64>> {
    let n = t.side();
    t.slices
        .iter()
        .map(|s| Tensor::from_vec(vec![n, n, 1], s.data().to_vec()))
        .collect()
}

/// Crops every slice to the same `size²` window.
pub fn crop_patch(t: &SbpTensor, top: usize, left: usize, size: usize) -> Result<SbpTensor> {
    let slices = t
        .slices
        .iter()
        .map(|s| s.crop(top, left, size))
        .collect::<Result<Vec<_>>>()?;
    SbpTensor::new(slices)
}

/// Recovers `y_j` from slice `Z_j` by re-projecting it at its own angle and
/// undoing the normal operator `A_j A_jᵀ` and, for filtered slices, the ramp
/// filter.
pub fn recover_projection(
    slice: &Image,
    j: usize,
    geom: &ViewGeometry,
    phys: &PhysicsConstants,
    opts: SbpOptions,
) -> Result<Projection> {
    if slice.unit() != Unit::Hu {
        return Err(invalid!("SBP slices are HU-tagged"));
    }
    let n = geom.n_pixels();
    if slice.side() != n {
        return Err(invalid!("slice side {} does not match geometry", slice.side()));
    }
    let angle = geom.angle(j)?;
    let weight = (HU_PER_WATER / phys.scale()) * (PI / geom.n_views() as f64);
    let reprojected: Vec<f64> = project_at_angle(slice, angle)
        .into_iter()
        .map(|v| v / weight)
        .collect();

    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut unit = vec![0.0; n];
    for k in 0..n {
        unit[k] = 1.0;
        let col = project_at_angle(&backproject_at_angle(&unit, angle, Unit::Water), angle);
        unit[k] = 0.0;
        gram.set_column(k, &DVector::from_vec(col));
    }
    let singular = || Error::InvalidState(format!("normal operator of view {j} is singular"));
    let filtered = gram
        .lu()
        .solve(&DVector::from_vec(reprojected))
        .ok_or_else(singular)?;

    let values = if opts.filtered {
        let h = ramp_kernel(n);
        let ramp = DMatrix::from_fn(n, n, |r, c| h[r.abs_diff(c)]);
        ramp.lu().solve(&filtered).ok_or_else(singular)?
    } else {
        filtered
    };
    Ok(Projection {
        values: values.iter().copied().collect(),
        view_index: j,
    })
}
