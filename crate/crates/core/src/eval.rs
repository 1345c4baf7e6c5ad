//! NRMSE, a regularized iterative baseline and the method comparison
//! harness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    backproject_at_angle, project_at_angle, Image, Sinogram, Unit, ViewGeometry,
};
use crate::nn::{Model, ModelInput, ModelVariant, Real, Tensor};
use crate::phantom::{noise_seed, Phantom};
use crate::physics::{simulate_sinogram, NoiseSpec, PhysicsConstants, HU_PER_WATER};
use crate::sbp::{fbp_hu, SbpOptions};
use crate::train::network_input;

/// `‖x_true − x̂‖₂ / ‖x_true‖₂`.
pub fn nrmse(x_true: &Image, x_hat: &Image) -> Result<f64> {
    if x_true.side() != x_hat.side() {
        return Err(invalid!(
            "nrmse needs equal shapes, got {} and {}",
            x_true.side(),
            x_hat.side()
        ));
    }
    let norm = x_true.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(invalid!("nrmse is undefined for an all-zero ground truth"));
    }
    let err = x_true
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(err / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterativeOptions {
    pub iterations: usize,
    pub reg_weight: f64,
}

impl Default for IterativeOptions {
    fn default() -> Self {
        IterativeOptions {
            iterations: 100,
            reg_weight: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeOutcome {
    /// HU-tagged reconstruction.
    pub image: Image,
    /// Objective at the start and after every accepted step.
    pub objective: Vec<f64>,
    /// Set when the line search found no decrease and the last iterate was
    /// returned early.
    pub stalled: bool,
}

const NEIGHBOURS: [(isize, isize); 4] = [(0, 1), (1, -1), (1, 0), (1, 1)];

/// `Q(x) = ½ Σ (x_i − x_j)²` over unordered 8-neighbour pairs.
fn smoothness(x: &[f64], n: usize) -> f64 {
    let mut q = 0.0;
    for r in 0..n {
        for c in 0..n {
            for (dr, dc) in NEIGHBOURS {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < n as isize && cc >= 0 && cc < n as isize {
                    let d = x[r * n + c] - x[rr as usize * n + cc as usize];
                    q += 0.5 * d * d;
                }
            }
        }
    }
    q
}

fn smoothness_grad(x: &[f64], n: usize, out: &mut [f64], weight: f64) {
    for r in 0..n {
        for c in 0..n {
            for (dr, dc) in NEIGHBOURS {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < n as isize && cc >= 0 && cc < n as isize {
                    let j = rr as usize * n + cc as usize;
                    let d = weight * (x[r * n + c] - x[j]);
                    out[r * n + c] += d;
                    out[j] -= d;
                }
            }
        }
    }
}

/// Weighted least squares with a quadratic smoothness penalty, minimized
/// by gradient descent with Armijo backtracking from the FBP image:
/// `½‖W^{1/2}(s·A·x − y)‖² + β·Q(x)` with `x` in water units, `s = μp` and
/// `W = diag(λ₀·exp(−y))`, the inverse noise variance evaluated at the
/// measurement.
pub fn iterative_baseline(
    sino: &Sinogram,
    geom: &ViewGeometry,
    phys: &PhysicsConstants,
    opts: IterativeOptions,
) -> Result<IterativeOutcome> {
    if opts.iterations == 0 {
        return Err(invalid!("iterative baseline needs at least one iteration"));
    }
    if !(opts.reg_weight >= 0.0) {
        return Err(invalid!("regularization weight must be non-negative"));
    }
    let n = geom.n_pixels();
    let s = phys.scale();
    let y = sino.to_flat();
    let weights: Vec<f64> = y.iter().map(|v| phys.lambda0 * (-v).exp()).collect();
    let project = |x: &[f64]| -> Result<Vec<f64>> {
        let img = Image::from_vec(n, x.to_vec(), Unit::Water)?;
        let mut out = Vec::with_capacity(y.len());
        for &angle in geom.angles() {
            out.extend(project_at_angle(&img, angle).into_iter().map(|v| v * s));
        }
        Ok(out)
    };
    let objective = |x: &[f64], ax: &[f64]| {
        let data: f64 = ax
            .iter()
            .zip(&y)
            .zip(&weights)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum();
        0.5 * data + opts.reg_weight * smoothness(x, n)
    };

    let mut x: Vec<f64> = fbp_hu(sino, geom, phys)?
        .into_data()
        .into_iter()
        .map(|v| v / HU_PER_WATER)
        .collect();
    let mut ax = project(&x)?;
    let mut f = objective(&x, &ax);
    let mut history = vec![f];
    let mut step = 1e-3;
    let mut stalled = false;
    for _ in 0..opts.iterations {
        let mut grad = vec![0.0; n * n];
        for (j, &angle) in geom.angles().iter().enumerate() {
            let r: Vec<f64> = (0..n)
                .map(|k| {
                    let i = j * n + k;
                    s * weights[i] * (ax[i] - y[i])
                })
                .collect();
            let bp = backproject_at_angle(&r, angle, Unit::Water);
            grad.iter_mut().zip(bp.data()).for_each(|(g, v)| *g += v);
        }
        smoothness_grad(&x, n, &mut grad, opts.reg_weight);
        let gg: f64 = grad.iter().map(|g| g * g).sum();
        if gg == 0.0 {
            break;
        }
        let ag = project(&grad)?;
        let mut accepted = false;
        step *= 2.0;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let trial_ax: Vec<f64> = ax.iter().zip(&ag).map(|(a, g)| a - step * g).collect();
            let ft = objective(&trial, &trial_ax);
            if ft <= f - 1e-4 * step * gg && ft < f {
                x = trial;
                ax = trial_ax;
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            stalled = true;
            break;
        }
        history.push(f);
    }
    if !f.is_finite() {
        return Err(Error::NonFinite {
            op: "iterative baseline",
        });
    }
    Ok(IterativeOutcome {
        image: Image::from_vec(n, x.into_iter().map(|v| v * HU_PER_WATER).collect(), Unit::Hu)?,
        objective: history,
        stalled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FBP")]
    Fbp,
    #[serde(rename = "iterative-baseline")]
    Iterative,
    #[serde(untagged)]
    Neural(ModelVariant),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Fbp => "FBP",
            Method::Iterative => "iterative-baseline",
            Method::Neural(v) => v.name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            _ if s.eq_ignore_ascii_case("FBP") => Ok(Method::Fbp),
            _ if s.eq_ignore_ascii_case("iterative-baseline") => Ok(Method::Iterative),
            _ => ModelVariant::parse(s)
                .map(Method::Neural)
                .map_err(|_| invalid!("unknown method {s:?}")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-image NRMSE with its population mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub image_ids: Vec<u64>,
    pub nrmse: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MethodResult {
    pub fn new(method: impl Into<String>, image_ids: Vec<u64>, nrmse: Vec<f64>) -> Result<Self> {
        if image_ids.len() != nrmse.len() {
            return Err(invalid!("{} ids for {} values", image_ids.len(), nrmse.len()));
        }
        let (mean, std) = mean_std(&nrmse);
        Ok(MethodResult {
            method: method.into(),
            image_ids,
            nrmse,
            mean,
            std,
        })
    }
}

/// Mean and population standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Shared evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSetup<'a> {
    pub geom: &'a ViewGeometry,
    pub phys: &'a PhysicsConstants,
    pub noisy: bool,
    /// Pixels dropped on each side before scoring; every method is scored on
    /// the same region.
    pub margin: usize,
    pub sbp: SbpOptions,
    pub iterative: IterativeOptions,
}

/// Measured sinogram for a test phantom. All methods call this, so they see
/// bit-identical data.
pub fn measure(p: &Phantom, setup: &EvalSetup<'_>) -> Result<Sinogram> {
    let noise = if setup.noisy {
        NoiseSpec::seeded(noise_seed(p.seed))
    } else {
        NoiseSpec::off()
    };
    simulate_sinogram(&p.image, setup.geom, setup.phys, noise)
}

/// HU reconstruction of one sinogram by `method`, at full size for FBP and
/// the iterative baseline and at `N − 2m` for a network of margin `m`.
pub fn reconstruct<T: Real>(
    method: Method,
    sino: &Sinogram,
    setup: &EvalSetup<'_>,
    model: Option<&Model<T>>,
) -> Result<Image> {
    match method {
        Method::Fbp => fbp_hu(sino, setup.geom, setup.phys),
        Method::Iterative => Ok(iterative_baseline(sino, setup.geom, setup.phys, setup.iterative)?.image),
        Method::Neural(variant) => {
            let model = model.ok_or_else(|| invalid!("{variant} needs trained parameters"))?;
            if model.config().variant != variant {
                return Err(invalid!(
                    "parameters are for {}, not {variant}",
                    model.config().variant
                ));
            }
            let x = network_input(variant, sino, setup.geom, setup.phys, setup.sbp)?;
            let input = ModelInput::for_variant(variant, x.cast::<T>())?;
            let y: Tensor<T> = model.predict(&input)?;
            let side = y.shape()[1];
            Image::from_vec(
                side,
                y.data().iter().map(|v| v.as_f64() * HU_PER_WATER).collect(),
                Unit::Hu,
            )
        }
    }
}

/// Crops a reconstruction to the common scoring region.
fn to_scoring_region(img: &Image, n: usize, margin: usize) -> Result<Image> {
    let own = (n - img.side()) / 2;
    if own > margin {
        return Err(invalid!(
            "reconstruction lost {own} pixels per side, more than the scoring margin {margin}"
        ));
    }
    img.crop_center(margin - own)
}

/// NRMSE of `method` on every test phantom.
pub fn evaluate_method<T: Real>(
    method: Method,
    test: &[Phantom],
    setup: &EvalSetup<'_>,
    model: Option<&Model<T>>,
) -> Result<MethodResult> {
    if let (Method::Neural(v), None) = (method, model) {
        return Err(invalid!("{v} needs trained parameters"));
    }
    let n = setup.geom.n_pixels();
    let mut ids = Vec::with_capacity(test.len());
    let mut values = Vec::with_capacity(test.len());
    for p in test {
        let sino = measure(p, setup)?;
        let rec = reconstruct(method, &sino, setup, model)?;
        let truth = p.image.crop_center(setup.margin)?;
        values.push(nrmse(&truth, &to_scoring_region(&rec, n, setup.margin)?)?);
        ids.push(p.seed);
    }
    MethodResult::new(method.name(), ids, values)
}

/// Comparison table as CSV (`method,mean,std,n`, full precision) and as
/// aligned text with three decimals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedTable {
    pub csv: String,
    pub text: String,
}

pub fn render_table(results: &[MethodResult]) -> RenderedTable {
    let mut csv = String::from("method,mean,std,n\n");
    for r in results {
        let _ = writeln!(csv, "{},{},{},{}", r.method, r.mean, r.std, r.nrmse.len());
    }
    let width = results
        .iter()
        .map(|r| r.method.len())
        .chain(["method".len()])
        .max()
        .unwrap_or(6);
    let mut text = format!("{:<width$}  {:>15}  {:>5}\n", "method", "NRMSE mean/std", "n");
    for r in results {
        let _ = writeln!(
            text,
            "{:<width$}  {:>15}  {:>5}",
            r.method,
            format!("{:.3} / {:.3}", r.mean, r.std),
            r.nrmse.len()
        );
    }
    RenderedTable { csv, text }
}

/// `method,image_id,nrmse` rows for every image.
pub fn per_image_csv(results: &[MethodResult]) -> String {
    let mut csv = String::from("method,image_id,nrmse\n");
    for r in results {
        for (id, v) in r.image_ids.iter().zip(&r.nrmse) {
            let _ = writeln!(csv, "{},{id},{v}", r.method);
        }
    }
    csv
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Parses the CSV half of [`render_table`].
pub fn parse_summary_csv(csv: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = csv.lines();
    if lines.next() != Some("method,mean,std,n") {
        return Err(Error::Format("summary CSV header missing".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad summary row {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(SummaryRow {
                method: f[0].to_string(),
                mean: f[1].parse().map_err(|_| bad())?,
                std: f[2].parse().map_err(|_| bad())?,
                n: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Parses [`per_image_csv`] output into `(method, image_id, nrmse)`.
pub fn parse_per_image_csv(csv: &str) -> Result<Vec<(String, u64, f64)>> {
    let mut lines = csv.lines();
    if lines.next() != Some("method,image_id,nrmse") {
        return Err(Error::Format("per-image CSV header missing".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::Format(format!("bad per-image row {line:?}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((
                f[0].to_string(),
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}
