//! Central finite differences for verifying the hand-written backward
//! passes. Everything here works in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Default central-difference step.
pub const STEP: f64 = 1e-6;

/// Tensor of uniform draws in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// `∂f/∂t` for every entry of `t` by central differences with [`STEP`].
pub fn finite_difference(t: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = t.clone();
    let mut grad = Tensor::zeros(t.shape().to_vec());
    for i in 0..t.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - STEP;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * STEP);
    }
    grad
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)` where the floor is
/// `1e-3·max|n|`. The floor keeps entries that are tiny relative to the rest
/// of the gradient from being judged against finite-difference round-off.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    max_relative_error_with_floor(analytic, numeric, 1e-3 * scale)
}

/// As [`max_relative_error`] with an explicit floor, for comparing one
/// parameter tensor against the scale of a whole model's gradient.
pub fn max_relative_error_with_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let floor = floor.max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Checks every tensor of `analytic` against finite differences of `loss`
/// with respect to that tensor, using a floor of `1e-3` times the largest
/// numeric entry over all tensors. Returns the worst `(name, error)`.
pub fn check_param_gradients<P: Clone>(
    analytic: &[(String, Tensor<f64>)],
    params: &P,
    get: impl Fn(&P, &str) -> Tensor<f64>,
    set: impl Fn(&mut P, &str, Tensor<f64>),
    loss: impl Fn(&P) -> f64,
) -> (String, f64) {
    let numeric: Vec<Tensor<f64>> = analytic
        .iter()
        .map(|(name, _)| {
            finite_difference(&get(params, name), |t| {
                let mut p = params.clone();
                set(&mut p, name, t.clone());
                loss(&p)
            })
        })
        .collect();
    let scale = numeric
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(&numeric)
        .map(|((name, a), n)| {
            (
                name.clone(),
                max_relative_error_with_floor(a.data(), n.data(), 1e-3 * scale),
            )
        })
        .fold((String::new(), 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
}

/// Panics unless [`max_relative_error`] is below `tol`.
pub fn assert_grad_close(analytic: &Tensor<f64>, numeric: &Tensor<f64>, tol: f64) {
    assert_eq!(analytic.shape(), numeric.shape());
    let err = max_relative_error(analytic.data(), numeric.data());
    assert!(err < tol, "gradient mismatch: max relative error {err:e} >= {tol:e}");
}
