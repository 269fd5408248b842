//! Central finite-difference gradient checking.

use crate::tensor::Tensor;

/// Outcome of comparing one analytic gradient entry to its numerical estimate.
#[derive(Clone, Debug)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Relative error with an absolute floor so that entries whose true gradient
/// is zero compare sensibly.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Numerical gradient of `f` at `x` for the listed flat indices by central
/// differences with step `eps`.
pub fn numerical_gradient(
    x: &Tensor<f64>,
    indices: &[usize],
    eps: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Compares `analytic` against central differences of `f` on `indices`.
/// Returns every entry whose relative error exceeds `rel_tol`.
pub fn check(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    indices: &[usize],
    eps: f64,
    rel_tol: f64,
    abs_floor: f64,
    f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<Mismatch> {
    assert_eq!(x.shape(), analytic.shape());
    let numeric = numerical_gradient(x, indices, eps, f);
    indices
        .iter()
        .zip(numeric)
        .filter_map(|(&index, numeric)| {
            let a = analytic.data()[index];
            let rel_error = relative_error(a, numeric, abs_floor);
            (rel_error > rel_tol).then_some(Mismatch {
                index,
                analytic: a,
                numeric,
                rel_error,
            })
        })
        .collect()
}

/// Up to `max` flat indices spread evenly over a tensor of `len` entries.
pub fn spread_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..max).map(|i| i * len / max).collect();
    out.dedup();
    out
}
