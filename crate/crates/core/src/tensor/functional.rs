//! Forward-only numerical kernels shared by the autodiff graph and by callers
//! that just need a value (evaluation, target construction, tests).

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};

use crate::error::{Error, Result};

/// Lower clamp applied to predicted probabilities before taking logs.
pub const KL_EPSILON: f64 = 1e-12;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-12;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// `ln Σ exp(x)` stabilized by the maximum.
pub fn log_sum_exp(x: ArrayView1<f64>) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(mut lane: ndarray::ArrayViewMut1<f64>) {
    let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    lane.mapv_inplace(|v| {
        let e = (v - max).exp();
        total += e;
        e
    });
    lane.mapv_inplace(|v| v / total);
}

/// Softmax along `axis` (0 = down columns, 1 = across rows).
pub fn softmax(x: &Array2<f64>, axis: usize) -> Result<Array2<f64>> {
    if axis > 1 {
        return Err(Error::arg(format!("softmax axis {axis} out of range for a matrix")));
    }
    let mut out = x.clone();
    for lane in out.lanes_mut(Axis(axis)) {
        softmax_in_place(lane);
    }
    Ok(out)
}

/// Row-wise softmax; every row of the result is a probability vector.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for row in out.rows_mut() {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let mut out = Array1::from(x.to_vec());
    softmax_in_place(out.view_mut());
    out.to_vec()
}

/// Clamps rounding noise below zero; unlike `f64::max`, NaN passes through.
pub(crate) fn nonnegative(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

/// Negative log-probability of `target` under `softmax(logits)`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::arg(format!(
            "target index {target} outside logits width {}",
            logits.len()
        )));
    }
    let lse = log_sum_exp(ArrayView1::from(logits));
    Ok(nonnegative(lse - logits[target]))
}

fn check_simplex(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::arg(format!("{name} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::arg(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// `KL(target ‖ predicted)` with predicted probabilities clamped below by `eps`.
pub fn kl_divergence_eps(target: &[f64], predicted: &[f64], eps: f64) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::Shape {
            op: "kl_divergence",
            left: vec![target.len()],
            right: vec![predicted.len()],
        });
    }
    check_simplex("target distribution", target)?;
    check_simplex("predicted distribution", predicted)?;
    Ok(nonnegative(kl_terms(target, predicted, eps)))
}

pub fn kl_divergence(target: &[f64], predicted: &[f64]) -> Result<f64> {
    kl_divergence_eps(target, predicted, KL_EPSILON)
}

pub(crate) fn kl_terms(target: &[f64], predicted: &[f64], eps: f64) -> f64 {
    target
        .iter()
        .zip(predicted)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &q)| t * (t.ln() - q.max(eps).ln()))
        .sum()
}

/// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
pub fn layer_norm(x: &Array2<f64>, gain: &[f64], bias: &[f64]) -> Result<Array2<f64>> {
    let width = x.ncols();
    if gain.len() != width || bias.len() != width {
        return Err(Error::Shape {
            op: "layer_norm",
            left: vec![x.nrows(), width],
            right: vec![gain.len(), bias.len()],
        });
    }
    let (xhat, _) = normalize_rows(x);
    let mut out = xhat;
    for mut row in out.rows_mut() {
        Zip::from(&mut row)
            .and(gain)
            .and(bias)
            .for_each(|v, &g, &b| *v = *v * g + b);
    }
    Ok(out)
}

/// Returns the normalized rows and each row's inverse standard deviation.
pub(crate) fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let width = x.ncols() as f64;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let mean = row.sum() / width;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        inv_std.push(inv);
    }
    (out, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `label`, computed from the logit.
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a probability against a label.
pub fn binary_cross_entropy(probability: f64, label: f64) -> f64 {
    let p = probability.clamp(KL_EPSILON, 1.0 - KL_EPSILON);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Gathers rows of `table` by id.
pub fn embedding_lookup(table: &Array2<f64>, ids: &[usize]) -> Result<Array2<f64>> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= table.nrows()) {
        return Err(Error::arg(format!(
            "embedding id {bad} outside table of {} rows",
            table.nrows()
        )));
    }
    Ok(table.select(Axis(0), ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax(&array![[0.0, 0.0, 0.0]], 1).unwrap();
        for v in s.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax(&array![[1000.0, 0.0]], 1).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(s[[0, 1]] < 1e-300);
    }

    #[test]
    fn softmax_column_axis() {
        let s = softmax(&array![[1.0, 5.0], [1.0, -5.0]], 0).unwrap();
        assert!((s[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((s.column(1).sum() - 1.0).abs() < 1e-15);
        assert!(softmax(&array![[1.0]], 2).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let v = 7;
        let ce = cross_entropy(&vec![0.25; v], 3).unwrap();
        assert!((ce - (v as f64).ln()).abs() < 1e-12);
        assert!(cross_entropy(&[30.0, -30.0], 0).unwrap() < 1e-20);
        assert!(cross_entropy(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn kl_cases() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let k = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((k - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(kl_divergence(&[0.7, 0.7], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
        // zero predicted mass is clamped rather than producing infinity
        let clamped = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((clamped - 0.5 * (0.5f64.ln() - KL_EPSILON.ln()) - 0.5 * 0.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let y = layer_norm(&array![[3.0, 3.0, 3.0, 3.0]], &[1.0; 4], &[0.0; 4]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(layer_norm(&array![[1.0, 2.0]], &[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gelu_and_sigmoid_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((bce_with_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((binary_cross_entropy(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn embedding_rejects_bad_id() {
        let t = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(embedding_lookup(&t, &[1, 1, 0]).unwrap(), array![[3.0, 4.0], [3.0, 4.0], [1.0, 2.0]]);
        assert!(embedding_lookup(&t, &[2]).is_err());
    }

    #[test]
    fn nan_logits_are_not_clamped_away() {
        assert!(cross_entropy(&[f64::NAN, 0.0, 1.0], 2).unwrap().is_nan());
        assert_eq!(nonnegative(-1e-17), 0.0);
    }
}
