//! Per-batch multitask loss weights.
//!
//! Each task contributes one signal `gᵢ ∈ [0, 1)`. The weights minimize
//!
//! ```text
//! -½ Σᵢ (ωᵢ gᵢ)² + ½ Σᵢⱼ (ωᵢ − ωⱼ)²   subject to   Σᵢ ωᵢ = 1
//! ```
//!
//! whose stationary point is `ωᵢ ∝ 1 / (L − gᵢ²)`. Every coefficient
//! `L − gᵢ²` is positive on the signal domain, so the closed form is
//! automatically nonnegative. [`qp_oracle`] recovers the same vector by
//! projected gradient descent on an equivalent diagonal quadratic, without
//! using the closed form.

use crate::error::{Error, Result};

/// One scalar per task, each in `[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSignals(Vec<f64>);

impl TaskSignals {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::arg(format!(
                "need at least 2 task signals, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|g| !(0.0..1.0).contains(*g)) {
            return Err(Error::arg(format!("task signal {bad} outside [0, 1)")));
        }
        Ok(Self(values))
    }

    /// Signals from raw nonnegative losses via [`normalize_signal`].
    pub fn from_losses(losses: &[f64]) -> Result<Self> {
        let values = losses
            .iter()
            .map(|&l| normalize_signal(l))
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `L − gᵢ²` for each task.
    fn coefficients(&self) -> impl Iterator<Item = f64> + '_ {
        let l = self.0.len() as f64;
        self.0.iter().map(move |g| l - g * g)
    }
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights(Vec<f64>);

impl LossWeights {
    pub fn uniform(tasks: usize) -> Self {
        Self(vec![1.0 / tasks as f64; tasks])
    }

    /// Validates nonnegativity and unit sum (within 1e-9).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::arg("loss weights must be nonnegative"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("loss weights sum to {total}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Closed-form weights `ωᵢ = (L − gᵢ²)⁻¹ / Σⱼ (L − gⱼ²)⁻¹`.
pub fn solve_weights(signals: &TaskSignals) -> LossWeights {
    let inverse: Vec<f64> = signals.coefficients().map(|c| 1.0 / c).collect();
    let total: f64 = inverse.iter().sum();
    LossWeights(inverse.into_iter().map(|v| v / total).collect())
}

/// Residual of the Lagrangian stationarity system
/// `−gᵢ²ωᵢ + Lωᵢ − Σⱼωⱼ − α = 0`: the spread of the implied multipliers
/// `αᵢ` plus the violation of `Σωᵢ = 1`. Zero at an exact stationary point.
pub fn stationarity_residual(signals: &TaskSignals, weights: &LossWeights) -> f64 {
    let total: f64 = weights.0.iter().sum();
    let alphas: Vec<f64> = signals
        .coefficients()
        .zip(&weights.0)
        .map(|(c, w)| c * w - total)
        .collect();
    let max = alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = alphas.iter().copied().fold(f64::INFINITY, f64::min);
    (max - min).max((total - 1.0).abs())
}

/// Euclidean projection onto `{x : x ≥ 0, Σx = 1}` (sort-and-threshold).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

#[derive(Clone, Debug)]
pub struct OracleSettings {
    pub step: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            step: 1e-2,
            max_iterations: 50_000,
            tolerance: 1e-12,
        }
    }
}

/// Minimizes `G(ω) = Σᵢ (L − gᵢ²) ωᵢ²` over the simplex by projected
/// gradient descent, starting from the uniform vector.
pub fn qp_oracle(signals: &TaskSignals) -> Result<LossWeights> {
    qp_oracle_with(signals, &OracleSettings::default())
}

pub fn qp_oracle_with(signals: &TaskSignals, settings: &OracleSettings) -> Result<LossWeights> {
    let coefficients: Vec<f64> = signals.coefficients().collect();
    let mut current = vec![1.0 / coefficients.len() as f64; coefficients.len()];
    let mut trace = Vec::new();
    let mut delta = f64::INFINITY;
    for _ in 0..settings.max_iterations {
        let stepped: Vec<f64> = current
            .iter()
            .zip(&coefficients)
            .map(|(w, c)| w - settings.step * 2.0 * c * w)
            .collect();
        let next = project_to_simplex(&stepped);
        delta = next
            .iter()
            .zip(&current)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        current = next;
        if delta < settings.tolerance {
            return Ok(LossWeights(current));
        }
        if trace.len() < 16 {
            trace.push(current.clone());
        }
    }
    trace.push(current);
    Err(Error::NoConvergence {
        iterations: settings.max_iterations,
        last_delta: delta,
        trace,
    })
}

/// Maps a nonnegative loss into `[0, 1)` by `l / (1 + l)`.
pub fn normalize_signal(raw_loss: f64) -> Result<f64> {
    if !raw_loss.is_finite() || raw_loss < 0.0 {
        return Err(Error::arg(format!(
            "loss {raw_loss} must be finite and nonnegative"
        )));
    }
    Ok(raw_loss / (1.0 + raw_loss))
}

/// `Σ ωᵢ·lᵢ`.
pub fn aggregate_loss(losses: &[f64], weights: &LossWeights) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::Shape {
            op: "aggregate_loss",
            left: vec![losses.len()],
            right: vec![weights.len()],
        });
    }
    Ok(losses.iter().zip(&weights.0).map(|(l, w)| l * w).sum())
}
