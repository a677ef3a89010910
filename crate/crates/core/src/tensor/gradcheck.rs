//! Central finite-difference gradient checking.

use super::graph::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&BlockError> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares `analytic` (one matrix per parameter, in store order) against
/// `(f(θ + ε) − f(θ − ε)) / 2ε` for every scalar parameter.
pub fn grad_check<F>(
    mut function: F,
    params: &ParamStore,
    analytic: &[Matrix],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::Shape {
            op: "grad_check",
            left: vec![params.len()],
            right: vec![analytic.len()],
        });
    }
    let mut probe = params.clone();
    let mut blocks = Vec::with_capacity(params.len());
    for id in params.ids() {
        let grad = &analytic[id.0];
        if grad.shape() != params.get(id).shape() {
            return Err(Error::Shape {
                op: "grad_check",
                left: params.get(id).shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        let mut block = BlockError {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for (flat, &a) in grad.iter().enumerate() {
            let original = probe.get(id).as_slice().expect("standard layout")[flat];
            probe.get_mut(id).as_slice_mut().expect("standard layout")[flat] = original + epsilon;
            let plus = function(&probe)?;
            probe.get_mut(id).as_slice_mut().expect("standard layout")[flat] = original - epsilon;
            let minus = function(&probe)?;
            probe.get_mut(id).as_slice_mut().expect("standard layout")[flat] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(a, numeric);
            if err > block.max_rel_error || err.is_nan() {
                block.max_rel_error = err;
                block.worst_index = flat;
            }
        }
        blocks.push(block);
    }
    let max_rel_error = blocks
        .iter()
        .map(|b| b.max_rel_error)
        // NaN must survive the reduction.
        .fold(0.0, |m: f64, e| if m.is_nan() || e.is_nan() { f64::NAN } else { m.max(e) });
    Ok(GradCheckReport {
        max_rel_error,
        blocks,
    })
}
