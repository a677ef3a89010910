use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamStore};

/// Adam with decoupled weight decay: the decay term `lr · λ · θ` is applied
/// directly to the parameters and never enters the moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, epsilon: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            weight_decay,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Matrix], lr: f64) -> Result<()> {
        if grads.len() != self.first.len() || params.len() != self.first.len() {
            return Err(Error::arg(format!(
                "optimizer tracks {} blocks, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = lr * self.weight_decay;
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            if p.dim() != g.dim() {
                return Err(Error::Shape {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let step = (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
                    *p -= lr * step + decay * *p;
                });
        }
        Ok(())
    }
}
