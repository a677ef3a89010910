//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only arena: every operation pushes a node whose
//! inputs already exist, so node order is a topological order and the
//! backward sweep simply walks the arena in reverse, visiting each node once.

use ndarray::{s, Array2, Axis, Zip};

use super::functional::{self, KL_EPSILON};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a stacked `[batch * seq, hidden]` activation is split into examples
/// for self-attention. Keys at or beyond an example's length are masked out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub seq: usize,
    pub heads: usize,
    pub lengths: Vec<usize>,
}

impl AttentionLayout {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<Matrix>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Kl {
        predicted: Var,
        target: Matrix,
        eps: f64,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

fn shape_of(m: &Matrix) -> Vec<usize> {
    m.shape().to_vec()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Gradients are still reported for it.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf node holding a copy of a parameter; its gradient is returned by
    /// [`Graph::param_grads`]. Registering the same parameter twice yields
    /// the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, var)) = self.params.iter().find(|(p, _)| *p == id) {
            return var;
        }
        let var = self.leaf(store.get(id).clone());
        self.params.push((id, var));
        var
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::Shape {
                op: "matmul",
                left: shape_of(av),
                right: shape_of(bv),
            });
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::Shape {
                op: "matmul_bt",
                left: shape_of(av),
                right: shape_of(bv),
            });
        }
        let out = av.dot(&bv.t());
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "add",
                left: shape_of(av),
                right: shape_of(bv),
            });
        }
        let out = av + bv;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != xv.ncols() {
            return Err(Error::Shape {
                op: "add_row",
                left: shape_of(xv),
                right: shape_of(rv),
            });
        }
        let out = xv + rv;
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "mul",
                left: shape_of(av),
                right: shape_of(bv),
            });
        }
        let out = av * bv;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x) * factor;
        self.push(out, Op::Scale(x, factor))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(functional::gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = functional::softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.ncols();
        if gv.shape() != [1, n] || bv.shape() != [1, n] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: shape_of(xv),
                right: shape_of(gv),
            });
        }
        let (xhat, inv_std) = functional::normalize_rows(xv);
        let out = &xhat * gv + bv;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of `src` (repeats allowed). Used for embedding lookup
    /// and for picking out per-task positions from the encoder output.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        if let Some(&bad) = rows.iter().find(|&&r| r >= sv.nrows()) {
            return Err(Error::arg(format!(
                "row index {bad} outside matrix of {} rows",
                sv.nrows()
            )));
        }
        let out = sv.select(Axis(0), rows);
        Ok(self.push(
            out,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat_rows of nothing"))?;
        let width = self.value(*first).ncols();
        for p in parts {
            if self.value(*p).ncols() != width {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: shape_of(self.value(*first)),
                    right: shape_of(self.value(*p)),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("widths checked");
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Multi-head scaled dot-product attention over a stacked batch.
    ///
    /// `q`, `k`, `v` are `[batch * seq, hidden]`; example `b` occupies rows
    /// `b * seq .. (b + 1) * seq` and may only attend to its first
    /// `lengths[b]` keys (the rest receive `-inf` logits).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let rows = layout.batch() * layout.seq;
        let hidden = qv.ncols();
        for m in [qv, kv, vv] {
            if m.shape() != [rows, hidden] {
                return Err(Error::Shape {
                    op: "attention",
                    left: vec![rows, hidden],
                    right: shape_of(m),
                });
            }
        }
        if layout.heads == 0 || hidden % layout.heads != 0 {
            return Err(Error::arg(format!(
                "hidden size {hidden} not divisible by {} heads",
                layout.heads
            )));
        }
        if let Some(&bad) = layout.lengths.iter().find(|&&l| l == 0 || l > layout.seq) {
            return Err(Error::arg(format!(
                "example length {bad} outside 1..={}",
                layout.seq
            )));
        }
        let head_dim = hidden / layout.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = Matrix::zeros((rows, hidden));
        let mut probs = Vec::with_capacity(layout.batch() * layout.heads);
        for (b, &len) in layout.lengths.iter().enumerate() {
            let r = b * layout.seq..(b + 1) * layout.seq;
            for h in 0..layout.heads {
                let c = h * head_dim..(h + 1) * head_dim;
                let qs = qv.slice(s![r.clone(), c.clone()]);
                let ks = kv.slice(s![r.clone(), c.clone()]);
                let vs = vv.slice(s![r.clone(), c.clone()]);
                let mut scores = qs.dot(&ks.t()) * scale;
                scores
                    .slice_mut(s![.., len..])
                    .fill(f64::NEG_INFINITY);
                let p = functional::softmax_rows(&scores);
                out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    /// Mean over rows of `-ln softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.nrows() || targets.is_empty() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: shape_of(lv),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.ncols()) {
            return Err(Error::arg(format!(
                "target index {bad} outside logits width {}",
                lv.ncols()
            )));
        }
        let probs = functional::softmax_rows(lv);
        let n = targets.len() as f64;
        let loss: f64 = lv
            .rows()
            .into_iter()
            .zip(targets)
            .map(|(row, &t)| functional::nonnegative(functional::log_sum_exp(row) - row[t]))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Matrix::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows of `KL(target_i ‖ predicted_i)`; `target` is constant.
    pub fn kl_divergence(&mut self, target: Matrix, predicted: Var) -> Result<Var> {
        let pv = self.value(predicted);
        if target.shape() != pv.shape() || target.nrows() == 0 {
            return Err(Error::Shape {
                op: "kl_divergence",
                left: shape_of(&target),
                right: shape_of(pv),
            });
        }
        let n = target.nrows() as f64;
        let loss = target
            .rows()
            .into_iter()
            .zip(pv.rows())
            .map(|(t, p)| {
                functional::nonnegative(functional::kl_terms(t.as_slice().unwrap(), &p.to_vec(), KL_EPSILON))
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Matrix::from_elem((1, 1), loss),
            Op::Kl {
                predicted,
                target,
                eps: KL_EPSILON,
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` (an `n × 1` column).
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ncols() != 1 || lv.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: shape_of(lv),
                right: vec![labels.len()],
            });
        }
        let n = labels.len() as f64;
        let loss = lv
            .column(0)
            .iter()
            .zip(labels)
            .map(|(&z, &y)| functional::bce_with_logit(z, y))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Matrix::from_elem((1, 1), loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `Σ wᵢ·xᵢ` over `1 × 1` nodes; the weights are constants.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let val = self.value(v);
            if val.shape() != [1, 1] {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    left: vec![1, 1],
                    right: shape_of(val),
                });
            }
            total += w * val[[0, 0]];
        }
        Ok(self.push(
            Matrix::from_elem((1, 1), total),
            Op::WeightedSum(terms.to_vec()),
        ))
    }

    /// Backpropagates from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&self.value(*b).t()));
                accumulate(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulBt(a, b) => {
                accumulate(grads, *a, g.dot(self.value(*b)));
                accumulate(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                accumulate(grads, *b, g * self.value(*a));
            }
            Op::Scale(x, c) => accumulate(grads, *x, g * *c),
            Op::Tanh(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &xv| *d *= functional::gelu_derivative(xv));
                accumulate(grads, *x, d);
            }
            Op::SoftmaxRows(x) => accumulate(grads, *x, softmax_backward(&node.value, g)),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                accumulate(grads, *gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * self.value(*gain);
                let n = xhat.ncols() as f64;
                let mut dx = Matrix::zeros(xhat.raw_dim());
                for (r, inv) in inv_std.iter().enumerate() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let sum_dh = dh.sum();
                    let sum_dh_xh = dh.dot(&xh);
                    Zip::from(dx.row_mut(r))
                        .and(&dh)
                        .and(&xh)
                        .for_each(|d, &a, &b| *d = inv / n * (n * a - sum_dh - b * sum_dh_xh));
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather { src, rows } => {
                let mut d = Matrix::zeros(self.value(*src).raw_dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                accumulate(grads, *src, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    accumulate(grads, *p, g.slice(s![offset..offset + n, ..]).to_owned());
                    offset += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let head_dim = qv.ncols() / layout.heads;
                let scale = 1.0 / (head_dim as f64).sqrt();
                let mut dq = Matrix::zeros(qv.raw_dim());
                let mut dk = Matrix::zeros(kv.raw_dim());
                let mut dv = Matrix::zeros(vv.raw_dim());
                let mut p_iter = probs.iter();
                for b in 0..layout.batch() {
                    let r = b * layout.seq..(b + 1) * layout.seq;
                    for h in 0..layout.heads {
                        let c = h * head_dim..(h + 1) * head_dim;
                        let p = p_iter.next().expect("one probability block per head");
                        let dout = g.slice(s![r.clone(), c.clone()]);
                        let qs = qv.slice(s![r.clone(), c.clone()]);
                        let ks = kv.slice(s![r.clone(), c.clone()]);
                        let vs = vv.slice(s![r.clone(), c.clone()]);
                        dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&dout));
                        let dp = dout.dot(&vs.t());
                        let ds = softmax_backward(p, &dp) * scale;
                        dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&ks));
                        dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qs));
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g[[0, 0]] / targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[[r, t]] -= 1.0;
                }
                d *= scale;
                accumulate(grads, *logits, d);
            }
            Op::Kl {
                predicted,
                target,
                eps,
            } => {
                let scale = g[[0, 0]] / target.nrows() as f64;
                let mut d = Matrix::zeros(target.raw_dim());
                Zip::from(&mut d)
                    .and(target)
                    .and(self.value(*predicted))
                    .for_each(|d, &t, &p| {
                        if t > 0.0 && p > *eps {
                            *d = -scale * t / p;
                        }
                    });
                accumulate(grads, *predicted, d);
            }
            Op::BceWithLogits { logits, labels } => {
                let scale = g[[0, 0]] / labels.len() as f64;
                let z = self.value(*logits);
                let mut d = Matrix::zeros(z.raw_dim());
                for (r, &y) in labels.iter().enumerate() {
                    d[[r, 0]] = scale * (functional::sigmoid(z[[r, 0]]) - y);
                }
                accumulate(grads, *logits, d);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    accumulate(grads, v, g * w);
                }
            }
        }
    }

    /// Gradients for every parameter in `store` order; parameters that never
    /// entered the graph get zeros.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Matrix> {
        let mut out = store.zeros_like();
        for &(id, var) in &self.params {
            if let Some(g) = grads.get(var) {
                out[id.0] += g;
            }
        }
        out
    }
}

fn softmax_backward(y: &Matrix, g: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(y.raw_dim());
    for ((mut dr, yr), gr) in d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
        let dot = yr.dot(&gr);
        Zip::from(&mut dr)
            .and(&yr)
            .and(&gr)
            .for_each(|d, &y, &g| *d = y * (g - dot));
    }
    d
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}
