//! Reverse-mode differentiation over the handful of primitives the models
//! use.
//!
//! Every primitive appends one node holding its value; [`Tape::backward`]
//! walks the nodes in exact reverse order and accumulates gradients
//! additively.

use std::rc::Rc;

use super::kernels::{self, check_finite};
use super::{NumericError, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Tensor<F>>),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<F>,
        rstd: Vec<F>,
    },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    StackRows(Vec<(Var, usize)>),
    MeanRows(Var),
    Sum(Var),
    L2NormalizeRows { x: Var, norms: Vec<F>, floor: F },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Tensor<F> },
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Gradients indexed by [`Var`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<F>) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>) -> Result<Var, NumericError> {
        check_finite(name, &value)?;
        Ok(self.push(value, op))
    }

    /// Adds an input (parameter or constant). Gradients are tracked for all
    /// leaves; callers ignore the ones they do not need.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        self.checked("matmul", value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = kernels::matmul_t(self.value(a), self.value(b))?;
        self.checked("matmul_t", value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.checked("add", value, Op::Add(a, b))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericError> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.len() != x.cols() {
            return Err(shape_err("add_row", x, b));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, &bb) in value.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        self.checked("add_row", value, Op::AddRow(a, bias))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.checked("mul", value, Op::Mul(a, b))
    }

    /// Elementwise product with a constant (dropout masks, readouts).
    pub fn mul_const(&mut self, a: Var, c: Rc<Tensor<F>>) -> Result<Var, NumericError> {
        let x = self.value(a);
        if x.len() != c.len() {
            return Err(shape_err("mul_const", x, &c));
        }
        let data = x.data().iter().zip(c.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.checked("mul_const", value, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericError> {
        let s = F::lit(s);
        let value = self.value(a).map(|x| x * s);
        self.checked("scale", value, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericError> {
        let value = kernels::gelu(self.value(a));
        self.checked("gelu", value, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericError> {
        let (g, b) = (self.value(gamma), self.value(beta));
        let xv = self.value(x);
        if g.len() != xv.cols() || b.len() != xv.cols() {
            return Err(shape_err("layer_norm", xv, g));
        }
        let (xhat, rstd) = kernels::normalize_rows(xv, eps);
        let mut value = xhat.clone();
        for r in 0..value.rows() {
            for (j, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * g.data()[j] + b.data()[j];
            }
        }
        self.checked("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Row softmax; `visible` (row-major, same size as `a`) hides entries.
    pub fn softmax(&mut self, a: Var, visible: Option<&[bool]>) -> Result<Var, NumericError> {
        let value = match visible {
            Some(m) => kernels::softmax_rows_masked(self.value(a), m)?,
            None => kernels::softmax_rows(self.value(a)),
        };
        self.checked("softmax", value, Op::Softmax(a))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(NumericError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{start}+{len} of {:?}", xv.shape()),
            });
        }
        let value = Tensor::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c));
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(NumericError::ShapeMismatch {
                op: "concat_cols",
                detail: "row counts differ".into(),
            });
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Builds a matrix whose `i`-th row is row `r` of `v` for the `i`-th
    /// `(v, r)` pair. Covers gathers, row slices and row concatenation.
    pub fn stack_rows(&mut self, rows: &[(Var, usize)]) -> Result<Var, NumericError> {
        let Some(&(first, _)) = rows.first() else {
            return Err(NumericError::ShapeMismatch {
                op: "stack_rows",
                detail: "no rows".into(),
            });
        };
        let cols = self.value(first).cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &(v, r) in rows {
            let t = self.value(v);
            if t.cols() != cols || r >= t.rows() {
                return Err(NumericError::ShapeMismatch {
                    op: "stack_rows",
                    detail: format!("row {r} of {:?} into width {cols}", t.shape()),
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec())))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        let pairs: Vec<_> = ids.iter().map(|&i| (table, i)).collect();
        self.stack_rows(&pairs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let pairs: Vec<_> = (start..start + len).map(|r| (x, r)).collect();
        self.stack_rows(&pairs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let pairs: Vec<_> = parts
            .iter()
            .flat_map(|&p| (0..self.value(p).rows()).map(move |r| (p, r)))
            .collect();
        self.stack_rows(&pairs)
    }

    /// Column means: `[R×C] -> [1×C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let xv = self.value(x);
        let n = F::lit(xv.rows() as f64);
        let value = Tensor::from_fn(1, xv.cols(), |_, c| {
            (0..xv.rows()).map(|r| xv.get(r, c)).sum::<F>() / n
        });
        self.checked("mean_rows", value, Op::MeanRows(x))
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericError> {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.checked("sum", value, Op::Sum(x))
    }

    /// Divides each row by `max(‖row‖, floor)`.
    pub fn l2_normalize_rows(&mut self, x: Var, floor: f64) -> Result<Var, NumericError> {
        let floor = F::lit(floor);
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            let d = n.max(floor);
            for v in row.iter_mut() {
                *v /= d;
            }
            norms.push(n);
        }
        self.checked("l2_normalize_rows", value, Op::L2NormalizeRows { x, norms, floor })
    }

    /// Mean cross-entropy of `logits` rows against `targets` over rows where
    /// `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, NumericError> {
        let lv = self.value(logits);
        let loss = kernels::cross_entropy_masked(lv, targets, mask)?;
        let probs = kernels::softmax_rows(lv);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, NumericError> {
        let mut acc = F::zero();
        let mut ops = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            let w = F::lit(w);
            acc += w * self.value(v).item();
            ops.push((v, w));
        }
        self.checked("weighted_sum", Tensor::scalar(acc), Op::WeightedSum(ops))
    }

    /// Reverse pass from the scalar `output` (seeded with 1).
    pub fn backward(&self, output: Var) -> Result<Grads<F>, NumericError> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), F::one()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(NumericError::NonFiniteGradient);
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<(), NumericError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = kernels::matmul_t(g, self.value(*b))?;
                let db = kernels::t_matmul(self.value(*a), g)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                let da = kernels::matmul(g, self.value(*b))?;
                let db = kernels::t_matmul(g, self.value(*a))?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                let bshape = self.value(*b).shape().to_vec();
                let mut db = vec![F::zero(); g.cols()];
                for r in 0..g.rows() {
                    for (d, &x) in db.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, Tensor::new(bshape, db)?);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let da = zip_map(g, y, |p, q| p * q);
                let db = zip_map(g, x, |p, q| p * q);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MulConst(a, c) => accumulate(grads, *a, zip_map(g, c, |p, q| p * q)),
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * *s)),
            Op::Gelu(a) => {
                let d = zip_map(g, self.value(*a), |p, x| p * kernels::gelu_grad_scalar(x));
                accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let cols = g.cols();
                let n = F::lit(cols as f64);
                let mut dgamma = vec![F::zero(); cols];
                let mut dbeta = vec![F::zero(); cols];
                let mut dx = Tensor::zeros(xhat.shape());
                for r in 0..g.rows() {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let mut mean_d = F::zero();
                    let mut mean_dx = F::zero();
                    for j in 0..cols {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let d = gr[j] * gv.data()[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    let out = dx.row_mut(r);
                    for j in 0..cols {
                        let d = gr[j] * gv.data()[j];
                        out[j] = rstd[r] * (d - mean_d - xr[j] * mean_dx);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, Tensor::new(gv.shape().to_vec(), dgamma)?);
                accumulate(grads, *beta, Tensor::new(gv.shape().to_vec(), dbeta)?);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut d = Tensor::zeros(p.shape());
                for r in 0..p.rows() {
                    let (pr, gr) = (p.row(r), g.row(r));
                    let dot: F = pr.iter().zip(gr).map(|(&x, &y)| x * y).sum();
                    for (o, (&x, &y)) in d.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                        *o = x * (y - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                let len = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let d = Tensor::from_fn(pv.rows(), w, |r, c| g.get(r, offset + c));
                    accumulate(grads, p, d.reshape(pv.shape().to_vec())?);
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                for (i, &(v, r)) in rows.iter().enumerate() {
                    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
                    for (o, &x) in slot.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = F::lit(xv.rows() as f64);
                let d = Tensor::from_fn(xv.rows(), xv.cols(), |_, c| g.get(0, c) / n);
                accumulate(grads, *x, d.reshape(xv.shape().to_vec())?);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
            Op::L2NormalizeRows { x, norms, floor } => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let out = d.row_mut(r);
                    if norms[r] > *floor {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..yr.len() {
                            out[j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    } else {
                        for j in 0..yr.len() {
                            out[j] = gr[j] / *floor;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                let count = F::lit(mask.iter().filter(|&&m| m).count() as f64);
                let scale = g.item() / count;
                let mut d = Tensor::zeros(probs.shape());
                for r in 0..probs.rows() {
                    if !mask[r] {
                        continue;
                    }
                    let out = d.row_mut(r);
                    for (o, &p) in out.iter_mut().zip(probs.row(r)) {
                        *o = p * scale;
                    }
                    out[targets[r]] -= scale;
                }
                accumulate(grads, *logits, d);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    accumulate(grads, v, Tensor::scalar(g.item() * w));
                }
            }
        }
        Ok(())
    }
}

fn shape_err<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
    }
}

fn zip_map<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same length")
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, d: Tensor<F>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (x, &y) in g.data_mut().iter_mut().zip(d.data()) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::<f64>::new();
        let theta = tape.leaf(t(1, 3, &[0.5, -2.0, 3.0]));
        let sq = tape.mul(theta, theta).unwrap();
        let s = tape.sum(sq).unwrap();
        let f = tape.scale(s, 0.5).unwrap();
        assert_eq!(tape.value(f).item(), 0.5 * (0.25 + 4.0 + 9.0));
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[0.5, -2.0, 3.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // f = sum(x + x) => df/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.add(x, x).unwrap();
        let f = tape.sum(y).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn stack_rows_scatters_gradient() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(t(3, 2, &[0.0; 6]));
        let g = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        let f = tape.sum(g).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(1, 1, &[f64::MAX]));
        assert_eq!(tape.scale(x, 10.0), Err(NumericError::NonFinite { op: "scale" }));
    }
}
