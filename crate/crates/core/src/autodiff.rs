//! Reverse-mode differentiation over the [`Graph`] primitives.

use crate::graph::{cross_entropy_forward, masked_zero_forward, Graph};
use crate::masks::AdditiveMask;
use crate::numerics::{self, ops, Matrix, Scalar};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Constant,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    MaskedZero(Var, Matrix<F>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix<F>,
        inv_std: Vec<F>,
    },
    Sigmoid(Var),
    Gelu(Var),
    Rope {
        x: Var,
        positions: Vec<usize>,
        head_dim: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix<F>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Matrix<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Record of one forward execution, in topological (creation) order.
#[derive(Debug, Clone, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Matrix<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient w.r.t. `v`; `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, m: Matrix<F>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Matrix<F> {
        &self.nodes[v.0].value
    }

    /// Propagates `seed` (the gradient of some scalar w.r.t. `output`) back to
    /// every recorded value.
    pub fn backward(&self, output: Var, seed: &Matrix<F>) -> Result<Gradients<F>> {
        let out_shape = self.val(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {}x{} for output {}x{}",
                    seed.rows(),
                    seed.cols(),
                    out_shape.0,
                    out_shape.1
                ),
            ));
        }
        let mut grads: Vec<Option<Matrix<F>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<F>>], v: Var, g: Matrix<F>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        node: &Node<F>,
        g: &Matrix<F>,
        grads: &mut [Option<Matrix<F>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, numerics::matmul_nt(g, self.val(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, numerics::matmul_tn(self.val(*a), g)?)?;
                }
            }
            Op::MatmulNt(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                if self.needs(*a) {
                    self.accumulate(grads, *a, numerics::matmul(g, self.val(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, numerics::matmul_tn(g, self.val(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.val(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.val(*a))?)?;
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*row) {
                    let mut acc = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        numerics::axpy(F::one(), g.row(r), acc.row_mut(0));
                    }
                    self.accumulate(grads, *row, acc)?;
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k))?,
            Op::MaskedZero(a, indicator) => self.accumulate(grads, *a, g.hadamard(indicator)?)?,
            Op::Softmax(x) => {
                // dx = y ⊙ (g - <g, y>) per row; masked entries have y = 0.
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = numerics::dot(yr, gr);
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = if yv == F::zero() {
                            F::zero()
                        } else {
                            yv * (gv - inner)
                        };
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gain_v = self.val(*gain).data();
                if self.needs(*x) {
                    let n = F::from_usize(xhat.cols());
                    let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let xh = xhat.row(r);
                        let gr = g.row(r);
                        let mut sum_d = F::zero();
                        let mut sum_dx = F::zero();
                        for ((&gv, &gn), &xv) in gr.iter().zip(gain_v).zip(xh) {
                            let d = gv * gn;
                            sum_d += d;
                            sum_dx += d * xv;
                        }
                        let k = inv / n;
                        for (((o, &gv), &gn), &xv) in
                            dx.row_mut(r).iter_mut().zip(gr).zip(gain_v).zip(xh)
                        {
                            *o = k * (n * gv * gn - sum_d - xv * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
                if self.needs(*gain) {
                    let mut dg = Matrix::zeros(1, xhat.cols());
                    for r in 0..xhat.rows() {
                        for ((o, &gv), &xv) in
                            dg.row_mut(0).iter_mut().zip(g.row(r)).zip(xhat.row(r))
                        {
                            *o += gv * xv;
                        }
                    }
                    self.accumulate(grads, *gain, dg)?;
                }
                if self.needs(*bias) {
                    let mut db = Matrix::zeros(1, xhat.cols());
                    for r in 0..g.rows() {
                        numerics::axpy(F::one(), g.row(r), db.row_mut(0));
                    }
                    self.accumulate(grads, *bias, db)?;
                }
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, "sigmoid backward", |gv, y| {
                    gv * y * (F::one() - y)
                })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Gelu(x) => {
                let d = g.zip_map(self.val(*x), "gelu backward", |gv, xv| {
                    gv * numerics::gelu_derivative(xv)
                })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Rope {
                x,
                positions,
                head_dim,
            } => {
                let d = ops::rope_apply(g, positions, numerics::ROPE_BASE, *head_dim, true)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let src = self.val(*x);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *x, d)?;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let src = self.val(*x);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *x, d)?;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    if self.needs(*p) {
                        self.accumulate(grads, *p, g.slice_cols(offset, w)?)?;
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, indices } => {
                if self.needs(*table) {
                    let t = self.val(*table);
                    let mut d = Matrix::zeros(t.rows(), t.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        numerics::axpy(F::one(), g.row(r), d.row_mut(i));
                    }
                    self.accumulate(grads, *table, d)?;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let k = g.get(0, 0) / F::from_usize(*count);
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (o, &p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = p * k;
                        }
                        let cur = d.get(r, t);
                        d.set(r, t, cur - k);
                    }
                }
                self.accumulate(grads, *logits, d)?;
            }
            Op::Sum(x) => {
                let src = self.val(*x);
                self.accumulate(
                    grads,
                    *x,
                    Matrix::filled(src.rows(), src.cols(), g.get(0, 0)),
                )?;
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Graph<F> for Tape<F> {
    type Value = Var;

    fn constant(&mut self, m: Matrix<F>) -> Var {
        self.push(m, Op::Constant, false)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Matrix<F> {
        self.val(*v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = numerics::matmul(self.val(*a), self.val(*b))?;
        let ng = self.needs(*a) || self.needs(*b);
        Ok(self.push(out, Op::Matmul(*a, *b), ng))
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = numerics::matmul_nt(self.val(*a), self.val(*b))?;
        let ng = self.needs(*a) || self.needs(*b);
        Ok(self.push(out, Op::MatmulNt(*a, *b), ng))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.val(*a).add(self.val(*b))?;
        let ng = self.needs(*a) || self.needs(*b);
        Ok(self.push(out, Op::Add(*a, *b), ng))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.val(*a).hadamard(self.val(*b))?;
        let ng = self.needs(*a) || self.needs(*b);
        Ok(self.push(out, Op::Mul(*a, *b), ng))
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        let out = self.val(*a).add_row_broadcast(self.val(*row))?;
        let ng = self.needs(*a) || self.needs(*row);
        Ok(self.push(out, Op::AddRow(*a, *row), ng))
    }

    fn scale(&mut self, a: &Var, k: F) -> Var {
        let out = self.val(*a).scale(k);
        let ng = self.needs(*a);
        self.push(out, Op::Scale(*a, k), ng)
    }

    fn masked_zero(&mut self, a: &Var, mask: &AdditiveMask<F>) -> Result<Var> {
        let out = masked_zero_forward(self.val(*a), mask)?;
        let ng = self.needs(*a);
        Ok(self.push(out, Op::MaskedZero(*a, mask.to_indicator()), ng))
    }

    fn softmax(&mut self, scores: &Var, mask: Option<&AdditiveMask<F>>) -> Result<Var> {
        let out = numerics::row_softmax(self.val(*scores), mask.map(AdditiveMask::matrix))?;
        let ng = self.needs(*scores);
        Ok(self.push(out, Op::Softmax(*scores), ng))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: F) -> Result<Var> {
        let xm = self.val(*x);
        let out = numerics::layer_norm(xm, self.val(*gain).data(), self.val(*bias).data(), eps)?;
        let ones = vec![F::one(); xm.cols()];
        let zeros = vec![F::zero(); xm.cols()];
        let mut xhat = xm.clone();
        let mut inv_std = Vec::with_capacity(xm.rows());
        for r in 0..xhat.rows() {
            inv_std.push(ops::layer_norm_row(xhat.row_mut(r), &ones, &zeros, eps));
        }
        let ng = self.needs(*x) || self.needs(*gain) || self.needs(*bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: *x,
                gain: *gain,
                bias: *bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let out = numerics::sigmoid(self.val(*a));
        let ng = self.needs(*a);
        self.push(out, Op::Sigmoid(*a), ng)
    }

    fn gelu(&mut self, a: &Var) -> Var {
        let out = self.val(*a).map(numerics::gelu);
        let ng = self.needs(*a);
        self.push(out, Op::Gelu(*a), ng)
    }

    fn rope(&mut self, a: &Var, positions: &[usize], head_dim: usize) -> Result<Var> {
        let out =
            numerics::rope_rotate_heads(self.val(*a), positions, numerics::ROPE_BASE, head_dim)?;
        let ng = self.needs(*a);
        Ok(self.push(
            out,
            Op::Rope {
                x: *a,
                positions: positions.to_vec(),
                head_dim,
            },
            ng,
        ))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let out = self.val(*a).slice_cols(start, len)?;
        let ng = self.needs(*a);
        Ok(self.push(out, Op::SliceCols { x: *a, start }, ng))
    }

    fn slice_rows(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let out = self.val(*a).slice_rows(start, len)?;
        let ng = self.needs(*a);
        Ok(self.push(out, Op::SliceRows { x: *a, start }, ng))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Matrix<F>> = parts.iter().map(|p| self.val(*p)).collect();
        let out = Matrix::concat_cols(&refs)?;
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    fn gather_rows(&mut self, table: &Var, indices: &[usize]) -> Result<Var> {
        let out = self.val(*table).gather_rows(indices)?;
        let ng = self.needs(*table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table: *table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    fn cross_entropy(&mut self, logits: &Var, targets: &[Option<usize>]) -> Result<Var> {
        let (loss, probs) = cross_entropy_forward(self.val(*logits), targets)?;
        let count = targets.iter().filter(|t| t.is_some()).count();
        let ng = self.needs(*logits);
        let op = Op::CrossEntropy {
            logits: *logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push(Matrix::filled(1, 1, loss), op, ng))
    }

    fn sum(&mut self, a: &Var) -> Var {
        let out = Matrix::filled(1, 1, self.val(*a).sum());
        let ng = self.needs(*a);
        self.push(out, Op::Sum(*a), ng)
    }

    fn map(&mut self, _a: &Var, name: &str, _f: fn(F) -> F) -> Result<Var> {
        Err(Error::Capability(format!(
            "`{name}` has no recorded derivative"
        )))
    }
}

/// Runs `f` on a fresh tape whose leaves are `inputs`, returning its result
/// and the recorded tape.
pub fn forward_record<F: Scalar, R>(
    inputs: &[Matrix<F>],
    f: impl FnOnce(&mut Tape<F>, &[Var]) -> Result<R>,
) -> Result<(R, Tape<F>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((out, tape))
}

/// Central-difference gradient of scalar `f` at `param`.
pub fn finite_difference_gradient<F: Scalar>(
    mut f: impl FnMut(&Matrix<F>) -> Result<F>,
    param: &Matrix<F>,
    step: F,
) -> Result<Matrix<F>> {
    if step <= F::zero() {
        return Err(Error::Parameter(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut probe = param.clone();
    let mut grad = Matrix::zeros(param.rows(), param.cols());
    let two_h = step + step;
    for k in 0..param.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            let (r, c) = (k / param.cols().max(1), k % param.cols().max(1));
            return Err(Error::Numerical(format!(
                "non-finite objective when perturbing entry ({r}, {c})"
            )));
        }
        grad.data_mut()[k] = (plus - minus) / two_h;
    }
    Ok(grad)
}

/// `max |a - b| / max(|a|, |b|, floor)` over all entries.
pub fn max_relative_error<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>, floor: f64) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Eager;
    use crate::masks::causal_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Checks d(sum(w ⊙ f(inputs)))/d(inputs) against central differences.
    fn check_op(
        inputs: &[Matrix<f64>],
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Copy,
    ) -> f64 {
        let mut rng = rng();
        let (out, tape) = forward_record(inputs, |t, v| f(t, v)).unwrap();
        let weights = {
            let o = tape.value(&out);
            Matrix::<f64>::random_uniform(o.rows(), o.cols(), 1.0, &mut rng)
        };
        let grads = tape.backward(out, &weights).unwrap();
        let mut worst: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            let fd = finite_difference_gradient(
                |p| {
                    let mut args = inputs.to_vec();
                    args[i] = p.clone();
                    let (o, t) = forward_record(&args, |t, v| f(t, v))?;
                    Ok(t.value(&o).hadamard(&weights)?.sum())
                },
                input,
                1e-5,
            )
            .unwrap();
            let analytic = grads
                .get(Var(i))
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
            worst = worst.max(max_relative_error(&analytic, &fd, 1e-3));
        }
        worst
    }

    fn rand(r: usize, c: usize) -> Matrix<f64> {
        use std::sync::atomic::{AtomicU64, Ordering};
        static SEED: AtomicU64 = AtomicU64::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(SEED.fetch_add(1, Ordering::Relaxed));
        Matrix::random_uniform(r, c, 1.0, &mut rng)
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let cases: Vec<(&str, f64)> = vec![
            (
                "matmul",
                check_op(&[rand(3, 4), rand(4, 2)], |t, v| t.matmul(&v[0], &v[1])),
            ),
            (
                "matmul_nt",
                check_op(&[rand(3, 4), rand(5, 4)], |t, v| t.matmul_nt(&v[0], &v[1])),
            ),
            (
                "add",
                check_op(&[rand(3, 4), rand(3, 4)], |t, v| t.add(&v[0], &v[1])),
            ),
            (
                "mul",
                check_op(&[rand(3, 4), rand(3, 4)], |t, v| t.mul(&v[0], &v[1])),
            ),
            (
                "add_row",
                check_op(&[rand(3, 4), rand(1, 4)], |t, v| t.add_row(&v[0], &v[1])),
            ),
            (
                "scale",
                check_op(&[rand(2, 3)], |t, v| Ok(t.scale(&v[0], 0.37))),
            ),
            (
                "sigmoid",
                check_op(&[rand(2, 5)], |t, v| Ok(t.sigmoid(&v[0]))),
            ),
            ("gelu", check_op(&[rand(2, 5)], |t, v| Ok(t.gelu(&v[0])))),
            ("sum", check_op(&[rand(2, 5)], |t, v| Ok(t.sum(&v[0])))),
            (
                "softmax",
                check_op(&[rand(4, 4)], |t, v| {
                    let m = causal_mask(4)?;
                    t.softmax(&v[0], Some(&m))
                }),
            ),
            (
                "masked_zero",
                check_op(&[rand(4, 4)], |t, v| {
                    let m = causal_mask(4)?;
                    t.masked_zero(&v[0], &m)
                }),
            ),
            (
                "layer_norm",
                check_op(&[rand(3, 6), rand(1, 6), rand(1, 6)], |t, v| {
                    t.layer_norm(&v[0], &v[1], &v[2], 1e-5)
                }),
            ),
            (
                "rope",
                check_op(&[rand(3, 8)], |t, v| t.rope(&v[0], &[1, 5, 30], 4)),
            ),
            (
                "slice_cols",
                check_op(&[rand(3, 6)], |t, v| t.slice_cols(&v[0], 2, 3)),
            ),
            (
                "slice_rows",
                check_op(&[rand(5, 3)], |t, v| t.slice_rows(&v[0], 1, 3)),
            ),
            (
                "concat_cols",
                check_op(&[rand(3, 2), rand(3, 3)], |t, v| {
                    t.concat_cols(&[v[0], v[1], v[0]])
                }),
            ),
            (
                "gather_rows",
                check_op(&[rand(5, 3)], |t, v| t.gather_rows(&v[0], &[4, 0, 4, 2])),
            ),
            (
                "cross_entropy",
                check_op(&[rand(4, 6)], |t, v| {
                    t.cross_entropy(&v[0], &[Some(1), None, Some(5), Some(0)])
                }),
            ),
        ];
        for (name, err) in cases {
            assert!(err < 1e-6, "{name}: relative error {err}");
        }
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let (out, tape) =
            forward_record(&[Matrix::<f64>::zeros(1, 1)], |t, v| Ok(t.sigmoid(&v[0]))).unwrap();
        let g = tape.backward(out, &Matrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(g.get(Var(0)).unwrap().data(), &[0.25]);
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_b_transpose() {
        let a = rand(3, 4);
        let b = rand(4, 2);
        let (out, tape) = forward_record(&[a, b.clone()], |t, v| {
            let p = t.matmul(&v[0], &v[1])?;
            Ok(t.sum(&p))
        })
        .unwrap();
        let g = tape.backward(out, &Matrix::filled(1, 1, 1.0)).unwrap();
        let expected = numerics::matmul(&Matrix::filled(3, 2, 1.0), &b.transpose()).unwrap();
        assert!(g.get(Var(0)).unwrap().max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn masked_score_positions_get_zero_gradient() {
        let (out, tape) = forward_record(&[rand(4, 4)], |t, v| {
            let m = causal_mask(4)?;
            t.softmax(&v[0], Some(&m))
        })
        .unwrap();
        let g = tape.backward(out, &rand(4, 4)).unwrap();
        let dg = g.get(Var(0)).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(dg.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        let x = rand(2, 3);
        let f = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let s = t.sigmoid(&v[0]);
            Ok(t.sum(&s))
        };
        let (single, tape1) = forward_record(std::slice::from_ref(&x), |t, v| f(t, v)).unwrap();
        let (double, tape2) = forward_record(&[x], |t, v| {
            let a = f(t, v)?;
            let b = f(t, v)?;
            t.add(&a, &b)
        })
        .unwrap();
        let one = Matrix::filled(1, 1, 1.0);
        let g1 = tape1.backward(single, &one).unwrap();
        let g2 = tape2.backward(double, &one).unwrap();
        assert_eq!(g2.get(Var(0)).unwrap(), &g1.get(Var(0)).unwrap().scale(2.0));
    }

    #[test]
    fn recorded_values_equal_eager_values() {
        let a = rand(5, 7);
        let b = rand(7, 3);
        let (out, tape) =
            forward_record(&[a.clone(), b.clone()], |t, v| t.matmul(&v[0], &v[1])).unwrap();
        assert_eq!(tape.value(&out), &Eager.matmul(&a, &b).unwrap());
    }

    #[test]
    fn empty_computation_records_nothing() {
        let ((), tape) = forward_record::<f64, _>(&[], |_, _| Ok(())).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn unsupported_primitive_is_capability_error() {
        let err = forward_record(&[rand(1, 2)], |t, v| t.map(&v[0], "abs", f64::abs)).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
        assert_eq!(
            Eager
                .map(&Matrix::filled(1, 1, -2.0), "abs", f64::abs)
                .unwrap()
                .data(),
            &[2.0]
        );
    }

    #[test]
    fn seed_shape_is_checked() {
        let (out, tape) = forward_record(&[rand(2, 2)], |t, v| Ok(t.sigmoid(&v[0]))).unwrap();
        assert!(matches!(
            tape.backward(out, &Matrix::zeros(1, 1)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn finite_differences_on_closed_forms() {
        let lin = finite_difference_gradient(
            |p: &Matrix<f64>| Ok(3.0 * p.get(0, 0) - 2.0 * p.get(0, 1)),
            &rand(1, 2),
            0.5,
        )
        .unwrap();
        assert!((lin.get(0, 0) - 3.0).abs() < 1e-12 && (lin.get(0, 1) + 2.0).abs() < 1e-12);
        let quad = finite_difference_gradient(
            |p: &Matrix<f64>| Ok(p.get(0, 0).powi(2)),
            &Matrix::filled(1, 1, 3.0),
            1e-3,
        )
        .unwrap();
        assert!((quad.get(0, 0) - 6.0).abs() < 1e-6);
        let err = finite_difference_gradient(
            |p: &Matrix<f64>| Ok(if p.get(0, 1) > 0.0 { f64::NAN } else { 0.0 }),
            &Matrix::zeros(1, 2),
            1e-3,
        )
        .unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
    }
}
