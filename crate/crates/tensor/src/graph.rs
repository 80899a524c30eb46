use crate::error::{Result, TensorError};
use crate::matrix::{gemm_into, Matrix};
use crate::scalar::Scalar;

/// Lower clamp applied to the argument of [`Graph::log`].
pub const EPS_LOG: f64 = 1e-12;
/// Lower bound on norms used as denominators.
pub const EPS_NORM: f64 = 1e-12;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowVector(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    ScaleBy(usize, usize),
    Exp(usize),
    Log(usize, T),
    Relu(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    Diag(usize),
    RowL2Normalize(usize, T),
    SoftmaxRows(usize),
    ClampMin(usize, T),
    Select(usize, usize, usize),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Matrix<T>>,
}

/// Tape of whole-matrix operations supporting one reverse sweep.
///
/// Nodes are appended in evaluation order, so every operation's inputs have
/// smaller indices than the operation itself. Confined to a single thread.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> TensorError {
    TensorError::Shape { op, lhs, rhs }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copies `x` into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Index of the first recorded tensor holding NaN or infinity.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(Var)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        gemm_into(false, va, false, vb, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds the `1 x n` row vector `bias` to every row of `x`.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(shape_err("add_row_vector", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRowVector(x.0, bias.0), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x.0, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x.0))
    }

    /// Multiplies every entry of `x` by the `1 x 1` tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(shape_err("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(x.0, s.0), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x.0))
    }

    /// Natural log with the argument clamped below at [`EPS_LOG`].
    pub fn log(&mut self, x: Var) -> Var {
        let eps = T::from_f64_lossy(EPS_LOG);
        self.unary(x, |v| v.max(eps).ln(), Op::Log(x.0, eps))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x.0))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x.0), rg)
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of zero tensors".into()))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(shape_err("concat_cols", self.shape(first), s));
            }
            cols += s.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.len()).expect("length fits");
        let out = Matrix::scalar(v.sum() / n);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x.0), rg)
    }

    /// Per-row sums as an `n x 1` column.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows())
            .map(|r| v.row(r).iter().copied().sum())
            .collect();
        let out = Matrix::from_vec(v.rows(), 1, data).expect("n x 1");
        let rg = self.rg(x);
        self.push(out, Op::SumRows(x.0), rg)
    }

    /// Per-column sums as a `1 x m` row.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut data = vec![T::zero(); v.cols()];
        for r in 0..v.rows() {
            for (acc, &e) in data.iter_mut().zip(v.row(r)) {
                *acc += e;
            }
        }
        let out = Matrix::from_vec(1, v.cols(), data).expect("1 x m");
        let rg = self.rg(x);
        self.push(out, Op::SumCols(x.0), rg)
    }

    /// Main diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rows() != v.cols() {
            return Err(shape_err("diag", v.shape(), v.shape()));
        }
        let data = (0..v.rows()).map(|i| v.get(i, i)).collect();
        let out = Matrix::from_vec(v.rows(), 1, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Diag(x.0), rg))
    }

    /// Divides each row by `max(||row||, EPS_NORM)`.
    pub fn row_l2_normalize(&mut self, x: Var) -> Var {
        let eps = T::from_f64_lossy(EPS_NORM);
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|&e| e * e).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|e| *e /= norm);
        }
        let rg = self.rg(x);
        self.push(out, Op::RowL2Normalize(x.0, eps), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x.0), rg)
    }

    /// `max(x, floor)` element-wise; also returns how many entries were raised.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> (Var, usize) {
        let hits = self.value(x).data().iter().filter(|&&v| v < floor).count();
        let v = self.unary(x, |v| v.max(floor), Op::ClampMin(x.0, floor));
        (v, hits)
    }

    /// Single entry `x[r, c]` as a `1 x 1` tensor.
    pub fn select(&mut self, x: Var, r: usize, c: usize) -> Result<Var> {
        let s = self.shape(x);
        if r >= s.0 || c >= s.1 {
            return Err(shape_err("select", s, (r, c)));
        }
        let out = Matrix::scalar(self.value(x).get(r, c));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Select(x.0, r, c), rg))
    }

    /// Clears every gradient so that [`backward`](Self::backward) may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Propagates `d root / d x` to every tensor that requires a gradient.
    ///
    /// Returns the number of operations whose adjoint rule was applied; each
    /// recorded operation on a path to `root` is visited exactly once, in
    /// reverse recording order.
    pub fn backward(&mut self, root: Var) -> Result<usize> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarRoot(shape));
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;
        if !self.rg(root) {
            return Ok(0);
        }
        self.nodes[root.0].grad = Some(Matrix::ones(1, 1));
        let mut replayed = 0;
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(grad) = node.grad.as_ref() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            replayed += 1;
            apply_adjoint(before, node, grad);
        }
        Ok(replayed)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        total += *e;
    }
    for e in row.iter_mut() {
        *e /= total;
    }
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], idx: usize, contribution: Matrix<T>) {
    let node = &mut nodes[idx];
    match node.grad.as_mut() {
        Some(g) => g.add_assign(&contribution),
        None => node.grad = Some(contribution),
    }
}

fn accumulate_with<T: Scalar>(
    nodes: &mut [Node<T>],
    idx: usize,
    f: impl Fn(&Matrix<T>) -> Matrix<T>,
) {
    if nodes[idx].requires_grad {
        let contribution = f(&nodes[idx].value);
        accumulate(nodes, idx, contribution);
    }
}

fn elementwise<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn apply_adjoint<T: Scalar>(before: &mut [Node<T>], node: &Node<T>, g: &Matrix<T>) {
    let y = &node.value;
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if before[a].requires_grad {
                let grad_b = &before[b].value;
                let mut target = before[a]
                    .grad
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(before[a].value.rows(), grad_b.rows()));
                let beta = T::one();
                gemm_into(false, g, true, grad_b, beta, &mut target);
                before[a].grad = Some(target);
            }
            if before[b].requires_grad {
                let va = &before[a].value;
                let mut target = before[b]
                    .grad
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(va.cols(), g.cols()));
                gemm_into(true, va, false, g, T::one(), &mut target);
                before[b].grad = Some(target);
            }
        }
        Op::Add(a, b) => {
            accumulate_with(before, a, |_| g.clone());
            accumulate_with(before, b, |_| g.clone());
        }
        Op::Sub(a, b) => {
            accumulate_with(before, a, |_| g.clone());
            accumulate_with(before, b, |_| g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if before[a].requires_grad {
                let c = elementwise(g, &before[b].value, |x, y| x * y);
                accumulate(before, a, c);
            }
            if before[b].requires_grad {
                let c = elementwise(g, &before[a].value, |x, y| x * y);
                accumulate(before, b, c);
            }
        }
        Op::AddRowVector(x, bias) => {
            accumulate_with(before, x, |_| g.clone());
            if before[bias].requires_grad {
                let mut col_sums = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, &e) in col_sums.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += e;
                    }
                }
                accumulate(before, bias, col_sums);
            }
        }
        Op::Scale(x, c) => accumulate_with(before, x, |_| g.map(|v| v * c)),
        Op::AddScalar(x) => accumulate_with(before, x, |_| g.clone()),
        Op::ScaleBy(x, s) => {
            let c = before[s].value.item();
            accumulate_with(before, x, |_| g.map(|v| v * c));
            if before[s].requires_grad {
                let dot = g
                    .data()
                    .iter()
                    .zip(before[x].value.data())
                    .map(|(&a, &b)| a * b)
                    .sum();
                accumulate(before, s, Matrix::scalar(dot));
            }
        }
        Op::Exp(x) => accumulate_with(before, x, |_| elementwise(g, y, |a, b| a * b)),
        Op::Log(x, eps) => accumulate_with(before, x, |xv| {
            elementwise(g, xv, |a, b| if b > eps { a / b } else { T::zero() })
        }),
        Op::Relu(x) => accumulate_with(before, x, |xv| {
            elementwise(g, xv, |a, b| if b > T::zero() { a } else { T::zero() })
        }),
        Op::Transpose(x) => accumulate_with(before, x, |_| g.transpose()),
        Op::ConcatCols(ref parts) => {
            let mut offset = 0;
            for &p in parts {
                let (rows, cols) = before[p].value.shape();
                if before[p].requires_grad {
                    let piece = Matrix::from_fn(rows, cols, |r, c| g.get(r, offset + c));
                    accumulate(before, p, piece);
                }
                offset += cols;
            }
        }
        Op::Sum(x) => {
            let s = g.item();
            accumulate_with(before, x, |xv| Matrix::filled(xv.rows(), xv.cols(), s));
        }
        Op::Mean(x) => {
            let s = g.item();
            accumulate_with(before, x, |xv| {
                let n = T::from_usize(xv.len()).expect("length fits");
                Matrix::filled(xv.rows(), xv.cols(), s / n)
            });
        }
        Op::SumRows(x) => accumulate_with(before, x, |xv| {
            Matrix::from_fn(xv.rows(), xv.cols(), |r, _| g.get(r, 0))
        }),
        Op::SumCols(x) => accumulate_with(before, x, |xv| {
            Matrix::from_fn(xv.rows(), xv.cols(), |_, c| g.get(0, c))
        }),
        Op::Diag(x) => accumulate_with(before, x, |xv| {
            let mut d = Matrix::zeros(xv.rows(), xv.cols());
            for i in 0..xv.rows() {
                d.set(i, i, g.get(i, 0));
            }
            d
        }),
        Op::RowL2Normalize(x, eps) => accumulate_with(before, x, |xv| {
            let mut dx = Matrix::zeros(xv.rows(), xv.cols());
            for r in 0..xv.rows() {
                let norm = xv.row(r).iter().map(|&e| e * e).sum::<T>().sqrt();
                let (gy, yr) = (g.row(r), y.row(r));
                let out = dx.row_mut(r);
                if norm > eps {
                    let dot: T = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &a), &b) in out.iter_mut().zip(gy).zip(yr) {
                        *o = (a - b * dot) / norm;
                    }
                } else {
                    for (o, &a) in out.iter_mut().zip(gy) {
                        *o = a / eps;
                    }
                }
            }
            dx
        }),
        Op::SoftmaxRows(x) => accumulate_with(before, x, |xv| {
            let mut dx = Matrix::zeros(xv.rows(), xv.cols());
            for r in 0..xv.rows() {
                let (gy, yr) = (g.row(r), y.row(r));
                let dot: T = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &a), &b) in dx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                    *o = b * (a - dot);
                }
            }
            dx
        }),
        Op::ClampMin(x, floor) => accumulate_with(before, x, |xv| {
            elementwise(g, xv, |a, b| if b >= floor { a } else { T::zero() })
        }),
        Op::Select(x, r, c) => accumulate_with(before, x, |xv| {
            let mut d = Matrix::zeros(xv.rows(), xv.cols());
            d.set(r, c, g.item());
            d
        }),
    }
}
