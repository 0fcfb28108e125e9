use crate::qstate::EffectiveOperator;

use super::{AdError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MeanSquare(Var),
    ComplexNormalize { input: Var, norms: Vec<f64> },
    MeasureProb { x: Var, y: Var, dx: Vec<f64>, dy: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications in execution order. Inputs of a node
/// always precede it, so a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the parameter leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for constants and for nodes the loss does not depend on.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Moves a gradient out, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> AdError {
    AdError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = alpha * a·b + beta * c` on row-major buffers, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // Row-major `a` is [m, k] (or [k, m] when transposed); likewise `b`.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the three slices, whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value recorded by {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (va.rows(), va.cols(), vb.rows(), vb.cols());
        if k != k2 {
            return Err(mismatch("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, 0.0, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    fn broadcast_check(&self, what: &str, a: Var, b: Var) -> Result<bool, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            Ok(false)
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            Ok(true)
        } else {
            Err(mismatch(what, va.shape(), vb.shape()))
        }
    }

    /// Elementwise sum; `b` may be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.broadcast_check("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols();
        let same = vb.len() == va.len();
        let out: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data()[if same { i } else { i % cols }])
            .collect();
        let shape = va.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), needs))
    }

    /// Elementwise difference; `b` may be a broadcast row.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.broadcast_check("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols();
        let same = vb.len() == va.len();
        let out: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x - vb.data()[if same { i } else { i % cols }])
            .collect();
        let shape = va.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), needs))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("hadamard", va.shape(), vb.shape()));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Hadamard(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * factor).collect())
            .expect("shape preserved");
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, factor), needs)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        let first = parts
            .first()
            .ok_or_else(|| AdError::ShapeMismatch("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(mismatch("concat", self.value(*first).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::Concat(parts.to_vec()), needs))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice(&mut self, input: Var, start: usize, end: usize) -> Result<Var, AdError> {
        let v = self.value(input);
        if start > end || end > v.cols() {
            return Err(AdError::ShapeMismatch(format!(
                "slice {start}..{end} of {:?}",
                v.shape()
            )));
        }
        let rows = v.rows();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&v.row(r)[start..end]);
        }
        let needs = self.needs(input);
        Ok(self.push(Tensor::matrix(rows, end - start, out)?, Op::Slice { input, start }, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved");
        let needs = self.needs(a);
        self.push(out, op, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Mean of squared entries, as a `[1, 1]` scalar.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len().max(1) as f64;
        let value = va.data().iter().map(|x| x * x).sum::<f64>() / n;
        let needs = self.needs(a);
        self.push(Tensor::scalar(value), Op::MeanSquare(a), needs)
    }

    /// Row-wise normalization of interleaved complex amplitudes. Rows with a
    /// norm below [`crate::qstate::ZERO_NORM`] map to `|0>` with zero gradient.
    pub fn complex_normalize(&mut self, a: Var) -> Result<Var, AdError> {
        let va = self.value(a);
        if !va.cols().is_multiple_of(2) || va.cols() == 0 {
            return Err(AdError::ShapeMismatch(format!(
                "complex_normalize needs an even, nonzero width, got {:?}",
                va.shape()
            )));
        }
        let (rows, cols) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(rows * cols);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = va.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(norm);
            if norm < crate::qstate::ZERO_NORM {
                out.push(1.0);
                out.extend(std::iter::repeat_n(0.0, cols - 1));
            } else {
                out.extend(row.iter().map(|x| x / norm));
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ComplexNormalize { input: a, norms },
            needs,
        ))
    }

    /// Collective measurement probability per row: `x`, `y` are raw projector
    /// parameters `[rows, 2·d]`, `operators[r]` the effective operator of row `r`.
    /// Output `[rows, 1]`.
    pub fn measure_prob(&mut self, x: Var, y: Var, operators: &[&EffectiveOperator]) -> Result<Var, AdError> {
        let (vx, vy) = (self.value(x), self.value(y));
        let rows = vx.rows();
        if vy.rows() != rows || operators.len() != rows {
            return Err(AdError::ShapeMismatch(format!(
                "measure_prob rows: x {}, y {}, operators {}",
                rows,
                vy.rows(),
                operators.len()
            )));
        }
        for op in operators {
            let want = op.system().param_len();
            if vx.cols() != want || vy.cols() != want {
                return Err(mismatch("measure_prob params", vx.shape(), vy.shape()));
            }
        }
        let width = vx.cols();
        let needs = self.needs(x) || self.needs(y);
        let mut probs = Vec::with_capacity(rows);
        let (mut dx, mut dy) = if needs {
            (vec![0.0; rows * width], vec![0.0; rows * width])
        } else {
            (Vec::new(), Vec::new())
        };
        for (r, op) in operators.iter().enumerate() {
            let grads = if needs {
                Some((
                    &mut dx[r * width..(r + 1) * width],
                    &mut dy[r * width..(r + 1) * width],
                ))
            } else {
                None
            };
            probs.push(op.evaluate(vx.row(r), vy.row(r), grads));
        }
        Ok(self.push(Tensor::matrix(rows, 1, probs)?, Op::MeasureProb { x, y, dx, dy }, needs))
    }

    /// Reverse sweep from a scalar node. Gradients are summed over all paths.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AdError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AdError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        // Only parameter leaves keep their gradient.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Param) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    self.accumulate_with(grads, *a, |buf, beta| {
                        gemm(m, n, k, gd, false, vb.data(), true, beta, buf)
                    });
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    self.accumulate_with(grads, *b, |buf, beta| {
                        gemm(k, m, n, va.data(), true, gd, false, beta, buf)
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    self.accumulate(grads, *a, gd.iter().copied());
                }
                if self.needs(*b) {
                    let vb = self.value(*b);
                    if vb.len() == gd.len() {
                        self.accumulate(grads, *b, gd.iter().map(|x| sign * x));
                    } else {
                        let cols = vb.cols();
                        let mut col_sums = vec![0.0; cols];
                        for row in gd.chunks_exact(cols) {
                            for (s, x) in col_sums.iter_mut().zip(row) {
                                *s += sign * x;
                            }
                        }
                        self.accumulate(grads, *b, col_sums.into_iter());
                    }
                }
            }
            Op::Hadamard(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(vb.data()).map(|(g, y)| g * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(va.data()).map(|(g, x)| g * x));
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * f));
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if self.needs(p) {
                        let piece = gd
                            .chunks_exact(total)
                            .flat_map(|row| row[offset..offset + width].iter().copied());
                        self.accumulate(grads, p, piece);
                    }
                    offset += width;
                }
            }
            Op::Slice { input, start } => {
                let vi = self.value(*input);
                let (rows, cols) = (vi.rows(), vi.cols());
                let width = node.value.cols();
                let mut full = vec![0.0; rows * cols];
                for r in 0..rows {
                    full[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&gd[r * width..(r + 1) * width]);
                }
                self.accumulate(grads, *input, full.into_iter());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, gd.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }));
            }
            Op::MeanSquare(a) => {
                let x = self.value(*a).data();
                let f = 2.0 * gd[0] / x.len().max(1) as f64;
                self.accumulate(grads, *a, x.iter().map(|x| f * x));
            }
            Op::ComplexNormalize { input, norms } => {
                let u = node.value.data();
                let cols = node.value.cols();
                let mut out = vec![0.0; u.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    if norm < crate::qstate::ZERO_NORM {
                        continue;
                    }
                    let (gr, ur) = (&gd[r * cols..(r + 1) * cols], &u[r * cols..(r + 1) * cols]);
                    let radial: f64 = gr.iter().zip(ur).map(|(g, u)| g * u).sum();
                    for (o, (g, u)) in out[r * cols..(r + 1) * cols].iter_mut().zip(gr.iter().zip(ur)) {
                        *o = (g - radial * u) / norm;
                    }
                }
                self.accumulate(grads, *input, out.into_iter());
            }
            Op::MeasureProb { x, y, dx, dy } => {
                let width = self.value(*x).cols();
                let rows_scaled = |local: &[f64]| {
                    local
                        .chunks_exact(width)
                        .zip(gd)
                        .flat_map(|(row, g)| row.iter().map(move |d| d * g))
                        .collect::<Vec<_>>()
                };
                if self.needs(*x) {
                    self.accumulate(grads, *x, rows_scaled(dx).into_iter());
                }
                if self.needs(*y) {
                    self.accumulate(grads, *y, rows_scaled(dy).into_iter());
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, contribution: impl Iterator<Item = f64>) {
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => {
                let shape = self.value(var).shape().to_vec();
                let data: Vec<f64> = contribution.collect();
                debug_assert_eq!(data.len(), shape.iter().product::<usize>());
                *slot = Some(Tensor::new(shape, data).expect("gradient matches value shape"));
            }
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], var: Var, write: impl FnOnce(&mut [f64], f64)) {
        match &mut grads[var.0] {
            Some(existing) => write(existing.data_mut(), 1.0),
            slot @ None => {
                let mut t = Tensor::zeros(self.value(var).shape());
                write(t.data_mut(), 0.0);
                *slot = Some(t);
            }
        }
    }
}
