use super::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Relu,
    Square,
    Sqrt,
    Neg,
    /// `ln(1 + e^x)`, evaluated without overflow.
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Scalar(BinaryOp, Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Unary(UnaryOp, Var),
    Reduce(ReduceOp, Var, Option<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of forward operations.
///
/// Node indices are assigned in creation order, which is already a
/// topological order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    relu_kinks: usize,
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

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Number of relu inputs seen exactly at the kink.
    pub fn relu_kinks(&self) -> usize {
        self.relu_kinks
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::ShapeMismatch {
                op: binary_name(op),
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            }
        })?;
        if op == BinaryOp::Div && tb.data().iter().any(|&v| v == 0.0) {
            return Err(Error::DivideByZero);
        }
        let f = binary_fn(op);
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            data
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Binary(op, a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Div, a, b)
    }

    /// `a <op> s` for a plain scalar `s`.
    pub fn scalar_op(&mut self, op: BinaryOp, a: Var, s: f64) -> Result<Var> {
        if op == BinaryOp::Div && s == 0.0 {
            return Err(Error::DivideByZero);
        }
        let f = binary_fn(op);
        let value = self.value(a).map(|x| f(x, s));
        let rg = self.needs(a);
        Ok(self.push(value, Op::Scalar(op, a, s), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.scalar_op(BinaryOp::Add, a, s).expect("add never fails")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.scalar_op(BinaryOp::Mul, a, s).expect("mul never fails")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut data, false);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::Matmul(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::invalid(format!(
                "transpose needs a matrix, got {:?}",
                ta.shape()
            )));
        }
        let value = transposed(ta);
        let rg = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let ta = self.value(a);
        match op {
            UnaryOp::Ln | UnaryOp::Sqrt => {
                if let Some(&bad) = ta.data().iter().find(|&&v| !(v > 0.0)) {
                    return Err(Error::Domain {
                        op: if op == UnaryOp::Ln { "ln" } else { "sqrt" },
                        value: bad,
                    });
                }
            }
            UnaryOp::Relu => {
                self.relu_kinks += ta.data().iter().filter(|&&v| v == 0.0).count();
            }
            _ => {}
        }
        let value = self.value(a).map(unary_fn(op));
        let rg = self.needs(a);
        Ok(self.push(value, Op::Unary(op, a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("exp is total")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Ln, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a).expect("tanh is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a).expect("relu is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a).expect("square is total")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a).expect("neg is total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a).expect("softplus is total")
    }

    /// Sum or mean over one axis (removing it), or over the whole tensor when
    /// `axis` is `None` (yielding a rank-0 scalar).
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let ta = self.value(a);
        let value = match axis {
            None => {
                let mut acc = 0.0;
                for &v in ta.data() {
                    acc += v;
                }
                if op == ReduceOp::Mean {
                    acc /= ta.numel() as f64;
                }
                Tensor::scalar(acc)
            }
            Some(ax) => {
                if ax >= ta.rank() {
                    return Err(Error::AxisOutOfRange {
                        axis: ax,
                        rank: ta.rank(),
                    });
                }
                let (outer, len, inner) = split_axis(ta.shape(), ax);
                let mut data = vec![0.0; outer * inner];
                let src = ta.data();
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        let dst = &mut data[o * inner..(o + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                            *d += s;
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    let scale = 1.0 / len as f64;
                    data.iter_mut().for_each(|v| *v *= scale);
                }
                let mut shape = ta.shape().to_vec();
                shape.remove(ax);
                Tensor { shape, data }
            }
        };
        let rg = self.needs(a);
        Ok(self.push(value, Op::Reduce(op, a, axis), rg))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Sum, a, None).expect("whole-tensor sum")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Mean, a, None).expect("whole-tensor mean")
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => node.grad = Some(g),
                    }
                }
                Op::Binary(op, a, b) => self.backward_binary(&mut grads, i, op, a, b, &g),
                Op::Scalar(op, a, s) => {
                    if self.needs(a) {
                        let x = self.value(a).data();
                        let ga: Vec<f64> = match op {
                            BinaryOp::Add | BinaryOp::Sub => g,
                            BinaryOp::Mul => g.iter().map(|v| v * s).collect(),
                            BinaryOp::Div => g.iter().map(|v| v / s).collect(),
                        };
                        debug_assert_eq!(ga.len(), x.len());
                        accumulate(&mut grads, a, ga);
                    }
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if self.needs(a) {
                        // dA = dC · Bᵀ
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, &g, (n, 1), tb.data(), (1, n), &mut ga, false);
                        accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        // dB = Aᵀ · dC
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), (1, k), &g, (n, 1), &mut gb, false);
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let shape = self.nodes[i].value.shape.clone();
                    let gt = transposed(&Tensor { shape, data: g });
                    accumulate(&mut grads, a, gt.data);
                }
                Op::Unary(op, a) => {
                    let x = self.value(a).data();
                    let y = self.nodes[i].value.data();
                    let ga: Vec<f64> = (0..g.len())
                        .map(|j| g[j] * unary_derivative(op, x[j], y[j]))
                        .collect();
                    accumulate(&mut grads, a, ga);
                }
                Op::Reduce(op, a, axis) => {
                    let ta = self.value(a);
                    let mut ga = vec![0.0; ta.numel()];
                    match axis {
                        None => {
                            let scale = match op {
                                ReduceOp::Sum => g[0],
                                ReduceOp::Mean => g[0] / ta.numel() as f64,
                            };
                            ga.iter_mut().for_each(|v| *v = scale);
                        }
                        Some(ax) => {
                            let (outer, len, inner) = split_axis(ta.shape(), ax);
                            let scale = match op {
                                ReduceOp::Sum => 1.0,
                                ReduceOp::Mean => 1.0 / len as f64,
                            };
                            for o in 0..outer {
                                let src = &g[o * inner..(o + 1) * inner];
                                for l in 0..len {
                                    let base = (o * len + l) * inner;
                                    for (d, &s) in ga[base..base + inner].iter_mut().zip(src) {
                                        *d = s * scale;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
            }
        }
        Ok(())
    }

    fn backward_binary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        out: usize,
        op: BinaryOp,
        a: Var,
        b: Var,
        g: &[f64],
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.data(), tb.data());
        let (need_a, need_b) = (self.needs(a), self.needs(b));
        let mut ga = vec![0.0; if need_a { da.len() } else { 0 }];
        let mut gb = vec![0.0; if need_b { db.len() } else { 0 }];
        let mut visit = |o: usize, ia: usize, ib: usize| {
            let (x, y, go) = (da[ia], db[ib], g[o]);
            let (dx, dy) = match op {
                BinaryOp::Add => (go, go),
                BinaryOp::Sub => (go, -go),
                BinaryOp::Mul => (go * y, go * x),
                BinaryOp::Div => (go / y, -go * x / (y * y)),
            };
            if need_a {
                ga[ia] += dx;
            }
            if need_b {
                gb[ib] += dy;
            }
        };
        if ta.shape() == tb.shape() {
            for o in 0..g.len() {
                visit(o, o, o);
            }
        } else {
            let out_shape = &self.nodes[out].value.shape;
            let sa = broadcast_strides(ta.shape(), out_shape);
            let sb = broadcast_strides(tb.shape(), out_shape);
            for_each_broadcast(out_shape, &sa, &sb, visit);
        }
        if need_a {
            accumulate(grads, a, ga);
        }
        if need_b {
            accumulate(grads, b, gb);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn split_axis(shape: &[usize], ax: usize) -> (usize, usize, usize) {
    let outer = shape[..ax].iter().product();
    let inner = shape[ax + 1..].iter().product();
    (outer, shape[ax], inner)
}

fn transposed(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape[0], t.shape[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data,
    }
}

/// `C (+)= A·B` with explicit (row, col) strides for `A` and `B`; `C` is
/// dense row-major `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides (checked above), and `c` does not alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

fn binary_fn(op: BinaryOp) -> fn(f64, f64) -> f64 {
    match op {
        BinaryOp::Add => |x, y| x + y,
        BinaryOp::Sub => |x, y| x - y,
        BinaryOp::Mul => |x, y| x * y,
        BinaryOp::Div => |x, y| x / y,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_fn(op: UnaryOp) -> fn(f64) -> f64 {
    match op {
        UnaryOp::Exp => f64::exp,
        UnaryOp::Ln => f64::ln,
        UnaryOp::Sigmoid => sigmoid,
        UnaryOp::Tanh => f64::tanh,
        UnaryOp::Relu => |x| x.max(0.0),
        UnaryOp::Square => |x| x * x,
        UnaryOp::Sqrt => f64::sqrt,
        UnaryOp::Neg => |x| -x,
        UnaryOp::Softplus => softplus,
    }
}

/// d(output)/d(input) given input `x` and cached output `y`.
fn unary_derivative(op: UnaryOp, x: f64, y: f64) -> f64 {
    match op {
        UnaryOp::Exp => y,
        UnaryOp::Ln => 1.0 / x,
        UnaryOp::Sigmoid => y * (1.0 - y),
        UnaryOp::Tanh => 1.0 - y * y,
        // subgradient 0 at the kink
        UnaryOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::Square => 2.0 * x,
        UnaryOp::Sqrt => 0.5 / y,
        UnaryOp::Neg => -1.0,
        UnaryOp::Softplus => sigmoid(x),
    }
}
