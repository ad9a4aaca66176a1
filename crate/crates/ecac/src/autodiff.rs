//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] evaluates primitive operations eagerly and records them; a
//! backward sweep over the recording yields exact gradients of a scalar
//! output with respect to every leaf registered as a parameter. Nodes are
//! created in topological order, so replaying the record in reverse visits
//! each node after all of its consumers, and adjoints accumulate additively
//! when a node is consumed more than once.
//!
//! Elementwise binaries broadcast only over a leading batch dimension
//! (`[n, m] op [m]` and the mirror case); anything richer is out of scope.
//! Every completed operation is checked for non-finite values.

use crate::error::{Error, Result};

const FINITE_CHECK: bool = true;

/// Dense real tensor: a shape plus row-major `f64` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Array> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != values.len() {
            return Err(Error::BadArray {
                shape,
                len: values.len(),
            });
        }
        let arr = Array { shape, values };
        arr.check_finite("Array::new")?;
        Ok(arr)
    }

    pub fn zeros(shape: Vec<usize>) -> Array {
        let numel = shape.iter().product();
        Array {
            shape,
            values: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, fill: f64) -> Array {
        let numel = shape.iter().product();
        Array {
            shape,
            values: vec![fill; numel],
        }
    }

    pub fn scalar(v: f64) -> Array {
        Array {
            shape: vec![1],
            values: vec![v],
        }
    }

    /// 1-d array from a value list.
    pub fn vector(values: Vec<f64>) -> Array {
        Array {
            shape: vec![values.len()],
            values,
        }
    }

    /// 2-d array from row-major values.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Array> {
        Array::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// The single element of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.values[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if FINITE_CHECK && !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite(context));
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    /// rhs is broadcast across lhs's leading batch dimension
    Rhs,
    /// lhs is broadcast across rhs's leading batch dimension
    Lhs,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.len() == b.len() + 1 && &a[1..] == b {
        Ok(Broadcast::Rhs)
    } else if b.len() == a.len() + 1 && &b[1..] == a {
        Ok(Broadcast::Lhs)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: bool },
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Min(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Clamp(usize, f64, f64),
    /// Column slice [start, end) of a 2-d input.
    SliceCols(usize, usize, usize),
    /// Column-wise concatenation of two 2-d inputs.
    ConcatCols(usize, usize),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Evaluation record. Operations compute eagerly and append a node; the
/// backward sweep consumes the record in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output, indexed by tape node.
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, zeros if the output does not depend on it.
    pub fn grad(&self, v: Var) -> Array {
        match &self.adjoints[v.0] {
            Some(g) => Array {
                shape: self.shapes[v.0].clone(),
                values: g.clone(),
            },
            None => Array::zeros(self.shapes[v.0].clone()),
        }
    }
}

/// `c = alpha * op(a) @ op(b) + beta * c` with optional transposes.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
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
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Register a constant leaf. No gradient is tracked through it.
    pub fn input(&mut self, value: Array) -> Var {
        self.push_node(value, Op::Leaf { param: false }, false)
    }

    /// Register a parameter leaf; `backpropagate` reports its gradient.
    pub fn param(&mut self, value: Array) -> Var {
        self.push_node(value, Op::Leaf { param: true }, true)
    }

    fn push_node(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, context: &'static str, value: Array, op: Op) -> Result<Var> {
        value.check_finite(context)?;
        let needs_grad = match &op {
            Op::Leaf { param } => *param,
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::Min(a, b) => {
                self.nodes[*a].needs_grad || self.nodes[*b].needs_grad
            }
            Op::MatMul(a, b) | Op::ConcatCols(a, b) => {
                self.nodes[*a].needs_grad || self.nodes[*b].needs_grad
            }
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Clamp(a, _, _)
            | Op::SliceCols(a, _, _) => self.nodes[*a].needs_grad,
        };
        Ok(self.push_node(value, op, needs_grad))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let kind = broadcast_kind(op_name, &va.shape, &vb.shape)?;
        let value = match kind {
            Broadcast::Same => Array {
                shape: va.shape.clone(),
                values: va
                    .values
                    .iter()
                    .zip(&vb.values)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            },
            Broadcast::Rhs => {
                let w = vb.values.len();
                Array {
                    shape: va.shape.clone(),
                    values: va
                        .values
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, vb.values[i % w]))
                        .collect(),
                }
            }
            Broadcast::Lhs => {
                let w = va.values.len();
                Array {
                    shape: vb.shape.clone(),
                    values: vb
                        .values
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| f(va.values[i % w], y))
                        .collect(),
                }
            }
        };
        self.push_op(op_name, value, make(a.0, b.0, kind))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise minimum. The backward pass routes the whole adjoint to
    /// the smaller operand; ties go to the first operand.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(Error::ShapeMismatch {
                op: "min",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let value = Array {
            shape: va.shape.clone(),
            values: va
                .values
                .iter()
                .zip(&vb.values)
                .map(|(&x, &y)| if x <= y { x } else { y })
                .collect(),
        };
        self.push_op("min", value, Op::Min(a.0, b.0))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (n, k, m) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, &va.values, false, &vb.values, false, 0.0, &mut out);
        self.push_op(
            "matmul",
            Array {
                shape: vec![n, m],
                values: out,
            },
            Op::MatMul(a.0, b.0),
        )
    }

    /// Rectified linear unit; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op("relu", value, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(f64::tanh);
        self.push_op("tanh", value, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(f64::exp);
        self.push_op("exp", value, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(f64::ln);
        self.push_op("log", value, Op::Log(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x * x);
        self.push_op("square", value, Op::Square(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(f64::abs);
        self.push_op("abs", value, Op::Abs(a.0))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.values.iter().sum();
        self.push_op("sum", Array::scalar(s), Op::Sum(a.0))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.values.iter().sum::<f64>() / v.numel() as f64;
        self.push_op("mean", Array::scalar(s), Op::Mean(a.0))
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| c * x);
        self.push_op("scale", value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x + c);
        self.push_op("add_scalar", value, Op::AddScalar(a.0))
    }

    /// Clamp to `[lo, hi]`. Gradient passes where the input lies inside the
    /// (closed) interval and is 0 where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        self.push_op("clamp", value, Op::Clamp(a.0, lo, hi))
    }

    /// Columns `[start, end)` of a 2-d input.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.shape.len() != 2 || start >= end || end > v.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: v.shape.clone(),
                rhs: vec![start, end],
            });
        }
        let (rows, cols, w) = (v.shape[0], v.shape[1], end - start);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&v.values[r * cols + start..r * cols + end]);
        }
        self.push_op(
            "slice_cols",
            Array {
                shape: vec![rows, w],
                values: out,
            },
            Op::SliceCols(a.0, start, end),
        )
    }

    /// `[n, p] ++ [n, q] -> [n, p + q]` column-wise.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[0] != vb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (rows, p, q) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&va.values[r * p..(r + 1) * p]);
            out.extend_from_slice(&vb.values[r * q..(r + 1) * q]);
        }
        self.push_op(
            "concat_cols",
            Array {
                shape: vec![rows, p + q],
                values: out,
            },
            Op::ConcatCols(a.0, b.0),
        )
    }

    /// Reverse sweep from a scalar output. Pure: the tape is unchanged and
    /// repeated calls return bit-identical gradients.
    pub fn backpropagate(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.numel() != 1 {
            return Err(Error::NonScalarOutput {
                shape: out_node.value.shape.clone(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            let Some(d_out) = adj[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backward_op(id, &d_out, &mut adj);
            adj[id] = Some(d_out);
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            adjoints: adj,
        })
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], target: usize, grad: &[f64]) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut adj[target] {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => adj[target] = Some(grad.to_vec()),
        }
    }

    /// Accumulate a possibly batch-broadcast operand's adjoint: when the
    /// operand was broadcast, partials sum over the leading dimension.
    fn accumulate_broadcast(
        &self,
        adj: &mut [Option<Vec<f64>>],
        target: usize,
        grad: &[f64],
        broadcast: bool,
    ) {
        if !broadcast {
            self.accumulate(adj, target, grad);
            return;
        }
        if !self.nodes[target].needs_grad {
            return;
        }
        let w = self.nodes[target].value.numel();
        let mut reduced = vec![0.0; w];
        for (i, g) in grad.iter().enumerate() {
            reduced[i % w] += g;
        }
        self.accumulate(adj, target, &reduced);
    }

    fn backward_op(&self, id: usize, d_out: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b, k) => {
                self.accumulate_broadcast(adj, *a, d_out, matches!(k, Broadcast::Lhs));
                self.accumulate_broadcast(adj, *b, d_out, matches!(k, Broadcast::Rhs));
            }
            Op::Sub(a, b, k) => {
                self.accumulate_broadcast(adj, *a, d_out, matches!(k, Broadcast::Lhs));
                let neg: Vec<f64> = d_out.iter().map(|g| -g).collect();
                self.accumulate_broadcast(adj, *b, &neg, matches!(k, Broadcast::Rhs));
            }
            Op::Mul(a, b, k) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (wa, wb) = (va.numel(), vb.numel());
                let da: Vec<f64> = d_out
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * vb.values[i % wb])
                    .collect();
                self.accumulate_broadcast(adj, *a, &da, matches!(k, Broadcast::Lhs));
                let db: Vec<f64> = d_out
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * va.values[i % wa])
                    .collect();
                self.accumulate_broadcast(adj, *b, &db, matches!(k, Broadcast::Rhs));
            }
            Op::Min(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut da = vec![0.0; d_out.len()];
                let mut db = vec![0.0; d_out.len()];
                for i in 0..d_out.len() {
                    if va.values[i] <= vb.values[i] {
                        da[i] = d_out[i];
                    } else {
                        db[i] = d_out[i];
                    }
                }
                self.accumulate(adj, *a, &da);
                self.accumulate(adj, *b, &db);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k, m) = (va.shape[0], va.shape[1], vb.shape[1]);
                // dA = dY . B^T ; dB = A^T . dY
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, d_out, false, &vb.values, true, 0.0, &mut da);
                    self.accumulate(adj, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, &va.values, true, d_out, false, 0.0, &mut db);
                    self.accumulate(adj, *b, &db);
                }
            }
            Op::Relu(a) => {
                let va = &self.nodes[*a].value;
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&va.values)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(adj, *a, &da);
            }
            Op::Tanh(a) => {
                let out = &self.nodes[id].value;
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&out.values)
                    .map(|(g, &y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(adj, *a, &da);
            }
            Op::Exp(a) => {
                let out = &self.nodes[id].value;
                let da: Vec<f64> = d_out.iter().zip(&out.values).map(|(g, &y)| g * y).collect();
                self.accumulate(adj, *a, &da);
            }
            Op::Log(a) => {
                let va = &self.nodes[*a].value;
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&va.values)
                    .map(|(g, &x)| g / x)
                    .collect();
                self.accumulate(adj, *a, &da);
            }
            Op::Square(a) => {
                let va = &self.nodes[*a].value;
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&va.values)
                    .map(|(g, &x)| g * 2.0 * x)
                    .collect();
                self.accumulate(adj, *a, &da);
            }
            Op::Abs(a) => {
                // subgradient at 0 is 0, matching relu's convention
                let va = &self.nodes[*a].value;
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&va.values)
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(adj, *a, &da);
            }
            Op::Sum(a) => {
                let w = self.nodes[*a].value.numel();
                self.accumulate(adj, *a, &vec![d_out[0]; w]);
            }
            Op::Mean(a) => {
                let w = self.nodes[*a].value.numel();
                self.accumulate(adj, *a, &vec![d_out[0] / w as f64; w]);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = d_out.iter().map(|g| g * c).collect();
                self.accumulate(adj, *a, &da);
            }
            Op::AddScalar(a) => {
                self.accumulate(adj, *a, d_out);
            }
            Op::Clamp(a, lo, hi) => {
                let va = &self.nodes[*a].value;
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&va.values)
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(adj, *a, &da);
            }
            Op::SliceCols(a, start, end) => {
                let va = &self.nodes[*a].value;
                let (rows, cols, w) = (va.shape[0], va.shape[1], end - start);
                let mut da = vec![0.0; va.numel()];
                for r in 0..rows {
                    da[r * cols + start..r * cols + end]
                        .copy_from_slice(&d_out[r * w..(r + 1) * w]);
                }
                self.accumulate(adj, *a, &da);
            }
            Op::ConcatCols(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (rows, p, q) = (va.shape[0], va.shape[1], vb.shape[1]);
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; rows * p];
                    for r in 0..rows {
                        da[r * p..(r + 1) * p]
                            .copy_from_slice(&d_out[r * (p + q)..r * (p + q) + p]);
                    }
                    self.accumulate(adj, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![0.0; rows * q];
                    for r in 0..rows {
                        db[r * q..(r + 1) * q]
                            .copy_from_slice(&d_out[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                    self.accumulate(adj, *b, &db);
                }
            }
        }
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `f` must deterministically build a scalar from parameter leaves it
/// registers via the supplied tape. Returns the maximum over parameter
/// coordinates of `|analytic - central_difference| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(f: F, params: &[Array], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite_difference_check requires h > 0");
    let eval = |ps: &[Array]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backpropagate(out)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Array> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.grad(*var);
        for ci in 0..params[pi].numel() {
            let orig = work[pi].values[ci];
            work[pi].values[ci] = orig + h;
            let plus = eval(&work)?;
            work[pi].values[ci] = orig - h;
            let minus = eval(&work)?;
            work[pi].values[ci] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.values[ci];
            let err = (a - fd).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normals, substream};

    fn arr(shape: Vec<usize>, values: Vec<f64>) -> Array {
        Array::new(shape, values).unwrap()
    }

    #[test]
    fn matmul_identity_preserves_operand() {
        let eye = arr(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let m = arr(vec![3, 3], vec![2., -1., 3., 0., 5., 7., 1., 1., 4.]);
        let mut tape = Tape::new();
        let a = tape.input(eye);
        let b = tape.input(m.clone());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &m);
    }

    #[test]
    fn relu_and_min_definitions() {
        let mut tape = Tape::new();
        let x = tape.input(Array::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).values(), &[0.0, 0.0, 2.0]);

        let a = tape.input(Array::vector(vec![3.0, 5.0]));
        let b = tape.input(Array::vector(vec![4.0, 2.0]));
        let m = tape.min(a, b).unwrap();
        assert_eq!(tape.value(m).values(), &[3.0, 2.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(Array::scalar(3.0));
        let y = tape.square(x).unwrap();
        let grads = tape.backpropagate(y).unwrap();
        assert_eq!(grads.grad(x).values(), &[6.0]);
    }

    #[test]
    fn relu_gradient_convention() {
        for (x, expected) in [(-1.0, 0.0), (2.0, 1.0), (0.0, 0.0)] {
            let mut tape = Tape::new();
            let v = tape.param(Array::scalar(x));
            let r = tape.relu(v).unwrap();
            let s = tape.sum(r).unwrap();
            let grads = tape.backpropagate(s).unwrap();
            assert_eq!(grads.grad(v).values(), &[expected], "at x={x}");
        }
    }

    #[test]
    fn min_routes_adjoint_to_smaller_and_ties_to_first() {
        let mut tape = Tape::new();
        let a = tape.param(Array::vector(vec![1.0, 5.0, 2.0]));
        let b = tape.param(Array::vector(vec![3.0, 4.0, 2.0]));
        let m = tape.min(a, b).unwrap();
        let s = tape.sum(m).unwrap();
        let grads = tape.backpropagate(s).unwrap();
        assert_eq!(grads.grad(a).values(), &[1.0, 0.0, 1.0]);
        assert_eq!(grads.grad(b).values(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn disconnected_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Array::scalar(1.0));
        let unused = tape.param(Array::vector(vec![1.0, 2.0]));
        let y = tape.square(x).unwrap();
        let grads = tape.backpropagate(y).unwrap();
        assert_eq!(grads.grad(unused).values(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(Array::vector(vec![1.0, 2.0]));
        let y = tape.square(x).unwrap();
        assert!(matches!(
            tape.backpropagate(y),
            Err(Error::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Array::zeros(vec![2, 3]));
        let b = tape.input(Array::zeros(vec![4, 2]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn log_of_zero_is_a_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.input(Array::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn gradient_accumulates_over_repeated_consumption() {
        // y = x*x + x  => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Array::scalar(4.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let grads = tape.backpropagate(y).unwrap();
        assert_eq!(grads.grad(x).values(), &[9.0]);
    }

    #[test]
    fn bias_broadcast_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.input(arr(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let b = tape.param(Array::vector(vec![10., 20., 30.]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).values(), &[11., 22., 33., 14., 25., 36.]);
        let s = tape.sum(y).unwrap();
        let grads = tape.backpropagate(s).unwrap();
        // bias partials sum over the batch dimension
        assert_eq!(grads.grad(b).values(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_rule_holds_within_tolerance() {
        let mut rng = substream(11, "sumrule");
        let x0 = Array::vector(standard_normals(&mut rng, 8));

        let grad_of = |build: &dyn Fn(&mut Tape, Var) -> Var, x: &Array| -> Array {
            let mut tape = Tape::new();
            let v = tape.param(x.clone());
            let out = build(&mut tape, v);
            tape.backpropagate(out).unwrap().grad(v)
        };

        let f = |tape: &mut Tape, v: Var| {
            let s = tape.square(v).unwrap();
            tape.sum(s).unwrap()
        };
        let g = |tape: &mut Tape, v: Var| {
            let t = tape.tanh(v).unwrap();
            tape.mean(t).unwrap()
        };
        let fg = |tape: &mut Tape, v: Var| {
            let a = f(tape, v);
            let b = g(tape, v);
            tape.add(a, b).unwrap()
        };

        let gf = grad_of(&f, &x0);
        let gg = grad_of(&g, &x0);
        let gfg = grad_of(&fg, &x0);
        for i in 0..x0.numel() {
            assert!((gfg.values()[i] - gf.values()[i] - gg.values()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut rng = substream(3, "replay-tape");
        let mut tape = Tape::new();
        let x = tape.param(Array::vector(standard_normals(&mut rng, 16)));
        let e = tape.exp(x).unwrap();
        let t = tape.tanh(e).unwrap();
        let m = tape.mean(t).unwrap();
        let g1 = tape.backpropagate(m).unwrap().grad(x);
        let g2 = tape.backpropagate(m).unwrap().grad(x);
        assert_eq!(g1.values(), g2.values());
    }

    #[test]
    fn fd_check_quadratic_is_tight() {
        let err = finite_difference_check(
            |tape, vars| tape.square(vars[0]),
            &[Array::scalar(3.0)],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "err={err}");
    }

    #[test]
    fn fd_check_dead_relu_is_exact_zero() {
        // w feeds a relu that is firmly off: both analytic and both FD
        // evaluations are zero on w.
        let err = finite_difference_check(
            |tape, vars| {
                let x = tape.input(Array::scalar(-5.0));
                let wx = tape.mul(vars[0], x)?;
                let r = tape.relu(wx)?;
                tape.sum(r)
            },
            &[Array::scalar(1.0)],
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_check_two_layer_mlp_loss() {
        let mut rng = substream(5, "fd-mlp");
        let w1 = arr(vec![3, 8], standard_normals(&mut rng, 24));
        let b1 = Array::vector(standard_normals(&mut rng, 8));
        let w2 = arr(vec![8, 1], standard_normals(&mut rng, 8));
        let x = arr(vec![4, 3], standard_normals(&mut rng, 12));
        let err = finite_difference_check(
            |tape, vars| {
                let xv = tape.input(x.clone());
                let h = tape.matmul(xv, vars[0])?;
                let h = tape.add(h, vars[1])?;
                let h = tape.relu(h)?;
                let out = tape.matmul(h, vars[2])?;
                let sq = tape.square(out)?;
                tape.mean(sq)
            },
            &[w1, b1, w2],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "err={err}");
    }

    #[test]
    fn every_primitive_passes_fd_at_random_points() {
        // 100 random points across the primitive set, h = 1e-6, 64-bit.
        let mut rng = substream(17, "prims");
        for trial in 0..100 {
            let x = Array::vector(standard_normals(&mut rng, 6));
            let y = Array::vector(standard_normals(&mut rng, 6));
            let err = finite_difference_check(
                |tape, vars| {
                    let (a, b) = (vars[0], vars[1]);
                    let s = tape.add(a, b)?;
                    let d = tape.sub(a, b)?;
                    let m = tape.mul(s, d)?;
                    let t = tape.tanh(m)?;
                    let e = tape.exp(t)?;
                    let l = tape.log(e)?; // e > 0 always
                    let q = tape.square(l)?;
                    let ab = tape.abs(q)?;
                    let mn = tape.min(ab, s)?;
                    let r = tape.relu(mn)?;
                    let c = tape.clamp(r, -0.5, 0.5)?;
                    let sc = tape.scale(c, 1.7)?;
                    let sh = tape.add_scalar(sc, 0.3)?;
                    tape.mean(sh)
                },
                &[x, y],
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-4, "trial {trial}: err={err}");
        }
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let mut rng = substream(23, "mmgrad");
        let w = arr(vec![3, 4], standard_normals(&mut rng, 12));
        let x = arr(vec![2, 3], standard_normals(&mut rng, 6));
        let err = finite_difference_check(
            |tape, vars| {
                let xv = tape.input(x.clone());
                let y = tape.matmul(xv, vars[0])?;
                tape.mean(y)
            },
            &[w],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "err={err}");
    }

    #[test]
    fn slice_and_concat_roundtrip_gradients() {
        let mut rng = substream(29, "slice");
        let x = arr(vec![3, 5], standard_normals(&mut rng, 15));
        let err = finite_difference_check(
            |tape, vars| {
                let left = tape.slice_cols(vars[0], 0, 2)?;
                let right = tape.slice_cols(vars[0], 2, 5)?;
                let sq = tape.square(right)?;
                let glued = tape.concat_cols(left, sq)?;
                tape.mean(glued)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "err={err}");
    }
}
