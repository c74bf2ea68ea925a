//! Minimal reverse-mode differentiation over a fixed set of vector and
//! matrix operations.
//!
//! A [`Tape`] owns every intermediate [`Tensor`]. Operations append a node and
//! return a [`Var`] handle; [`Tape::backward`] walks the nodes once, newest
//! first, and accumulates analytic gradients. Nodes built only from constants
//! carry no gradient and are skipped.
//!
//! ```
//! use promptta::numdiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
//! let y = tape.dot(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

use std::fmt;

use crate::error::{Error, Result};

/// Norms at or below this are rejected by [`Tape::l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)`, with a vector treated as a single row.
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            Shape::Vector(n) => (1, n),
            Shape::Matrix(r, c) => (r, c),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

/// Dense 1-D or row-major 2-D array of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::shape("tensor", shape, format!("{} values", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor construction (element {i})"),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Vector(data.len()), data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Matrix(rows, cols), data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::vector(vec![value])
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape("from_rows", format!("row 0 has {cols}"), format!("row {i} has {}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers. Callers keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape.dims().0
    }

    pub fn cols(&self) -> usize {
        self.shape.dims().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// The single value of a length-1 vector.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn transposed(&self) -> Tensor {
        match self.shape {
            Shape::Vector(_) => self.clone(),
            Shape::Matrix(r, c) => {
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = self.data[i * c + j];
                    }
                }
                Tensor {
                    shape: Shape::Matrix(c, r),
                    data: out,
                }
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    MeanRows(Var),
    StackRows(Vec<Var>),
    L2Normalize(Var, Vec<f64>),
    Dot(Var, Var),
    Abs(Var),
    Exp(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::MatVec(..) => "matvec",
            Op::Transpose(..) => "transpose",
            Op::MeanRows(..) => "mean_rows",
            Op::StackRows(..) => "stack_rows",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Dot(..) => "dot",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::SoftmaxCrossEntropy { .. } => "log_softmax_cross_entropy",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    label: Option<String>,
    requires_grad: bool,
}

/// Ordered record of executed operations. Parents always precede children.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0]))
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

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, None, true)
    }

    /// Differentiable input with a name used in error messages.
    pub fn named_leaf(&mut self, name: &str, value: Tensor) -> Var {
        self.push_leaf(value, Some(name.to_owned()), true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, None, false)
    }

    pub fn named_constant(&mut self, name: &str, value: Tensor) -> Var {
        self.push_leaf(value, Some(name.to_owned()), false)
    }

    fn push_leaf(&mut self, value: Tensor, label: Option<String>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            label,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> Shape {
        self.nodes[var.0].value.shape
    }

    fn data(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value.data
    }

    fn describe(&self, var: Var) -> String {
        let node = &self.nodes[var.0];
        match &node.label {
            Some(label) => label.clone(),
            None => format!("{}#{}", node.op.name(), var.0),
        }
    }

    fn push(&mut self, op: Op, shape: Shape, data: Vec<f64>, parents: &[Var]) -> Result<Var> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{} (node {}, element {i})", op.name(), self.nodes.len()),
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor { shape, data },
            op,
            label: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push(Op::Add(a, b), shape, data, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.push(Op::Sub(a, b), shape, data, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push(Op::Mul(a, b), shape, data, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        self.push(Op::Scale(a, factor), self.shape(a), data, &[a])
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x + offset).collect();
        self.push(Op::Shift(a), self.shape(a), data, &[a])
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (Shape::Matrix(m, k), Shape::Matrix(k2, n)) = (sa, sb) else {
            return Err(Error::shape("matmul", sa, sb));
        };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.push(Op::MatMul(a, b), Shape::Matrix(m, n), data, &[a, b])
    }

    /// `a (m×k) · x (k)`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a), self.shape(x));
        let (Shape::Matrix(m, k), Shape::Vector(k2)) = (sa, sx) else {
            return Err(Error::shape("matvec", sa, sx));
        };
        if k != k2 {
            return Err(Error::shape("matvec", sa, sx));
        }
        let (av, xv) = (self.data(a), self.data(x));
        let data = (0..m).map(|i| dot_raw(&av[i * k..(i + 1) * k], xv)).collect();
        self.push(Op::MatVec(a, x), Shape::Vector(m), data, &[a, x])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transposed();
        self.push(Op::Transpose(a), t.shape, t.data, &[a])
    }

    /// Column means of a matrix, as a vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let Shape::Matrix(r, c) = self.shape(a) else {
            return Err(Error::shape("mean_rows", self.shape(a), "matrix"));
        };
        if r == 0 {
            return Err(Error::shape("mean_rows", self.shape(a), "at least one row"));
        }
        let av = self.data(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (acc, v) in data.iter_mut().zip(&av[i * c..(i + 1) * c]) {
                *acc += v;
            }
        }
        let inv = 1.0 / r as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        self.push(Op::MeanRows(a), Shape::Vector(c), data, &[a])
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::shape("stack_rows", "no rows", "at least one row"));
        };
        let Shape::Vector(c) = self.shape(first) else {
            return Err(Error::shape("stack_rows", self.shape(first), "vector"));
        };
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if self.shape(r) != Shape::Vector(c) {
                return Err(Error::shape("stack_rows", Shape::Vector(c), self.shape(r)));
            }
            data.extend_from_slice(self.data(r));
        }
        self.push(
            Op::StackRows(rows.to_vec()),
            Shape::Matrix(rows.len(), c),
            data,
            rows,
        )
    }

    /// Unit L2 norm for a vector; row-wise for a matrix.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let (r, c) = shape.dims();
        let av = self.data(a);
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let norm = dot_raw(row, row).sqrt();
            if norm <= MIN_NORM {
                return Err(Error::ZeroNorm {
                    tensor: self.describe(a),
                    norm,
                });
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        self.push(Op::L2Normalize(a, norms), shape, data, &[a])
    }

    /// Inner product of two vectors, as a length-1 vector.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("dot", a, b)?;
        if !matches!(shape, Shape::Vector(_)) {
            return Err(Error::shape("dot", shape, "vector"));
        }
        let v = dot_raw(self.data(a), self.data(b));
        self.push(Op::Dot(a, b), Shape::Vector(1), vec![v], &[a, b])
    }

    /// `dot(normalize(a), normalize(b))`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        self.dot(na, nb)
    }

    /// Elementwise absolute value; the subgradient at exactly 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x.abs()).collect();
        self.push(Op::Abs(a), self.shape(a), data, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(a), self.shape(a), data, &[a])
    }

    /// Mean over rows of `-log softmax(logits_row)[target]`.
    ///
    /// A vector of logits takes exactly one target; a `B×N` matrix takes `B`.
    pub fn log_softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        let (b, n) = shape.dims();
        if targets.len() != b || b == 0 || n == 0 {
            return Err(Error::shape(
                "log_softmax_cross_entropy",
                shape,
                format!("{} targets", targets.len()),
            ));
        }
        let lv = self.data(logits);
        let mut probs = Vec::with_capacity(b * n);
        let mut loss = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::InvalidArgument(format!(
                    "target {t} out of range for {n} classes"
                )));
            }
            let z = &lv[row * n..(row + 1) * n];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + sum.ln();
            loss += log_norm - z[t];
            probs.extend(z.iter().map(|v| (v - log_norm).exp()));
        }
        loss /= b as f64;
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Shape::Vector(1),
            vec![loss],
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.data(a).iter().sum();
        self.push(Op::Sum(a), Shape::Vector(1), vec![v], &[a])
    }

    /// Back-propagates from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != Shape::Vector(1) {
            return Err(Error::shape("backward", self.shape(output), "scalar"));
        }
        let shapes: Vec<Shape> = self.nodes.iter().map(|n| n.value.shape).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor {
            shape: Shape::Vector(1),
            data: vec![1.0],
        });

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        for (i, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = &g.data;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| axpy(acc, 1.0, gd));
                self.accumulate(grads, *b, |acc| axpy(acc, 1.0, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| axpy(acc, 1.0, gd));
                self.accumulate(grads, *b, |acc| axpy(acc, -1.0, gd));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |acc| {
                    for ((acc, g), y) in acc.iter_mut().zip(gd).zip(bv) {
                        *acc += g * y;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for ((acc, g), x) in acc.iter_mut().zip(gd).zip(av) {
                        *acc += g * x;
                    }
                });
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, |acc| axpy(acc, *factor, gd)),
            Op::Shift(a) => self.accumulate(grads, *a, |acc| axpy(acc, 1.0, gd)),
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a).dims();
                let n = self.shape(*b).dims().1;
                let (av, bv) = (self.data(*a), self.data(*b));
                // dA = G Bᵀ
                self.accumulate(grads, *a, |acc| {
                    for i in 0..m {
                        for p in 0..k {
                            acc[i * k + p] += dot_raw(&gd[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                // dB = Aᵀ G
                self.accumulate(grads, *b, |acc| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip != 0.0 {
                                axpy(&mut acc[p * n..(p + 1) * n], aip, &gd[i * n..(i + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::MatVec(a, x) => {
                let (m, k) = self.shape(*a).dims();
                let (av, xv) = (self.data(*a), self.data(*x));
                self.accumulate(grads, *a, |acc| {
                    for i in 0..m {
                        axpy(&mut acc[i * k..(i + 1) * k], gd[i], xv);
                    }
                });
                self.accumulate(grads, *x, |acc| {
                    for i in 0..m {
                        axpy(acc, gd[i], &av[i * k..(i + 1) * k]);
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = g.transposed();
                self.accumulate(grads, *a, |acc| axpy(acc, 1.0, &gt.data));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a).dims();
                let inv = 1.0 / r as f64;
                self.accumulate(grads, *a, |acc| {
                    for i in 0..r {
                        axpy(&mut acc[i * c..(i + 1) * c], inv, gd);
                    }
                });
            }
            Op::StackRows(rows) => {
                let c = out.cols();
                for (i, r) in rows.iter().enumerate() {
                    self.accumulate(grads, *r, |acc| axpy(acc, 1.0, &gd[i * c..(i + 1) * c]));
                }
            }
            Op::L2Normalize(a, norms) => {
                let c = out.cols();
                let y = &out.data;
                self.accumulate(grads, *a, |acc| {
                    for (i, norm) in norms.iter().enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &gd[i * c..(i + 1) * c];
                        let proj = dot_raw(yr, gr);
                        for j in 0..c {
                            acc[i * c + j] += (gr[j] - yr[j] * proj) / norm;
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let s = gd[0];
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |acc| axpy(acc, s, bv));
                self.accumulate(grads, *b, |acc| axpy(acc, s, av));
            }
            Op::Abs(a) => {
                let av = self.data(*a);
                self.accumulate(grads, *a, |acc| {
                    for ((acc, x), g) in acc.iter_mut().zip(av).zip(gd) {
                        let sign = if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *acc += sign * g;
                    }
                });
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, |acc| {
                    for ((acc, y), g) in acc.iter_mut().zip(&out.data).zip(gd) {
                        *acc += y * g;
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.shape(*logits).dims().1;
                let s = gd[0] / targets.len() as f64;
                self.accumulate(grads, *logits, |acc| {
                    for (row, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            acc[row * n + j] += s * (probs[row * n + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|v| *v += s));
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| Tensor::zeros(self.shape(target)));
        f(&mut slot.data);
    }
}

pub(crate) fn dot_raw(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(row, aip, &b[p * n..(p + 1) * n]);
            }
        }
    }
    out
}

/// Compares the tape gradient of a scalar function against central finite
/// differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradcheck<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("gradcheck step must be positive, got {step}")));
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone());
        let y = f(&mut tape, x)?;
        let v = tape
            .value(y)
            .item()
            .ok_or_else(|| Error::shape("gradcheck", tape.value(y).shape(), "scalar"))?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "gradcheck forward".into(),
            });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    eval(point)?;
    let analytic = tape.backward(y)?.wrt(x);

    let mut worst = 0.0_f64;
    let mut probe = point.clone();
    for i in 0..point.data.len() {
        let orig = point.data[i];
        probe.data[i] = orig + step;
        let up = eval(&probe)?;
        probe.data[i] = orig - step;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic.data[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
