//! A static, single-output reverse-mode differentiation tape.
//!
//! Nodes are recorded through builder methods that check shapes eagerly, so
//! recording order is a valid topological order. [`Tape::forward`] evaluates
//! every node in that order and keeps the activations; [`Tape::backward`]
//! walks the records once in reverse and returns a gradient for each
//! differentiable input.
//!
//! ```
//! use promptlab::autodiff::Tape;
//! use promptlab::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param("x", &[3]);
//! let sq = tape.mul(x, x).unwrap();
//! let out = tape.sum(sq).unwrap();
//! tape.set_output(out);
//!
//! let xv = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
//! assert_eq!(tape.forward(&[("x", &xv)]).unwrap().item(), 14.0);
//! let grads = tape.backward(1.0).unwrap();
//! assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use num_traits::Float;
use thiserror::Error;

use crate::kernels;
use crate::tensor::{numel, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("node {node}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        node: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("no input named {0:?} is declared on the tape")]
    UnknownInput(String),
    #[error("input {0:?} was not supplied")]
    MissingInput(String),
    #[error("input {0:?} supplied or declared more than once")]
    DuplicateInput(String),
    #[error("tape has no output node")]
    NoOutput,
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("backward needs a scalar output, found shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {node} produced a non-finite value")]
    NonFinite { node: String },
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    /// Receives a gradient in [`Tape::backward`].
    Differentiable,
    /// Fed at every forward, never differentiated.
    Constant,
}

#[derive(Debug, Clone)]
enum Op {
    Input { name: String, kind: InputKind },
    Literal(Tensor),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    ClampSt { x: NodeId, lo: f32, hi: f32 },
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId },
    Upsample2(NodeId),
    Diff { x: NodeId, axis: usize },
    Abs(NodeId),
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Literal(_) => "literal",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::ClampSt { .. } => "clamp_st",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::Upsample2(_) => "upsample2",
            Op::Diff { .. } => "diff",
            Op::Abs(_) => "abs",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Gradients keyed by differentiable input name, in declaration order.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    output: Option<NodeId>,
    values: Option<Vec<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a differentiable input.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.declare(name, shape, InputKind::Differentiable)
    }

    /// Declares a constant input that is fed at each forward.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.declare(name, shape, InputKind::Constant)
    }

    fn declare(&mut self, name: &str, shape: &[usize], kind: InputKind) -> NodeId {
        assert!(
            self.input_index(name).is_none(),
            "input {name:?} declared twice"
        );
        self.push(
            Op::Input {
                name: name.to_string(),
                kind,
            },
            shape.to_vec(),
        )
    }

    /// A constant baked into the tape.
    pub fn literal(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Literal(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product of `op(a)` and `op(b)`, where `ta`/`tb` transpose the
    /// stored operand.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let label = format!("#{} (matmul)", self.nodes.len());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                node: label,
                expected: vec![0, 0],
                found: if sa.len() != 2 { sa } else { sb },
            });
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                node: label,
                expected: vec![k, n],
                found: vec![k2, n],
            });
        }
        Ok(self.push(Op::MatMul { a, b, ta, tb }, vec![m, n]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Scale(a, s), shape))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Tanh(a), shape))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sigmoid(a), shape))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.push(Op::Mean(a), vec![]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.push(Op::Sum(a), vec![]))
    }

    /// Clamps in the forward pass; passes the gradient through unchanged.
    pub fn clamp_st(&mut self, x: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::ClampSt { x, lo, hi }, shape))
    }

    /// `x: [H, W, Cin]`, `w: [3, 3, Cin, Cout]`, `b: [Cout]` → `[H, W, Cout]`.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        let label = format!("#{} (conv3x3)", self.nodes.len());
        if sx.len() != 3 {
            return Err(AutodiffError::ShapeMismatch {
                node: label,
                expected: vec![0, 0, 0],
                found: sx,
            });
        }
        let cin = sx[2];
        if sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != cin {
            return Err(AutodiffError::ShapeMismatch {
                node: label,
                expected: vec![3, 3, cin, sw.get(3).copied().unwrap_or(0)],
                found: sw,
            });
        }
        let cout = sw[3];
        if sb != [cout] {
            return Err(AutodiffError::ShapeMismatch {
                node: label,
                expected: vec![cout],
                found: sb,
            });
        }
        Ok(self.push(Op::Conv3x3 { x, w, b }, vec![sx[0], sx[1], cout]))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.rank3(x, "upsample2")?;
        Ok(self.push(Op::Upsample2(x), vec![2 * s[0], 2 * s[1], s[2]]))
    }

    /// Forward difference along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn diff(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        assert!(axis < 2, "diff axis must be 0 or 1");
        let s = self.rank3(x, "diff")?;
        let (oh, ow) = kernels::diff_dims(s[0], s[1], axis);
        Ok(self.push(Op::Diff { x, axis }, vec![oh, ow, s[2]]))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Abs(a), shape))
    }

    /// Reinterprets the row-major data under a new shape of equal size.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(AutodiffError::ShapeMismatch {
                node: format!("#{} (reshape)", self.nodes.len()),
                expected: self.shape(a).to_vec(),
                found: shape.to_vec(),
            });
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Convenience: `a - b`, composed from `scale` and `add`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
        self.values = None;
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Evaluates the tape on the named inputs and caches every activation.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor)]) -> Result<Tensor> {
        let out = self.output.ok_or(AutodiffError::NoOutput)?;
        let feeds = self.bind(inputs, |t| t.data().to_vec())?;
        let values = self.eval::<f32>(feeds)?;
        let result = Tensor::new(self.shape(out), values[out.0].clone())?;
        self.values = Some(values);
        Ok(result)
    }

    /// Cached activation of `node` from the last forward.
    pub fn value(&self, node: NodeId) -> Option<Tensor> {
        let values = self.values.as_ref()?;
        Tensor::new(self.shape(node), values[node.0].clone()).ok()
    }

    /// Reverse pass seeded with `seed` at the scalar output.
    pub fn backward(&self, seed: f32) -> Result<Gradients> {
        let out = self.output.ok_or(AutodiffError::NoOutput)?;
        let values = self
            .values
            .as_ref()
            .ok_or(AutodiffError::BackwardBeforeForward)?;
        if numel(self.shape(out)) != 1 {
            return Err(AutodiffError::NonScalarOutput(self.shape(out).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![seed]);

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input { .. } | Op::Literal(_) => {
                    grads[idx] = Some(g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let sa = self.shape(*a);
                    let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                    let n = node.shape[1];
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    if self.nodes[a.0].needs_grad {
                        let mut da = vec![0f32; m * k];
                        if *ta {
                            // stored k×m: B · dCᵀ
                            kernels::matmul(bv, &g, &mut da, k, n, m, *tb, true);
                        } else {
                            // m×k: dC · Bᵀ
                            kernels::matmul(&g, bv, &mut da, m, n, k, false, !*tb);
                        }
                        accumulate(&mut grads, *a, &da, &self.nodes);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0f32; k * n];
                        if *tb {
                            // stored n×k: dCᵀ · A
                            kernels::matmul(&g, av, &mut db, n, m, k, true, *ta);
                        } else {
                            // k×n: Aᵀ · dC
                            kernels::matmul(av, &g, &mut db, k, m, n, !*ta, false);
                        }
                        accumulate(&mut grads, *b, &db, &self.nodes);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    accumulate(&mut grads, *b, &g, &self.nodes);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f32> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                        accumulate(&mut grads, *a, &da, &self.nodes);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<f32> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                        accumulate(&mut grads, *b, &db, &self.nodes);
                    }
                }
                Op::Scale(a, s) => {
                    let da: Vec<f32> = g.iter().map(|g| g * s).collect();
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
                Op::Tanh(a) => {
                    let y = &values[idx];
                    let da: Vec<f32> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
                Op::Sigmoid(a) => {
                    let y = &values[idx];
                    let da: Vec<f32> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
                Op::Mean(a) => {
                    let n = values[a.0].len();
                    let da = vec![g[0] / n as f32; n];
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; values[a.0].len()];
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
                Op::ClampSt { x: a, .. } | Op::Reshape(a) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                }
                Op::Conv3x3 { x, w, b } => {
                    let sx = self.shape(*x);
                    let (h, wd, cin) = (sx[0], sx[1], sx[2]);
                    let cout = node.shape[2];
                    let mut dx = self.nodes[x.0].needs_grad.then(|| vec![0f32; h * wd * cin]);
                    let mut dw = self.nodes[w.0].needs_grad.then(|| vec![0f32; 9 * cin * cout]);
                    let mut db = self.nodes[b.0].needs_grad.then(|| vec![0f32; cout]);
                    kernels::conv3x3_backward(
                        &values[x.0],
                        &values[w.0],
                        &g,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                        h,
                        wd,
                        cin,
                        cout,
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, &dx, &self.nodes);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, *w, &dw, &self.nodes);
                    }
                    if let Some(db) = db {
                        accumulate(&mut grads, *b, &db, &self.nodes);
                    }
                }
                Op::Upsample2(x) => {
                    let s = self.shape(*x);
                    let mut dx = vec![0f32; numel(s)];
                    kernels::upsample2_backward(&g, &mut dx, s[0], s[1], s[2]);
                    accumulate(&mut grads, *x, &dx, &self.nodes);
                }
                Op::Diff { x, axis } => {
                    let s = self.shape(*x);
                    let mut dx = vec![0f32; numel(s)];
                    kernels::diff_backward(&g, &mut dx, s[0], s[1], s[2], *axis);
                    accumulate(&mut grads, *x, &dx, &self.nodes);
                }
                Op::Abs(a) => {
                    let av = &values[a.0];
                    let da: Vec<f32> = g.iter().zip(av).map(|(g, a)| g * sign(*a)).collect();
                    accumulate(&mut grads, *a, &da, &self.nodes);
                }
            }
        }

        let mut entries = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input {
                name,
                kind: InputKind::Differentiable,
            } = &node.op
            {
                let g = grads[idx].take().unwrap_or_else(|| vec![0.0; numel(&node.shape)]);
                entries.push((name.clone(), Tensor::new(&node.shape, g)?));
            }
        }
        Ok(Gradients { entries })
    }

    /// Largest relative disagreement between [`Tape::backward`] and central
    /// differences over every coordinate of every differentiable input.
    ///
    /// The perturbed evaluations run the same recorded graph in `f64`, so the
    /// comparison measures the reverse pass rather than `f32` cancellation in
    /// the difference quotient. Relative error is
    /// `|g_ad - g_fd| / max(1e-8, |g_fd|)`.
    pub fn finite_diff_check(&mut self, inputs: &[(&str, &Tensor)], eps: f64) -> Result<f64> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(AutodiffError::InvalidStep(eps));
        }
        let out = self.output.ok_or(AutodiffError::NoOutput)?;
        if numel(self.shape(out)) != 1 {
            return Err(AutodiffError::NonScalarOutput(self.shape(out).to_vec()));
        }
        self.forward(inputs)?;
        let grads = self.backward(1.0)?;
        let base: Vec<Option<Vec<f64>>> =
            self.bind(inputs, |t| t.data().iter().map(|&v| v as f64).collect())?;

        let mut worst = 0f64;
        for (idx, node) in self.nodes.iter().enumerate() {
            let Op::Input {
                name,
                kind: InputKind::Differentiable,
            } = &node.op
            else {
                continue;
            };
            let g_ad = grads.get(name).expect("gradient for every parameter");
            for coord in 0..numel(&node.shape) {
                let mut plus = base.clone();
                plus[idx].as_mut().unwrap()[coord] += eps;
                let mut minus = base.clone();
                minus[idx].as_mut().unwrap()[coord] -= eps;
                let fp = self.eval::<f64>(plus)?[out.0][0];
                let fm = self.eval::<f64>(minus)?[out.0][0];
                let g_fd = (fp - fm) / (2.0 * eps);
                let err = (g_ad.data()[coord] as f64 - g_fd).abs() / g_fd.abs().max(1e-8);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Input { kind, .. } => *kind == InputKind::Differentiable,
            Op::Literal(_) => false,
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Conv3x3 { x, w, b } => {
                self.nodes[x.0].needs_grad || self.nodes[w.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Upsample2(a)
            | Op::Abs(a)
            | Op::Reshape(a)
            | Op::ClampSt { x: a, .. }
            | Op::Diff { x: a, .. } => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        self.values = None;
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                node: format!("#{} ({what})", self.nodes.len()),
                expected: self.shape(a).to_vec(),
                found: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn rank3(&self, x: NodeId, what: &str) -> Result<Vec<usize>> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(AutodiffError::ShapeMismatch {
                node: format!("#{} ({what})", self.nodes.len()),
                expected: vec![0, 0, 0],
                found: s,
            });
        }
        Ok(s)
    }

    fn input_index(&self, name: &str) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Input { name: nm, .. } if nm == name))
    }

    /// Matches named feeds against declared inputs.
    fn bind<T>(
        &self,
        inputs: &[(&str, &Tensor)],
        convert: impl Fn(&Tensor) -> Vec<T>,
    ) -> Result<Vec<Option<Vec<T>>>> {
        let mut feeds: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (name, tensor) in inputs {
            let idx = self
                .input_index(name)
                .ok_or_else(|| AutodiffError::UnknownInput(name.to_string()))?;
            if feeds[idx].is_some() {
                return Err(AutodiffError::DuplicateInput(name.to_string()));
            }
            if tensor.shape() != self.nodes[idx].shape.as_slice() {
                return Err(AutodiffError::ShapeMismatch {
                    node: format!("#{idx} (input {name:?})"),
                    expected: self.nodes[idx].shape.clone(),
                    found: tensor.shape().to_vec(),
                });
            }
            feeds[idx] = Some(convert(tensor));
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input { name, .. } = &node.op {
                if feeds[idx].is_none() {
                    return Err(AutodiffError::MissingInput(name.clone()));
                }
            }
        }
        Ok(feeds)
    }

    fn eval<T: Float>(&self, mut feeds: Vec<Option<Vec<T>>>) -> Result<Vec<Vec<T>>> {
        let mut vals: Vec<Vec<T>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let n = numel(&node.shape);
            let v: Vec<T> = match &node.op {
                Op::Input { .. } => feeds[idx].take().expect("bound input"),
                Op::Literal(t) => t.data().iter().map(|&x| T::from(x).unwrap()).collect(),
                Op::MatMul { a, b, ta, tb } => {
                    let sa = self.shape(*a);
                    let k = if *ta { sa[0] } else { sa[1] };
                    let mut out = vec![T::zero(); n];
                    kernels::matmul(
                        &vals[a.0],
                        &vals[b.0],
                        &mut out,
                        node.shape[0],
                        k,
                        node.shape[1],
                        *ta,
                        *tb,
                    );
                    out
                }
                Op::Add(a, b) => vals[a.0].iter().zip(&vals[b.0]).map(|(&x, &y)| x + y).collect(),
                Op::Mul(a, b) => vals[a.0].iter().zip(&vals[b.0]).map(|(&x, &y)| x * y).collect(),
                Op::Scale(a, s) => {
                    let s = T::from(*s).unwrap();
                    vals[a.0].iter().map(|&x| x * s).collect()
                }
                Op::Tanh(a) => vals[a.0].iter().map(|&x| x.tanh()).collect(),
                Op::Sigmoid(a) => vals[a.0].iter().map(|&x| kernels::sigmoid(x)).collect(),
                Op::Mean(a) => {
                    let src = &vals[a.0];
                    let s = src.iter().fold(T::zero(), |acc, &x| acc + x);
                    vec![s / T::from(src.len()).unwrap()]
                }
                Op::Sum(a) => vec![vals[a.0].iter().fold(T::zero(), |acc, &x| acc + x)],
                Op::ClampSt { x, lo, hi } => {
                    let (lo, hi) = (T::from(*lo).unwrap(), T::from(*hi).unwrap());
                    vals[x.0].iter().map(|&v| v.max(lo).min(hi)).collect()
                }
                Op::Conv3x3 { x, w, b } => {
                    let sx = self.shape(*x);
                    let mut out = vec![T::zero(); n];
                    kernels::conv3x3(
                        &vals[x.0],
                        &vals[w.0],
                        &vals[b.0],
                        &mut out,
                        sx[0],
                        sx[1],
                        sx[2],
                        node.shape[2],
                    );
                    out
                }
                Op::Upsample2(x) => {
                    let s = self.shape(*x);
                    let mut out = vec![T::zero(); n];
                    kernels::upsample2(&vals[x.0], &mut out, s[0], s[1], s[2]);
                    out
                }
                Op::Diff { x, axis } => {
                    let s = self.shape(*x);
                    let mut out = vec![T::zero(); n];
                    kernels::diff(&vals[x.0], &mut out, s[0], s[1], s[2], *axis);
                    out
                }
                Op::Abs(a) => vals[a.0].iter().map(|&x| x.abs()).collect(),
                Op::Reshape(a) => vals[a.0].clone(),
            };
            if v.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    node: format!("#{idx} ({})", node.op.name()),
                });
            }
            vals.push(v);
        }
        Ok(vals)
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], node: NodeId, g: &[f32], nodes: &[Node]) {
    if !nodes[node.0].needs_grad {
        return;
    }
    match &mut grads[node.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, g)| *a += g),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.param("x", &[3]);
        let sq = tape.mul(x, x).unwrap();
        let out = tape.sum(sq).unwrap();
        tape.set_output(out);
        let xv = t(&[3], &[1.0, 2.0, 3.0]);
        assert_eq!(tape.forward(&[("x", &xv)]).unwrap().item(), 14.0);
        let g = tape.backward(1.0).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2, 2]);
        let y = tape.tanh(x).unwrap();
        tape.set_output(y);
        let out = tape.forward(&[("x", &Tensor::zeros(&[2, 2]))]).unwrap();
        assert_eq!(out, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn mean_of_ones() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2, 2]);
        let y = tape.mean(x).unwrap();
        tape.set_output(y);
        assert_eq!(tape.forward(&[("x", &Tensor::ones(&[2, 2]))]).unwrap().item(), 1.0);
    }

    #[test]
    fn linear_map_gradient() {
        let mut tape = Tape::new();
        let u = tape.param("u", &[1, 2]);
        let v = tape.input("v", &[2, 1]);
        let uv = tape.matmul(u, v).unwrap();
        let out = tape.sum(uv).unwrap();
        tape.set_output(out);
        tape.forward(&[("u", &t(&[1, 2], &[1.0, 1.0])), ("v", &t(&[2, 1], &[3.0, 4.0]))])
            .unwrap();
        let g = tape.backward(1.0).unwrap();
        assert_eq!(g.get("u").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn backward_before_forward_errors() {
        let mut tape = Tape::new();
        let x = tape.param("x", &[1]);
        let y = tape.sum(x).unwrap();
        tape.set_output(y);
        assert_eq!(tape.backward(1.0).unwrap_err(), AutodiffError::BackwardBeforeForward);
    }

    #[test]
    fn non_scalar_backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param("x", &[2]);
        let y = tape.tanh(x).unwrap();
        tape.set_output(y);
        tape.forward(&[("x", &Tensor::zeros(&[2]))]).unwrap();
        assert!(matches!(tape.backward(1.0), Err(AutodiffError::NonScalarOutput(_))));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut tape = Tape::new();
        let a = tape.input("a", &[2, 3]);
        let b = tape.input("b", &[2, 3]);
        match tape.matmul(a, b) {
            Err(AutodiffError::ShapeMismatch { node, .. }) => assert!(node.contains("matmul")),
            other => panic!("unexpected {other:?}"),
        }
        let s = tape.add(a, b).unwrap();
        tape.set_output(s);
        match tape.forward(&[("a", &Tensor::zeros(&[3, 2])), ("b", &Tensor::zeros(&[2, 3]))]) {
            Err(AutodiffError::ShapeMismatch { node, .. }) => assert!(node.contains("\"a\"")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_unknown_inputs() {
        let mut tape = Tape::new();
        let a = tape.input("a", &[1]);
        tape.set_output(a);
        assert!(matches!(tape.forward(&[]), Err(AutodiffError::MissingInput(_))));
        let z = Tensor::zeros(&[1]);
        assert!(matches!(
            tape.forward(&[("a", &z), ("b", &z)]),
            Err(AutodiffError::UnknownInput(_))
        ));
    }

    #[test]
    fn clamp_is_straight_through() {
        let mut tape = Tape::new();
        let x = tape.param("x", &[3]);
        let c = tape.clamp_st(x, -1.0, 1.0).unwrap();
        let w = tape.input("w", &[3]);
        let p = tape.mul(c, w).unwrap();
        let out = tape.sum(p).unwrap();
        tape.set_output(out);
        let xv = t(&[3], &[-5.0, 0.5, 7.0]);
        let wv = t(&[3], &[2.0, 3.0, 4.0]);
        let y = tape.forward(&[("x", &xv), ("w", &wv)]).unwrap();
        assert_eq!(y.item(), -2.0 + 1.5 + 4.0);
        assert_eq!(tape.backward(1.0).unwrap().get("x").unwrap().data(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut rng = SplitMix64::new(7);
        let a = Tensor::from_fn(&[4, 3], |_| rng.uniform_f32(-1.0, 1.0)).unwrap();
        let grad_of = |use_tanh: bool, use_sig: bool| {
            let mut tape = Tape::new();
            let x = tape.param("x", &[4, 3]);
            let mut parts = Vec::new();
            if use_tanh {
                let th = tape.tanh(x).unwrap();
                parts.push(tape.sum(th).unwrap());
            }
            if use_sig {
                let sg = tape.sigmoid(x).unwrap();
                let sq = tape.mul(sg, x).unwrap();
                parts.push(tape.mean(sq).unwrap());
            }
            let out = if parts.len() == 2 {
                tape.add(parts[0], parts[1]).unwrap()
            } else {
                parts[0]
            };
            tape.set_output(out);
            tape.forward(&[("x", &a)]).unwrap();
            tape.backward(1.0).unwrap().get("x").unwrap().clone()
        };
        let both = grad_of(true, true);
        let sum = grad_of(true, false).add(&grad_of(false, true)).unwrap();
        assert!(both.max_abs_diff(&sum) < 1e-6);
    }

    #[test]
    fn repeated_passes_are_bitwise_identical() {
        let mut rng = SplitMix64::new(3);
        let xv = Tensor::from_fn(&[4, 4, 2], |_| rng.uniform_f32(-1.0, 1.0)).unwrap();
        let wv = Tensor::from_fn(&[3, 3, 2, 3], |_| rng.uniform_f32(-0.5, 0.5)).unwrap();
        let bv = Tensor::from_fn(&[3], |_| rng.uniform_f32(-0.5, 0.5)).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param("x", &[4, 4, 2]);
            let w = tape.input("w", &[3, 3, 2, 3]);
            let b = tape.input("b", &[3]);
            let c = tape.conv3x3(x, w, b).unwrap();
            let u = tape.upsample2(c).unwrap();
            let d = tape.diff(u, 1).unwrap();
            let s = tape.sigmoid(d).unwrap();
            let out = tape.mean(s).unwrap();
            tape.set_output(out);
            let y = tape.forward(&[("x", &xv), ("w", &wv), ("b", &bv)]).unwrap();
            (y, tape.backward(1.0).unwrap().get("x").unwrap().clone())
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert!(y1.bitwise_eq(&y2));
        assert!(g1.bitwise_eq(&g2));
    }

    #[test]
    fn quadratic_bowl_is_exact_under_central_differences() {
        let mut tape = Tape::new();
        let x = tape.param("x", &[5]);
        let sq = tape.mul(x, x).unwrap();
        let out = tape.sum(sq).unwrap();
        tape.set_output(out);
        let xv = t(&[5], &[0.3, -1.2, 2.0, 0.05, -0.7]);
        let err = tape.finite_diff_check(&[("x", &xv)], 1e-3).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param("x", &[1]);
        let out = tape.sum(x).unwrap();
        tape.set_output(out);
        let xv = Tensor::zeros(&[1]);
        assert_eq!(
            tape.finite_diff_check(&[("x", &xv)], 0.0).unwrap_err(),
            AutodiffError::InvalidStep(0.0)
        );
    }

    /// Random five-op graphs touching every differentiable primitive.
    #[test]
    fn random_graphs_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = SplitMix64::new(seed);
            let mut tape = Tape::new();
            let u = tape.param("u", &[3, 2]);
            let v = tape.param("v", &[2, 4]);
            let w = tape.param("w", &[3, 3, 1, 2]);
            let bias = tape.literal(Tensor::new(&[2], vec![0.1, -0.2]).unwrap());
            let uv = tape.matmul(u, v).unwrap();
            let th = tape.tanh(uv).unwrap();
            let img = tape.literal(
                Tensor::from_fn(&[3, 4, 1], |i| (i as f32 * 0.3).sin()).unwrap(),
            );
            let th3 = tape.reshape(th, &[3, 4, 1]).unwrap();
            let m = tape.mul(th3, img).unwrap();
            let conv = tape.conv3x3(m, w, bias).unwrap();
            let up = tape.upsample2(conv).unwrap();
            let d0 = tape.diff(up, 0).unwrap();
            let sg = tape.sigmoid(d0).unwrap();
            let s1 = tape.mean(sg).unwrap();
            let vt = tape.matmul_t(v, u, true, true).unwrap();
            let vt2 = tape.mul(vt, vt).unwrap();
            let s2 = tape.sum(vt2).unwrap();
            let s2 = tape.scale(s2, 0.05).unwrap();
            let tot = tape.add(s1, s2).unwrap();
            let ab = tape.abs(tot).unwrap();
            tape.set_output(ab);
            let uv_ = Tensor::from_fn(&[3, 2], |_| rng.uniform_f32(-1.0, 1.0)).unwrap();
            let vv = Tensor::from_fn(&[2, 4], |_| rng.uniform_f32(-1.0, 1.0)).unwrap();
            let wv = Tensor::from_fn(&[3, 3, 1, 2], |_| rng.uniform_f32(-1.0, 1.0)).unwrap();
            let err = tape
                .finite_diff_check(&[("u", &uv_), ("v", &vv), ("w", &wv)], 1e-3)
                .unwrap();
            assert!(err < 1e-3, "seed {seed}: err {err}");
        }
    }
}
