//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape once in reverse and accumulates gradients into the
//! parameter store with `+=`, so shared subgraphs (a goal vector feeding
//! every layer, an embedding row looked up twice) sum their contributions.
//! A graph is built per loss evaluation and consumed by `backward`.

use crate::params::{ParamId, Params};
use crate::scalar::Scalar;
use crate::tensor::{acc_matmul_nn, acc_matmul_nt, acc_matmul_tn, Shape, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf(ParamId),
    Const,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Lookup { table: Var, row: usize },
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, target: usize },
    BinaryCrossEntropy { logit: Var, label: S },
}

struct Node<S> {
    value: Tensor<S>,
    /// Saved softmax probabilities for fused cross-entropy.
    aux: Option<Tensor<S>>,
    op: Op<S>,
    /// Whether any parameter leaf is reachable; gradient flow stops early
    /// at constants.
    needs: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    /// Memoized leaf per parameter so each value is materialized once per graph.
    leaf_of: Vec<Option<Var>>,
    /// When set, every op checks its output for non-finite values.
    pub verify: bool,
    consumed: bool,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_of: Vec::new(),
            verify: false,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, node: Node<S>) -> Result<Var> {
        if self.verify && !node.value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(node);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &Params<S>, id: ParamId) -> Var {
        if self.leaf_of.len() <= id.0 {
            self.leaf_of.resize(id.0 + 1, None);
        }
        if let Some(v) = self.leaf_of[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: params.value(id).clone(),
            aux: None,
            op: Op::Leaf(id),
            needs: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.leaf_of[id.0] = Some(v);
        v
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            aux: None,
            op: Op::Const,
            needs: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_const(&mut self, x: S) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn zeros_const(&mut self, n: usize) -> Var {
        self.constant(Tensor::zeros(Shape::vector(n)))
    }

    pub fn ones_const(&mut self, n: usize) -> Var {
        self.constant(Tensor::filled(Shape::vector(n), S::one()))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    /// Matrix product. Accepts (m,k)x(k,n) -> (m,n), (m,k)x(k) -> (m),
    /// and (k)x(k,n) -> (n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k, n, out_shape) = match (sa.rank(), sb.rank()) {
            (2, 2) if sa.cols() == sb.rows() => (
                sa.rows(),
                sa.cols(),
                sb.cols(),
                Shape::matrix(sa.rows(), sb.cols()),
            ),
            (2, 1) if sa.cols() == sb.rows() => {
                (sa.rows(), sa.cols(), 1, Shape::vector(sa.rows()))
            }
            (1, 2) if sa.rows() == sb.rows() => {
                (1, sa.rows(), sb.cols(), Shape::vector(sb.cols()))
            }
            _ => {
                return Err(shape_err(
                    "matmul",
                    format!("cannot multiply {sa} by {sb}"),
                ))
            }
        };
        let mut out = Tensor::zeros(out_shape);
        acc_matmul_nn(
            out.data_mut(),
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            Node {
                value: out,
                aux: None,
                op: Op::Matmul(a, b),
                needs,
            },
        )
    }

    fn elementwise_pair(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        make: impl FnOnce(Var, Var) -> Op<S>,
    ) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err(op, format!("operands {sa} vs {sb}")));
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(
            op,
            Node {
                value: Tensor::from_vec(sa, data),
                aux: None,
                op: make(a, b),
                needs,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product; one operand may be a single-element tensor,
    /// which broadcasts over the other.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb && !sa.is_scalar() && !sb.is_scalar() {
            return Err(shape_err("mul", format!("operands {sa} vs {sb}")));
        }
        let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let (shape, data): (Shape, Vec<S>) = if sa == sb {
            (sa, va.iter().zip(vb).map(|(&x, &y)| x * y).collect())
        } else if sa.is_scalar() {
            let s = va[0];
            (sb, vb.iter().map(|&y| s * y).collect())
        } else {
            let s = vb[0];
            (sa, va.iter().map(|&x| x * s).collect())
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "mul",
            Node {
                value: Tensor::from_vec(shape, data),
                aux: None,
                op: Op::Mul(a, b),
                needs,
            },
        )
    }

    /// Concatenation of rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.rank() != 1 {
                return Err(shape_err("concat", format!("rank-{} input {sp}", sp.rank())));
            }
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat",
            Node {
                value: Tensor::vector(data),
                aux: None,
                op: Op::Concat(parts.to_vec()),
                needs,
            },
        )
    }

    /// Contiguous range of a rank-1 tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.rank() != 1 || start + len > sx.len() || len == 0 {
            return Err(shape_err(
                "slice",
                format!("range {start}..{} of {sx}", start + len),
            ));
        }
        let data = self.nodes[x.0].value.data()[start..start + len].to_vec();
        let needs = self.needs(x);
        self.push(
            "slice",
            Node {
                value: Tensor::vector(data),
                aux: None,
                op: Op::Slice { x, start },
                needs,
            },
        )
    }

    /// Row of a rank-2 table, typically an embedding matrix.
    pub fn lookup(&mut self, table: Var, row: usize) -> Result<Var> {
        let st = self.shape(table);
        if st.rank() != 2 || row >= st.rows() {
            return Err(shape_err("lookup", format!("row {row} of {st}")));
        }
        let data = self.nodes[table.0].value.row(row).to_vec();
        let needs = self.needs(table);
        self.push(
            "lookup",
            Node {
                value: Tensor::vector(data),
                aux: None,
                op: Op::Lookup { table, row },
                needs,
            },
        )
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(S) -> S,
        make: impl FnOnce(Var) -> Op<S>,
    ) -> Result<Var> {
        let shape = self.shape(x);
        let data = self.nodes[x.0].value.data().iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        self.push(
            op,
            Node {
                value: Tensor::from_vec(shape, data),
                aux: None,
                op: make(x),
                needs,
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, stable_sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log)
    }

    /// Numerically stable softmax along `axis` (0 for rank 1; 0 or 1 for
    /// rank 2, normalizing down columns or across rows respectively).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.rank() {
            return Err(shape_err("softmax", format!("axis {axis} of {sx}")));
        }
        let mut out = self.nodes[x.0].value.clone();
        for lane in 0..lane_count(sx, axis) {
            let idx: Vec<usize> = lane_indices(sx, axis, lane).collect();
            let max = idx
                .iter()
                .map(|&i| out.data()[i])
                .fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for &i in &idx {
                let e = (out.data()[i] - max).exp();
                out.data_mut()[i] = e;
                total += e;
            }
            for &i in &idx {
                out.data_mut()[i] /= total;
            }
        }
        let needs = self.needs(x);
        self.push(
            "softmax",
            Node {
                value: out,
                aux: None,
                op: Op::Softmax { x, axis },
                needs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.nodes[x.0].value.data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(
            "sum",
            Node {
                value: Tensor::scalar(total),
                aux: None,
                op: Op::Sum(x),
                needs,
            },
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        if n == 0 {
            return Err(shape_err("mean", "empty input".into()));
        }
        let total: S = self.nodes[x.0].value.data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(
            "mean",
            Node {
                value: Tensor::scalar(total / S::from_f64(n as f64)),
                aux: None,
                op: Op::Mean(x),
                needs,
            },
        )
    }

    /// Negative log-softmax probability of `target`, fused for stability.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.rank() != 1 || target >= sl.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("target {target} for logits {sl}"),
            ));
        }
        let data = self.nodes[logits.0].value.data();
        let max = data.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        let mut probs = Vec::with_capacity(data.len());
        for &l in data {
            let e = (l - max).exp();
            probs.push(e);
            total += e;
        }
        for p in &mut probs {
            *p /= total;
        }
        let loss = max + total.ln() - data[target];
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            Node {
                value: Tensor::scalar(loss),
                aux: Some(Tensor::vector(probs)),
                op: Op::CrossEntropy { logits, target },
                needs,
            },
        )
    }

    /// Binary cross-entropy of a Bernoulli label against a single logit,
    /// computed as `max(x,0) - x*y + ln(1 + exp(-|x|))`.
    pub fn binary_cross_entropy(&mut self, logit: Var, label: bool) -> Result<Var> {
        let sl = self.shape(logit);
        if !sl.is_scalar() {
            return Err(shape_err(
                "binary_cross_entropy",
                format!("logit must be scalar, got {sl}"),
            ));
        }
        let x = self.nodes[logit.0].value.item();
        let y = if label { S::one() } else { S::zero() };
        let loss = x.max(S::zero()) - x * y + (S::one() + (-x.abs()).exp()).ln();
        let needs = self.needs(logit);
        self.push(
            "binary_cross_entropy",
            Node {
                value: Tensor::scalar(loss),
                aux: None,
                op: Op::BinaryCrossEntropy { logit, label: y },
                needs,
            },
        )
    }

    /// Runs one reverse sweep from `loss`, accumulating into `params` grad
    /// buffers. The graph cannot be extended or swept again afterwards.
    pub fn backward(&mut self, loss: Var, params: &mut Params<S>) -> Result<()> {
        if !self.shape(loss).is_scalar() {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {}", self.shape(loss)),
            ));
        }
        assert!(!self.consumed, "backward called twice on one graph");
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, g, &mut grads, params);
        }
        Ok(())
    }

    fn grad_buf<'a>(
        grads: &'a mut [Option<Tensor<S>>],
        nodes: &[Node<S>],
        v: Var,
    ) -> &'a mut Tensor<S> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        params: &mut Params<S>,
    ) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Const => {}
            Op::Leaf(id) => params.grad_mut(*id).add_assign(&g),
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (m, k, n) = match (sa.rank(), sb.rank()) {
                    (2, 2) => (sa.rows(), sa.cols(), sb.cols()),
                    (2, 1) => (sa.rows(), sa.cols(), 1),
                    (1, 2) => (1, sa.rows(), sb.cols()),
                    _ => unreachable!("matmul shapes validated at forward"),
                };
                if nodes[a.0].needs {
                    // dA += dC * B^T, with dC (m,n) and B (k,n).
                    let buf = Self::grad_buf(grads, nodes, a);
                    acc_matmul_nt(buf.data_mut(), g.data(), nodes[b.0].value.data(), m, n, k);
                }
                if nodes[b.0].needs {
                    // dB += A^T * dC, with A (m,k) and dC (m,n).
                    let buf = Self::grad_buf(grads, nodes, b);
                    acc_matmul_tn(buf.data_mut(), nodes[a.0].value.data(), g.data(), m, k, n);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if nodes[a.0].needs {
                    Self::grad_buf(grads, nodes, a).add_assign(&g);
                }
                if nodes[b.0].needs {
                    Self::grad_buf(grads, nodes, b).add_assign(&g);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if nodes[a.0].needs {
                    Self::grad_buf(grads, nodes, a).add_assign(&g);
                }
                if nodes[b.0].needs {
                    let buf = Self::grad_buf(grads, nodes, b);
                    for (o, &gv) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                if sa == sb {
                    if nodes[a.0].needs {
                        let buf = Self::grad_buf(grads, nodes, a);
                        for ((o, &gv), &bv) in buf
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(nodes[b.0].value.data())
                        {
                            *o += gv * bv;
                        }
                    }
                    if nodes[b.0].needs {
                        let buf = Self::grad_buf(grads, nodes, b);
                        for ((o, &gv), &av) in buf
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(nodes[a.0].value.data())
                        {
                            *o += gv * av;
                        }
                    }
                } else {
                    // One side is a broadcast scalar.
                    let (sc, vec) = if sa.is_scalar() { (a, b) } else { (b, a) };
                    if nodes[sc.0].needs {
                        let dot: S = g
                            .data()
                            .iter()
                            .zip(nodes[vec.0].value.data())
                            .map(|(&gv, &vv)| gv * vv)
                            .sum();
                        Self::grad_buf(grads, nodes, sc).data_mut()[0] += dot;
                    }
                    if nodes[vec.0].needs {
                        let s = nodes[sc.0].value.item();
                        let buf = Self::grad_buf(grads, nodes, vec);
                        for (o, &gv) in buf.data_mut().iter_mut().zip(g.data()) {
                            *o += gv * s;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if nodes[p.0].needs {
                        let buf = Self::grad_buf(grads, nodes, p);
                        for (o, &gv) in buf
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[offset..offset + len])
                        {
                            *o += gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                let (x, start) = (*x, *start);
                if nodes[x.0].needs {
                    let buf = Self::grad_buf(grads, nodes, x);
                    for (o, &gv) in buf.data_mut()[start..start + g.len()]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *o += gv;
                    }
                }
            }
            Op::Lookup { table, row } => {
                let (table, row) = (*table, *row);
                if nodes[table.0].needs {
                    let buf = Self::grad_buf(grads, nodes, table);
                    for (o, &gv) in buf.row_mut(row).iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let x = *x;
                if nodes[x.0].needs {
                    let buf = Self::grad_buf(grads, nodes, x);
                    for ((o, &gv), &y) in buf
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(nodes[i].value.data())
                    {
                        *o += gv * y * (S::one() - y);
                    }
                }
            }
            Op::Tanh(x) => {
                let x = *x;
                if nodes[x.0].needs {
                    let buf = Self::grad_buf(grads, nodes, x);
                    for ((o, &gv), &y) in buf
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(nodes[i].value.data())
                    {
                        *o += gv * (S::one() - y * y);
                    }
                }
            }
            Op::Log(x) => {
                let x = *x;
                if nodes[x.0].needs {
                    let buf = Self::grad_buf(grads, nodes, x);
                    for ((o, &gv), &xv) in buf
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(nodes[x.0].value.data())
                    {
                        *o += gv / xv;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                if nodes[x.0].needs {
                    let y = nodes[i].value.data();
                    let sx = nodes[i].value.shape();
                    let buf = Self::grad_buf(grads, nodes, x);
                    for lane in 0..lane_count(sx, axis) {
                        let idx: Vec<usize> = lane_indices(sx, axis, lane).collect();
                        let mut dot = S::zero();
                        for &j in &idx {
                            dot += g.data()[j] * y[j];
                        }
                        for &j in &idx {
                            buf.data_mut()[j] += y[j] * (g.data()[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let x = *x;
                if nodes[x.0].needs {
                    let gv = g.item();
                    let buf = Self::grad_buf(grads, nodes, x);
                    for o in buf.data_mut() {
                        *o += gv;
                    }
                }
            }
            Op::Mean(x) => {
                let x = *x;
                if nodes[x.0].needs {
                    let n = nodes[x.0].value.len();
                    let gv = g.item() / S::from_f64(n as f64);
                    let buf = Self::grad_buf(grads, nodes, x);
                    for o in buf.data_mut() {
                        *o += gv;
                    }
                }
            }
            Op::CrossEntropy { logits, target } => {
                let (logits, target) = (*logits, *target);
                if nodes[logits.0].needs {
                    let probs = nodes[i].aux.as_ref().expect("cross_entropy aux");
                    let gv = g.item();
                    let buf = Self::grad_buf(grads, nodes, logits);
                    for (j, (o, &p)) in buf.data_mut().iter_mut().zip(probs.data()).enumerate() {
                        let ind = if j == target { S::one() } else { S::zero() };
                        *o += gv * (p - ind);
                    }
                }
            }
            Op::BinaryCrossEntropy { logit, label } => {
                let (logit, label) = (*logit, *label);
                if nodes[logit.0].needs {
                    let x = nodes[logit.0].value.item();
                    let gv = g.item();
                    Self::grad_buf(grads, nodes, logit).data_mut()[0] +=
                        gv * (stable_sigmoid(x) - label);
                }
            }
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn lane_count(shape: Shape, axis: usize) -> usize {
    if shape.rank() == 1 {
        1
    } else if axis == 1 {
        shape.rows()
    } else {
        shape.cols()
    }
}

/// Flat indices of one normalization lane for `softmax`.
fn lane_indices(shape: Shape, axis: usize, lane: usize) -> impl Iterator<Item = usize> {
    let (start, step, count) = if shape.rank() == 1 {
        (0, 1, shape.len())
    } else if axis == 1 {
        (lane * shape.cols(), 1, shape.cols())
    } else {
        (lane, shape.cols(), shape.rows())
    };
    (0..count).map(move |i| start + i * step)
}
