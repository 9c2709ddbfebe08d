use super::linalg::{matmul_at_into, matmul_into, transpose_raw};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Exponential linear unit with alpha = 1.
    Elu,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Elu => {
                if v >= 0.0 {
                    v
                } else {
                    v.exp_m1()
                }
            }
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the input `v` and output `y`.
    fn derivative(self, v: f64, y: f64) -> f64 {
        match self {
            Activation::Elu => {
                if v >= 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Act(Activation, Var),
    StopGradient,
    StraightThrough { e: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, indices: Vec<usize> },
    RowScale { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Dynamic tape. Nodes are appended in evaluation order, so reverse insertion
/// order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last [`Graph::backward`] call, if `v` received any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Like [`Graph::grad`] but yields zeros for nodes the loss did not reach.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    /// `y = x W + b` for `x: [B,in]`, `W: [in,out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, fan_in) = self.value(x).require_matrix("affine")?;
        let (w_in, fan_out) = self.value(w).require_matrix("affine")?;
        if w_in != fan_in {
            return Err(Error::shape(
                "affine",
                format!("input width {fan_in} does not match weight rows {w_in}"),
            ));
        }
        let bias = self.value(b);
        if bias.shape() != [fan_out] {
            return Err(Error::shape(
                "affine",
                format!("bias shape {:?}, expected [{fan_out}]", bias.shape()),
            ));
        }
        let mut out = Vec::with_capacity(rows * fan_out);
        for _ in 0..rows {
            out.extend_from_slice(bias.data());
        }
        matmul_into(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            fan_in,
            fan_out,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::matrix(rows, fan_out, out)?,
            Op::Affine { x, w, b },
            rg,
        ))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Act(kind, x), rg)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.activation(Activation::Elu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    /// Identity forward; blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Forward value is `z`; the whole incoming gradient goes to `e` and none to `z`.
    pub fn straight_through(&mut self, e: Var, z: Var) -> Result<Var> {
        self.same_shape("straight_through", e, z)?;
        let value = self.value(z).clone();
        let rg = self.rg(&[e]);
        Ok(self.push(value, Op::StraightThrough { e }, rg))
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * v).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Square(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Sum of all elements, left to right.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).require_matrix("slice_cols")?;
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} exceed width {cols}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(rows, len, out)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (rows, _) = self.value(*first).require_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).require_matrix("concat_cols")?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Selects rows of `table: [N,d]`, giving `[indices.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.value(table).require_matrix("gather_rows")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    index: i as u64,
                    size: n as u64,
                });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(indices.len(), d, out)?,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies row `r` of a matrix by `weights[r]`.
    pub fn row_scale(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let (rows, cols) = self.value(x).require_matrix("row_scale")?;
        if weights.len() != rows {
            return Err(Error::shape(
                "row_scale",
                format!("{} weights for {rows} rows", weights.len()),
            ));
        }
        let src = self.value(x).data();
        let out = src
            .chunks(cols.max(1))
            .zip(weights)
            .flat_map(|(row, &w)| row.iter().map(move |&v| v * w))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::RowScale {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of `(a - b)^2` over the rows whose weight is nonzero, counting
    /// every column of each such row.
    pub fn masked_mse(&mut self, a: Var, b: Var, row_mask: &[f64]) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.square(diff);
        let masked = self.row_scale(sq, row_mask)?;
        let total = self.sum(masked);
        let active: f64 = row_mask.iter().filter(|&&w| w != 0.0).count() as f64;
        let count = active * self.value(a).cols() as f64;
        Ok(self.scale(total, if count > 0.0 { 1.0 / count } else { 0.0 }))
    }

    /// Reverse pass from a scalar loss. Previous gradients are discarded, so
    /// repeated calls on the same graph produce bitwise identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv.item())));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = node.grad.as_deref() else {
                continue;
            };
            propagate(before, node, gy);
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [Node], v: Var, contrib: impl FnOnce(&mut [f64])) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let n = node.value.len();
    let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
    contrib(g);
}

fn propagate(nodes: &mut [Node], node: &Node, gy: &[f64]) {
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::Affine { x, w, b } => {
            let (rows, fan_in) = dims2(&nodes[x.0].value);
            let fan_out = node.value.cols();
            if nodes[x.0].requires_grad {
                let wt = transpose_raw(nodes[w.0].value.data(), fan_in, fan_out);
                accumulate(nodes, *x, |g| matmul_into(gy, &wt, g, rows, fan_out, fan_in));
            }
            if nodes[w.0].requires_grad {
                let xv = nodes[x.0].value.data().to_vec();
                accumulate(nodes, *w, |g| {
                    matmul_at_into(&xv, gy, g, rows, fan_in, fan_out)
                });
            }
            accumulate(nodes, *b, |g| {
                for row in gy.chunks(fan_out) {
                    for (o, &v) in g.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            });
        }
        Op::Act(kind, x) => {
            let xv = nodes[x.0].value.data().to_vec();
            let yv = node.value.data();
            accumulate(nodes, *x, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * kind.derivative(xv[i], yv[i]);
                }
            });
        }
        Op::StraightThrough { e } => add_into(nodes, *e, gy),
        Op::Add(a, b) => {
            add_into(nodes, *a, gy);
            add_into(nodes, *b, gy);
        }
        Op::Sub(a, b) => {
            add_into(nodes, *a, gy);
            accumulate(nodes, *b, |g| {
                for (o, &v) in g.iter_mut().zip(gy) {
                    *o -= v;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            accumulate(nodes, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * bv[i];
                }
            });
            accumulate(nodes, *b, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * av[i];
                }
            });
        }
        Op::Square(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            accumulate(nodes, *x, |g| {
                for i in 0..g.len() {
                    g[i] += 2.0 * xv[i] * gy[i];
                }
            });
        }
        Op::Scale(x, c) => accumulate(nodes, *x, |g| {
            for (o, &v) in g.iter_mut().zip(gy) {
                *o += c * v;
            }
        }),
        Op::Sum(x) => {
            let s = gy[0];
            accumulate(nodes, *x, |g| g.iter_mut().for_each(|o| *o += s));
        }
        Op::Reshape(x) => add_into(nodes, *x, gy),
        Op::SliceCols { x, start } => {
            let (rows, cols) = dims2(&nodes[x.0].value);
            let len = node.value.cols();
            accumulate(nodes, *x, |g| {
                for r in 0..rows {
                    let dst = &mut g[r * cols + start..r * cols + start + len];
                    for (o, &v) in dst.iter_mut().zip(&gy[r * len..(r + 1) * len]) {
                        *o += v;
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.rows();
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p.0].value.cols();
                accumulate(nodes, p, |g| {
                    for r in 0..rows {
                        let src = &gy[r * total + offset..r * total + offset + w];
                        for (o, &v) in g[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                });
                offset += w;
            }
        }
        Op::GatherRows { table, indices } => {
            let d = node.value.cols();
            accumulate(nodes, *table, |g| {
                for (t, &i) in indices.iter().enumerate() {
                    for (o, &v) in g[i * d..(i + 1) * d].iter_mut().zip(&gy[t * d..(t + 1) * d]) {
                        *o += v;
                    }
                }
            });
        }
        Op::RowScale { x, weights } => {
            let cols = node.value.cols().max(1);
            accumulate(nodes, *x, |g| {
                for (r, &w) in weights.iter().enumerate() {
                    for (o, &v) in g[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&gy[r * cols..(r + 1) * cols])
                    {
                        *o += w * v;
                    }
                }
            });
        }
    }
}

fn add_into(nodes: &mut [Node], v: Var, gy: &[f64]) {
    accumulate(nodes, v, |g| {
        for (o, &x) in g.iter_mut().zip(gy) {
            *o += x;
        }
    });
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}
