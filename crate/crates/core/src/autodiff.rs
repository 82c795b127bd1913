//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is rebuilt for every mini-batch. Forward values are computed
//! eagerly as nodes are pushed; the push order is a topological order, so
//! [`Graph::backward`] simply walks the tape from the end.
//!
//! Shapes are always explicit. The only broadcasting forms are scalar-times-
//! matrix ([`Graph::scale`]) and the dedicated bias and row-scaling ops.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a named parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    LogClamped(Var, f64),
    Mean(Var),
    Sum(Var),
    RowSum(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    ScaleRows(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SumGroups(Var, usize),
    LogSoftmax(Var),
    PickCols(Var, Vec<usize>),
    Grl(Var, f64),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScaleRows(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::LogClamped(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::SliceRows(a, _)
            | Op::SumGroups(a, _)
            | Op::LogSoftmax(a)
            | Op::PickCols(a, _)
            | Op::Grl(a, _) => vec![*a],
            Op::ConcatRows(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub values: Matrix,
    pub grad: Matrix,
    pub op: Op,
    pub requires_grad: bool,
    param: Option<ParamId>,
}

impl Node {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn parents(&self) -> Vec<Var> {
        self.op.parents()
    }

    /// The parameter this leaf mirrors, if any.
    pub fn param(&self) -> Option<ParamId> {
        self.param
    }
}

/// Named trainable tensors with their gradient accumulators, kept in
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.grads.push(Matrix::zeros(value.dim()));
        self.values.push(value);
        self.names.push(name);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Mutable access to value and gradient at once, for optimizers.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Matrix, &Matrix) {
        (&mut self.values[id.0], &self.grads[id.0])
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Config(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.0, a.1, b.0, b.1
    ))
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

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Every node, in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].values
    }

    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].values.dim()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].values[[0, 0]]
    }

    fn push(&mut self, values: Matrix, op: Op) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        let grad = Matrix::zeros(values.dim());
        self.nodes.push(Node {
            values,
            grad,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, values: Matrix) -> Var {
        self.push(values, Op::Leaf)
    }

    /// Leaf for a trainable parameter. Repeated calls for the same id return
    /// the same node so its gradient is accumulated in one place.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(v) = self.param_leaves.get(&id) {
            return *v;
        }
        let values = params.value(id).clone();
        let grad = Matrix::zeros(values.dim());
        self.nodes.push(Node {
            values,
            grad,
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(id, v);
        v
    }

    /// Constant copy of a node's current value, cutting it out of backprop.
    pub fn detach(&mut self, x: Var) -> Var {
        let values = self.value(x).clone();
        self.constant(values)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds a 1xn bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(shape_err("add_bias", sa, sb));
        }
        let v = self.value(a) + self.value(bias);
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(floor).ln());
        self.push(v, Op::LogClamped(a, floor))
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.sum() / x.len() as f64;
        self.push(Matrix::from_elem((1, 1), v), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.push(Matrix::from_elem((1, 1), v), Op::Sum(a))
    }

    /// Per-row sum: `n x c -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a, c))
    }

    /// Multiplies row `i` of `x` by `w[i, 0]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw != (sx.0, 1) {
            return Err(shape_err("scale_rows", sx, sw));
        }
        let v = self.value(x) * self.value(w);
        Ok(self.push(v, Op::ScaleRows(x, w)))
    }

    /// Stacks nodes vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of zero nodes".into()))?;
        let cols = self.shape(first).1;
        for p in parts {
            if self.shape(*p).1 != cols {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(*p)));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start + len > sa.0 || len == 0 {
            return Err(Error::Config(format!(
                "slice_rows: rows {start}..{} out of 0..{}",
                start + len,
                sa.0
            )));
        }
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    /// Sums consecutive blocks of `group` rows: `(n*group) x c -> n x c`.
    pub fn sum_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if group == 0 || rows % group != 0 {
            return Err(Error::Config(format!(
                "sum_groups: {rows} rows not divisible into groups of {group}"
            )));
        }
        let x = self.value(a);
        let mut v = Matrix::zeros((rows / group, cols));
        for (i, mut out) in v.rows_mut().into_iter().enumerate() {
            for t in 0..group {
                out += &x.row(i * group + t);
            }
        }
        Ok(self.push(v, Op::SumGroups(a, group)))
    }

    /// Row-wise log-softmax, stabilized by subtracting the row max.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    /// Selects `x[i, cols[i]]` for every row, giving an `n x 1` node.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (rows, width) = self.shape(a);
        if cols.len() != rows {
            return Err(Error::Config(format!(
                "pick_cols: {} indices for {rows} rows",
                cols.len()
            )));
        }
        if let Some(bad) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::Input(format!(
                "class index {bad} out of range for {width} classes"
            )));
        }
        let x = self.value(a);
        let v = Matrix::from_shape_fn((rows, 1), |(i, _)| x[[i, cols[i]]]);
        Ok(self.push(v, Op::PickCols(a, cols.to_vec())))
    }

    /// Per-row cross-entropy of `logits` against class indices, `n x 1`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.log_softmax(logits);
        let picked = self.pick_cols(ls, labels)?;
        Ok(self.scale(picked, -1.0))
    }

    /// Cross-entropy of a single `1 x c` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        if self.shape(logits).0 != 1 {
            return Err(Error::Config(format!(
                "cross_entropy expects one row of logits, got {}",
                self.shape(logits).0
            )));
        }
        let rows = self.cross_entropy_rows(logits, &[label])?;
        Ok(self.sum(rows))
    }

    /// Gradient reversal: identity forward, gradient times `-coeff` backward.
    /// Training uses `coeff >= 0`; `-1` makes the backward an identity.
    pub fn grl(&mut self, x: Var, coeff: f64) -> Var {
        debug_assert!(coeff.is_finite(), "GRL coefficient {coeff}");
        let v = self.value(x).clone();
        self.push(v, Op::Grl(x, coeff))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    /// Accumulates d(root)/d(node) into the `grad` of every node that
    /// requires gradient. Calling twice without [`Graph::zero_grad`] doubles
    /// the stored gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got {r}x{c}"
            )));
        }
        let mut upstream: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        upstream[root.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(dy) = upstream[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &dy, &mut upstream);
            self.nodes[idx].grad += &dy;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &Matrix, upstream: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, g: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            debug_assert_eq!(g.dim(), self.nodes[v.0].values.dim(), "gradient shape for {:?}", self.nodes[idx].op);
            match &mut upstream[v.0] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                send(*a, dy.dot(&self.value(*b).t()));
                send(*b, self.value(*a).t().dot(dy));
            }
            Op::Add(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::AddBias(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                send(*a, dy * self.value(*b));
                send(*b, dy * self.value(*a));
            }
            Op::Relu(a) => {
                let mut g = dy.clone();
                g.zip_mut_with(self.value(*a), |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                send(*a, g);
            }
            Op::Tanh(a) => {
                let mut g = dy.clone();
                g.zip_mut_with(&node.values, |g, &y| *g *= 1.0 - y * y);
                send(*a, g);
            }
            Op::Exp(a) => send(*a, dy * &node.values),
            Op::LogClamped(a, floor) => {
                let mut g = dy.clone();
                g.zip_mut_with(self.value(*a), |g, &x| {
                    *g = if x > *floor { *g / x } else { 0.0 }
                });
                send(*a, g);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                send(*a, Matrix::from_elem(self.shape(*a), dy[[0, 0]] / n));
            }
            Op::Sum(a) => send(*a, Matrix::from_elem(self.shape(*a), dy[[0, 0]])),
            Op::RowSum(a) => {
                let (rows, cols) = self.shape(*a);
                send(*a, Matrix::from_shape_fn((rows, cols), |(i, _)| dy[[i, 0]]));
            }
            Op::Scale(a, c) => send(*a, dy * *c),
            Op::AddScalar(a, _) => send(*a, dy.clone()),
            Op::ScaleRows(x, w) => {
                send(*x, dy * self.value(*w));
                let gw = (dy * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                send(*w, gw);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    send(*p, dy.slice(s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let mut g = Matrix::zeros(self.shape(*a));
                let rows = dy.nrows();
                g.slice_mut(s![*start..*start + rows, ..]).assign(dy);
                send(*a, g);
            }
            Op::SumGroups(a, group) => {
                let (rows, cols) = self.shape(*a);
                send(
                    *a,
                    Matrix::from_shape_fn((rows, cols), |(i, j)| dy[[i / group, j]]),
                );
            }
            Op::LogSoftmax(a) => {
                // dx = dy - softmax * rowsum(dy)
                let total = dy.sum_axis(Axis(1));
                let mut g = dy.clone();
                for ((i, j), gij) in g.indexed_iter_mut() {
                    *gij -= node.values[[i, j]].exp() * total[i];
                }
                send(*a, g);
            }
            Op::PickCols(a, cols) => {
                let mut g = Matrix::zeros(self.shape(*a));
                for (i, &c) in cols.iter().enumerate() {
                    g[[i, c]] = dy[[i, 0]];
                }
                send(*a, g);
            }
            Op::Grl(a, coeff) => send(*a, dy * -*coeff),
        }
    }

    /// Adds the gradients held by parameter leaves into `params`.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for (id, v) in &self.param_leaves {
            params.grads[id.0] += &self.nodes[v.0].grad;
        }
    }
}

/// Row-wise log-softmax on a plain matrix.
pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise softmax on a plain matrix.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    log_softmax_rows(x).mapv(f64::exp)
}

/// Compares analytic gradients of the scalar built by `build` against
/// central differences with step `eps`, over every entry of every parameter.
///
/// Returns `max |analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(params: &mut ParamSet, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    grad_check_scaled(params, eps, 1.0, build)
}

/// As [`grad_check`], comparing analytic gradients against `scale` times the
/// numeric ones. A gradient reversal with coefficient `c` is checked with
/// `scale = -c`.
pub fn grad_check_scaled<F>(params: &mut ParamSet, eps: f64, scale: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    Ok(grad_check_stats(params, eps, scale, build)?.max_rel_error)
}

/// Numeric gradients below this magnitude are dominated by roundoff in the
/// two loss evaluations at `eps = 1e-5`.
pub const RESOLVABLE_GRAD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckStats {
    /// `max |a - n| / max(1e-8, |n|)` over every entry.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Relative error over entries with `|n| >= RESOLVABLE_GRAD` only.
    pub max_rel_error_resolvable: f64,
    pub entries: usize,
}

impl GradCheckStats {
    pub fn merge(self, o: Self) -> Self {
        Self {
            max_rel_error: self.max_rel_error.max(o.max_rel_error),
            max_abs_error: self.max_abs_error.max(o.max_abs_error),
            max_rel_error_resolvable: self.max_rel_error_resolvable.max(o.max_rel_error_resolvable),
            entries: self.entries + o.entries,
        }
    }
}

pub fn grad_check_stats<F>(params: &mut ParamSet, eps: f64, scale: f64, build: F) -> Result<GradCheckStats>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Usage(format!("grad_check eps must be > 0, got {eps}")));
    }
    params.zero_grad();
    let mut g = Graph::new();
    let root = build(&mut g, params)?;
    g.backward(root)?;
    g.accumulate_param_grads(params);
    let analytic: Vec<Matrix> = params.grads.clone();
    params.zero_grad();

    let eval = |params: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(&mut g, params)?;
        if g.shape(root) != (1, 1) {
            return Err(Error::Usage("grad_check builder must return a scalar".into()));
        }
        Ok(g.scalar(root))
    };

    let mut st = GradCheckStats::default();
    for (p, grad) in analytic.iter().enumerate() {
        for flat in 0..grad.len() {
            let orig = *params.values[p].iter().nth(flat).expect("in range");
            set_flat(&mut params.values[p], flat, orig + eps);
            let plus = eval(params)?;
            set_flat(&mut params.values[p], flat, orig - eps);
            let minus = eval(params)?;
            set_flat(&mut params.values[p], flat, orig);
            let numeric = scale * (plus - minus) / (2.0 * eps);
            let a = *grad.iter().nth(flat).expect("in range");
            let abs = (a - numeric).abs();
            let rel = abs / numeric.abs().max(1e-8);
            st.max_rel_error = st.max_rel_error.max(rel);
            st.max_abs_error = st.max_abs_error.max(abs);
            if numeric.abs() >= RESOLVABLE_GRAD {
                st.max_rel_error_resolvable = st.max_rel_error_resolvable.max(rel);
            }
            st.entries += 1;
        }
    }
    Ok(st)
}

fn set_flat(m: &mut Matrix, flat: usize, v: f64) {
    let cols = m.ncols();
    m[[flat / cols, flat % cols]] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn tanh_at_zero() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", array![[0.0]]).unwrap();
        let mut g = Graph::new();
        let x = g.param(&ps, w);
        let y = g.tanh(x);
        assert_eq!(g.scalar(y), 0.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x)[[0, 0]], 1.0);
    }

    #[test]
    fn mean_of_two() {
        let mut g = Graph::new();
        let x = g.constant(array![[2.0, 4.0]]);
        let m = g.mean(x);
        assert_eq!(g.scalar(m), 3.0);
    }

    #[test]
    fn mean_backward_spreads_evenly() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Matrix::from_elem((2, 3), 0.7)).unwrap();
        let mut g = Graph::new();
        let x = g.param(&ps, w);
        let m = g.mean(x);
        g.backward(m).unwrap();
        assert!(g.grad(x).iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Matrix::eye(3));
        let x = g.constant(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros((2, 3)));
        let b = g.constant(Matrix::zeros((2, 3)));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("2x3")), "{err}");
        assert!(matches!(g.add_bias(a, b), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::new();
        let z = g.constant(Matrix::zeros((1, 7)));
        let ce = g.cross_entropy(z, 3).unwrap();
        assert!((g.scalar(ce) - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let z = g.constant(array![[1000.0, 0.0]]);
        let ce = g.cross_entropy(z, 0).unwrap();
        assert!(g.scalar(ce).is_finite());
        assert!(g.scalar(ce).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_form() {
        let mut g = Graph::new();
        let z = g.constant(array![[0.5, -0.5]]);
        let ce = g.cross_entropy(z, 0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.scalar(ce) - expected).abs() < 1e-14);
        assert!((g.scalar(ce) - 0.3133).abs() < 5e-5);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let z = g.constant(Matrix::zeros((1, 3)));
        assert!(matches!(g.cross_entropy(z, 3), Err(Error::Input(_))));
    }

    #[test]
    fn grl_forward_identity_backward_negated() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", array![[0.3, -1.2]]).unwrap();
        for coeff in [0.0, 0.5, 1.0] {
            let mut g = Graph::new();
            let x = g.param(&ps, w);
            let r = g.grl(x, coeff);
            assert_eq!(g.value(r), g.value(x));
            let c = g.constant(array![[2.0, -3.0]]);
            let y = g.mul(r, c).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            assert_eq!(g.grad(x), &(array![[2.0, -3.0]] * -coeff));
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::zeros((2, 1)));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", array![[0.4, 0.1]]).unwrap();
        let mut g = Graph::new();
        let x = g.param(&ps, w);
        let t = g.tanh(x);
        let s = g.sum(t);
        g.backward(s).unwrap();
        let once = g.grad(x).clone();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &(&once * 2.0));
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &once);
    }

    #[test]
    fn duplicate_param_name_rejected() {
        let mut ps = ParamSet::new();
        ps.add("a", Matrix::zeros((1, 1))).unwrap();
        assert!(matches!(ps.add("a", Matrix::zeros((1, 1))), Err(Error::Config(_))));
    }

    #[test]
    fn linear_graph_grad_check_is_exact() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", array![[0.5], [-0.25], [1.5]]).unwrap();
        let err = grad_check(&mut ps, 1e-5, |g, ps| {
            let x = g.constant(array![[1.0, 2.0, 3.0]]);
            let wv = g.param(ps, w);
            let y = g.matmul(x, wv)?;
            Ok(g.scale(y, 3.0))
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = array![[1000.0, -1000.0, 3.0], [0.1, 0.2, 0.3]];
        let p = softmax_rows(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(max_abs: f64) -> impl Strategy<Value = Matrix> {
            (1usize..5, 1usize..5).prop_flat_map(move |(r, c)| {
                proptest::collection::vec(-max_abs..max_abs, r * c)
                    .prop_map(move |v| Matrix::from_shape_vec((r, c), v).unwrap())
            })
        }

        proptest! {
            #[test]
            fn log_softmax_exponentiates_to_one(x in matrix(1e3)) {
                let mut g = Graph::new();
                let v = g.constant(x);
                let ls = g.log_softmax(v);
                for row in g.value(ls).rows() {
                    let total: f64 = row.iter().map(|v| v.exp()).sum();
                    prop_assert!((total - 1.0).abs() < 1e-9);
                    prop_assert!(row.iter().all(|v| v.is_finite()));
                }
            }

            #[test]
            fn grl_forward_is_bit_identical(x in matrix(10.0), coeff in -3.0f64..3.0) {
                let mut g = Graph::new();
                let v = g.constant(x.clone());
                let r = g.grl(v, coeff);
                prop_assert_eq!(g.value(r), &x);
            }

            #[test]
            fn backward_is_deterministic(x in matrix(1.0)) {
                let run = || {
                    let mut ps = ParamSet::new();
                    let id = ps.add("x", x.clone()).unwrap();
                    let mut g = Graph::new();
                    let v = g.param(&ps, id);
                    let t = g.tanh(v);
                    let l = g.log_softmax(t);
                    let s = g.sum(l);
                    g.backward(s).unwrap();
                    g.accumulate_param_grads(&mut ps);
                    ps.grad(id).clone()
                };
                prop_assert_eq!(run(), run());
            }
        }
    }
}
