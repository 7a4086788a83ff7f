//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value in a [`Graph`] is a 2-D array; vectors are `1 x n` rows and
//! scalars are `1 x 1`. Nodes are appended in evaluation order, so a single
//! reverse sweep over the tape is a valid topological traversal.
//!
//! Elementwise binary ops broadcast either operand along an axis of length
//! one (`1 x 1`, `1 x n` or `m x 1`), matching ndarray's co-broadcasting.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named learnable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Per-parameter gradients, indexed like the originating [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Array2<f64>>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Replaces the gradient of one parameter.
    pub fn set(&mut self, id: ParamId, grad: Array2<f64>) {
        self.grads[id.0] = Some(grad);
    }

    /// Accumulates `other` into `self`.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (acc, g) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => *a += g,
                    None => *acc = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    SumAll(Var),
    MeanRows(Var),
    MeanCols(Var),
    CumsumCols(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MulConst(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn check_broadcast(a: &Array2<f64>, b: &Array2<f64>, op: &str) {
    let ok = |x: usize, y: usize| x == y || x == 1 || y == 1;
    assert!(
        ok(a.nrows(), b.nrows()) && ok(a.ncols(), b.ncols()),
        "{op}: incompatible shapes {:?} and {:?}",
        a.dim(),
        b.dim()
    );
}

fn reduce_to(mut g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        assert_eq!(x.dim(), (1, 1), "scalar() on non-scalar node");
        x[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so every use of a parameter within one graph shares one gradient slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    /// The node bound to `id`, if the parameter was used in this graph.
    pub fn param_node(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        check_broadcast(x, y, "add");
        let out = x + y;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        check_broadcast(x, y, "sub");
        let out = x - y;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        check_broadcast(x, y, "mul");
        let out = x * y;
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        check_broadcast(x, y, "div");
        let out = x / y;
        self.push(out, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).mapv(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    /// Mean over rows, giving a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = (x.sum_axis(Axis(0)) / x.nrows() as f64).insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    /// Mean over columns, giving a `rows x 1` column.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = (x.sum_axis(Axis(1)) / x.ncols() as f64).insert_axis(Axis(1));
        self.push(out, Op::MeanCols(a))
    }

    /// Running sum along each row.
    pub fn cumsum_cols(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += *v;
                *v = acc;
            }
        }
        self.push(out, Op::CumsumCols(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Elementwise product with a fixed (non-differentiated) array of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.value(a).dim(), c.dim(), "mul_const: shape mismatch");
        let out = self.value(a) * &c;
        self.push(out, Op::MulConst(a, c))
    }

    /// `x . w + b`, with `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Per-row layer normalization followed by the affine map `gamma, beta` (`1 x d` rows).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let mean = self.mean_cols(x);
        let centered = self.sub(x, mean);
        let sq = self.mul(centered, centered);
        let var = self.mean_cols(sq);
        let var_eps = self.add_scalar(var, eps);
        let std = self.sqrt(var_eps);
        let normed = self.div(centered, std);
        let scaled = self.mul(normed, gamma);
        self.add(scaled, beta)
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let ga = reduce_to(g.clone(), self.value(*a).dim());
                    let gb = reduce_to(g.clone(), self.value(*b).dim());
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_to(g.clone(), self.value(*a).dim());
                    let gb = reduce_to(-&g, self.value(*b).dim());
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = reduce_to(&g * y, x.dim());
                    let gb = reduce_to(&g * x, y.dim());
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Div(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = reduce_to(&g / y, x.dim());
                    let gb = reduce_to(-(&g * &node.value) / y, y.dim());
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, f) => accumulate(&mut grads[a.0], g.mapv(|v| v * f)),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = g.dot(&y.t());
                    let gb = x.t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *gv *= d;
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sqrt(a) => {
                    let mut ga = g.clone();
                    // Zero subgradient at the origin keeps distances of identical inputs finite.
                    ga.zip_mut_with(&node.value, |gv, &y| {
                        *gv = if y > 0.0 { *gv / (2.0 * y) } else { 0.0 }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &gy - &(y * &dot);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MeanRows(a) => {
                    let dim = self.value(*a).dim();
                    let ga = g.broadcast(dim).unwrap().mapv(|v| v / dim.0 as f64);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MeanCols(a) => {
                    let dim = self.value(*a).dim();
                    let ga = g.broadcast(dim).unwrap().mapv(|v| v / dim.1 as f64);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::CumsumCols(a) => {
                    let mut ga = g.clone();
                    for mut row in ga.rows_mut() {
                        let mut acc = 0.0;
                        for v in row.iter_mut().rev() {
                            acc += *v;
                            *v = acc;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        let gp = g.slice(s![offset..offset + n, ..]).to_owned();
                        accumulate(&mut grads[p.0], gp);
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        let gp = g.slice(s![.., offset..offset + n]).to_owned();
                        accumulate(&mut grads[p.0], gp);
                        offset += n;
                    }
                }
                Op::MulConst(a, c) => accumulate(&mut grads[a.0], &g * c),
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Collects gradients of bound parameters into a store-indexed table.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (id, var) in &self.params {
            if let Some(g) = grads.wrt(*var) {
                out.grads[id.0] = Some(g.clone());
            }
        }
        out
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
