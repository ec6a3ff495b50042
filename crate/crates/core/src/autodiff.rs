//! A small tape-based reverse-mode differentiation engine over dense
//! row-major `f64` tensors.
//!
//! Nodes are appended to a [`Graph`] as operations are recorded, so insertion
//! order is a topological order and [`Graph::backward`] is a single reverse
//! sweep. The op set is deliberately closed: affine maps, five elementwise
//! activations, elementwise arithmetic, reductions to a scalar, column
//! concatenation and row broadcasting.
//!
//! ```
//! use univoice::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = g.square(x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, -4.0, 1.0]);
//! ```

use ndarray::{ArrayView2, Axis};

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Builds a `[rows × cols]` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(rows, cols)` view of a 1-D or 2-D tensor; 1-D is one row.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [c] => Some((1, *c)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    fn view2(&self) -> ArrayView2<'_, f64> {
        let (r, c) = self.matrix_dims().expect("2-D tensor");
        ArrayView2::from_shape((r, c), &self.data).expect("consistent shape")
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
            Activation::Log => x.ln(),
        }
    }

    /// Derivative at input `x` given output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
            Activation::Log => 1.0 / x,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Exp => "exp",
            Activation::Log => "log",
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Act { x: NodeId, kind: Activation },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Concat(NodeId, NodeId),
    BroadcastRows(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push_unchecked(t, Op::Input)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push_unchecked(t, Op::Param)
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<NodeId> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        Ok(self.push_unchecked(value, op))
    }

    /// `x·W + b` for `x: [B×I]`, `W: [I×O]`, `b: [O]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (xr, xc) = xv.matrix_dims().ok_or_else(|| shape_err("affine", xv, wv))?;
        let (wr, wc) = match wv.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => return Err(shape_err("affine", xv, wv)),
        };
        if xc != wr {
            return Err(shape_err("affine", xv, wv));
        }
        if bv.len() != wc || bv.matrix_dims().is_none_or(|(r, _)| r != 1) {
            return Err(shape_err("affine bias", wv, bv));
        }
        let mut out = xv.view2().dot(&wv.view2());
        for mut row in out.rows_mut() {
            for (o, &bb) in row.iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        let t = Tensor {
            shape: vec![xr, wc],
            data: out.into_raw_vec_and_offset().0,
        };
        self.push(t, Op::Affine { x, w, b }, "affine")
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let xv = self.value(x);
        if kind == Activation::Log && xv.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument(
                "log of a non-positive entry".into(),
            ));
        }
        let t = xv.map(|v| kind.apply(v));
        self.push(t, Op::Act { x, kind }, kind.name())
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Relu)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Softplus)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Exp)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Log)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err(op, av, bv));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(t, Op::Div(a, b), "div")
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x), "square")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let t = Tensor::scalar(self.value(x).data.iter().sum());
        self.push(t, Op::Sum(x), "sum")
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let t = Tensor::scalar(v.data.iter().sum::<f64>() / v.len() as f64);
        self.push(t, Op::Mean(x), "mean")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), "add_scalar")
    }

    /// Joins two `[B×·]` matrices along columns.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((ar, ac), (br, bc)) = match (av.matrix_dims(), bv.matrix_dims()) {
            (Some(x), Some(y)) if x.0 == y.0 => (x, y),
            _ => return Err(shape_err("concat", av, bv)),
        };
        debug_assert_eq!(ar, br);
        let mut data = Vec::with_capacity(ar * (ac + bc));
        for r in 0..ar {
            data.extend_from_slice(&av.data[r * ac..(r + 1) * ac]);
            data.extend_from_slice(&bv.data[r * bc..(r + 1) * bc]);
        }
        let t = Tensor {
            shape: vec![ar, ac + bc],
            data,
        };
        self.push(t, Op::Concat(a, b), "concat")
    }

    /// Repeats a `[C]` or `[1×C]` row `rows` times.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let c = match xv.matrix_dims() {
            Some((1, c)) => c,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_rows",
                    left: xv.shape.clone(),
                    right: vec![rows],
                })
            }
        };
        if rows == 0 {
            return Err(Error::EmptyBatch);
        }
        let t = Tensor {
            shape: vec![rows, c],
            data: xv.data.repeat(rows),
        };
        self.push(t, Op::BroadcastRows(x), "broadcast_rows")
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse sweep seeded with `seed` instead of one.
    pub fn backward_scaled(&self, loss: NodeId, seed: f64) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(&lv.shape, seed));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Param) {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Input | Op::Param => unreachable!(),
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let dy = upstream.view2();
                    let dx = dy.dot(&wv.view2().t());
                    let dw = xv.view2().t().dot(&dy);
                    let db = dy.sum_axis(Axis(0));
                    accumulate(&mut grads, *x, reshape_like(dx.iter().copied(), xv));
                    accumulate(&mut grads, *w, reshape_like(dw.iter().copied(), wv));
                    accumulate(&mut grads, *b, reshape_like(db.iter().copied(), self.value(*b)));
                }
                Op::Act { x, kind } => {
                    let xv = self.value(*x);
                    let mut g = upstream;
                    for ((gi, &xi), &yi) in g.data.iter_mut().zip(&xv.data).zip(&node.value.data) {
                        *gi *= kind.derivative(xi, yi);
                    }
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, upstream.clone());
                    accumulate(&mut grads, *a, upstream);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, upstream.map(|v| -v));
                    accumulate(&mut grads, *a, upstream);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, upstream.zip(bv, |g, y| g * y));
                    accumulate(&mut grads, *b, upstream.zip(av, |g, x| g * x));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = upstream.zip(bv, |g, y| g / y);
                    let mut gb = upstream;
                    for ((g, &x), &y) in gb.data.iter_mut().zip(&av.data).zip(&bv.data) {
                        *g *= -x / (y * y);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Square(x) => {
                    let g = upstream.zip(self.value(*x), |g, v| 2.0 * g * v);
                    accumulate(&mut grads, *x, g);
                }
                Op::Sum(x) => {
                    let g = Tensor::filled(&self.value(*x).shape, upstream.data[0]);
                    accumulate(&mut grads, *x, g);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let g = Tensor::filled(&xv.shape, upstream.data[0] / xv.len() as f64);
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, upstream.map(|g| g * c));
                }
                Op::AddScalar(x) => accumulate(&mut grads, *x, upstream),
                Op::Concat(a, b) => {
                    let (ac, bc) = (
                        self.value(*a).matrix_dims().expect("2-D").1,
                        self.value(*b).matrix_dims().expect("2-D").1,
                    );
                    let mut ga = Vec::new();
                    let mut gb = Vec::new();
                    for row in upstream.data.chunks(ac + bc) {
                        ga.extend_from_slice(&row[..ac]);
                        gb.extend_from_slice(&row[ac..]);
                    }
                    accumulate(&mut grads, *a, reshape_like(ga.into_iter(), self.value(*a)));
                    accumulate(&mut grads, *b, reshape_like(gb.into_iter(), self.value(*b)));
                }
                Op::BroadcastRows(x) => {
                    let xv = self.value(*x);
                    let mut g = vec![0.0; xv.len()];
                    for row in upstream.data.chunks(xv.len()) {
                        for (gi, r) in g.iter_mut().zip(row) {
                            *gi += r;
                        }
                    }
                    accumulate(&mut grads, *x, reshape_like(g.into_iter(), xv));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reshape_like(values: impl Iterator<Item = f64>, like: &Tensor) -> Tensor {
    Tensor {
        shape: like.shape.clone(),
        data: values.collect(),
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss on a fresh graph from the parameter nodes it is
/// handed. Returns the largest `|analytic - numeric| / max(1, |analytic|)`
/// over every parameter entry. Fails if two evaluations at the same point
/// disagree, since finite differences are meaningless then.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &ids)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape.clone()));
        }
        Ok(v.data[0])
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let base = g.scalar(loss);
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(base, again));
    }

    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for j in 0..work[pi].len() {
            let orig = work[pi].data[j];
            work[pi].data[j] = orig + h;
            let plus = eval(&work)?;
            work[pi].data[j] = orig - h;
            let minus = eval(&work)?;
            work[pi].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-scale..scale)).collect::<Vec<_>>())
    }

    #[test]
    fn affine_identity_and_hand_case() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[1.0, 2.0]));
        let w = g.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0]);
        assert_eq!(g.value(y).shape(), &[1, 2]);

        let zero = g.param(Tensor::zeros(&[2]));
        let y = g.affine(x, w, zero).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        let w = g.param(Tensor::zeros(&[4, 2]));
        let b = g.param(Tensor::zeros(&[2]));
        let err = g.affine(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[0.0, -3.0]));
        let th = g.tanh(x).unwrap();
        let r = g.relu(x).unwrap();
        let sp = g.softplus(x).unwrap();
        assert_eq!(g.value(th).data()[0], 0.0);
        assert_eq!(g.value(r).data()[1], 0.0);
        assert!((g.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.value(sp).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_of_nonpositive_is_error() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 0.0]));
        assert!(g.log(x).is_err());
    }

    #[test]
    fn non_finite_output_is_error() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn tanh_at_zero_passes_input_through() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[0.5, -1.0, 2.0]));
        let w = g.param(Tensor::zeros(&[3, 1]));
        let b = g.param(Tensor::zeros(&[1]));
        let wx = g.affine(x, w, b).unwrap();
        let th = g.tanh(wx).unwrap();
        let loss = g.sum(th).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -0.5]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let loss = g.sum(z).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[4.0, 0.0]);
    }

    fn three_layer(g: &mut Graph, p: &[NodeId]) -> Result<NodeId> {
        let h1 = g.affine(p[0], p[1], p[2])?;
        let a1 = g.tanh(h1)?;
        let h2 = g.affine(a1, p[3], p[4])?;
        let a2 = g.softplus(h2)?;
        let h3 = g.affine(a2, p[5], p[6])?;
        let a3 = g.exp(h3)?;
        let l = g.add_scalar(a3, 1.0)?;
        let l = g.log(l)?;
        let sq = g.square(l)?;
        g.mean(sq)
    }

    #[test]
    fn three_layer_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            random(&mut rng, &[3, 4], 1.0),
            random(&mut rng, &[4, 5], 0.7),
            random(&mut rng, &[5], 0.2),
            random(&mut rng, &[5, 3], 0.7),
            random(&mut rng, &[3], 0.2),
            random(&mut rng, &[3, 2], 0.7),
            random(&mut rng, &[2], 0.2),
        ];
        let err = grad_check(three_layer, &params, 1e-5).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let a = random(&mut rng, &[2, 3], 1.0);
            let b = random(&mut rng, &[2, 3], 1.0).map(|v| v.abs() + 0.5);
            let row = random(&mut rng, &[3], 1.0);
            let other = random(&mut rng, &[2, 2], 1.0);
            let err = grad_check(
                |g, p| {
                    let s = g.sub(p[0], p[1])?;
                    let m = g.mul(s, p[1])?;
                    let d = g.div(m, p[1])?;
                    let r = g.relu(p[0])?;
                    let sp = g.softplus(d)?;
                    let e = g.exp(r)?;
                    let lg = g.log(p[1])?;
                    let th = g.tanh(lg)?;
                    let br = g.broadcast_rows(p[2], 2)?;
                    let x = g.add(sp, e)?;
                    let x = g.add(x, th)?;
                    let x = g.mul(x, br)?;
                    let c = g.concat(x, p[3])?;
                    let c = g.scale(c, 0.3)?;
                    let c = g.square(c)?;
                    let s = g.sum(c)?;
                    let mn = g.mean(p[0])?;
                    let t = g.add(s, mn)?;
                    g.add_scalar(t, 2.0)
                },
                &[a, b, row, other],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "max relative error {err}");
        }
    }

    #[test]
    fn quadratic_is_nearly_exact() {
        let params = vec![t(&[3], &[0.3, -1.2, 2.0])];
        let err = grad_check(
            |g, p| {
                let sq = g.square(p[0])?;
                let s = g.scale(sq, 1.5)?;
                g.sum(s)
            },
            &params,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_rejects_hidden_randomness() {
        use std::cell::Cell;
        let counter = Cell::new(0u64);
        let res = grad_check(
            |g, p| {
                counter.set(counter.get() + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(counter.get());
                let noise = g.input(Tensor::scalar(rng.random::<f64>()));
                let s = g.sum(p[0])?;
                g.add(s, noise)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonDeterministic(..))));
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.param(random(&mut rng, &[4, 3], 1.0));
        let w = g.param(random(&mut rng, &[3, 2], 1.0));
        let b = g.param(random(&mut rng, &[2], 1.0));
        let h = g.affine(x, w, b).unwrap();
        let h = g.tanh(h).unwrap();
        let loss = g.sum(h).unwrap();
        let g1 = g.backward(loss).unwrap();
        let g4 = g.backward_scaled(loss, 4.0).unwrap();
        for id in [x, w, b] {
            for (a, b) in g1.get(id).data().iter().zip(g4.get(id).data()) {
                assert_eq!(4.0 * a, *b);
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = [random(&mut rng, &[3, 4], 1.0),
            random(&mut rng, &[4, 5], 0.7),
            random(&mut rng, &[5], 0.2),
            random(&mut rng, &[5, 3], 0.7),
            random(&mut rng, &[3], 0.2),
            random(&mut rng, &[3, 2], 0.7),
            random(&mut rng, &[2], 0.2)];
        let run = || {
            let mut g = Graph::new();
            let ids: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
            let loss = three_layer(&mut g, &ids).unwrap();
            let grads = g.backward(loss).unwrap();
            (
                g.scalar(loss).to_bits(),
                ids.iter()
                    .flat_map(|&i| grads.get(i).into_data())
                    .map(f64::to_bits)
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
