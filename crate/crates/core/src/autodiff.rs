//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive records its inputs on a [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse and accumulates vector-Jacobian products. Composite kernels
//! whose adjoint is cheaper to state directly (the attention moment chain) plug
//! in through [`CustomOp`].
//!
//! A tape is single-threaded. Independent tapes share nothing, so one tape per
//! simulated client can run on its own thread.

use std::fmt;
use std::sync::Arc;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable kernel with a hand-written adjoint.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Gradients with respect to each input given the gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Act(Var, Activation),
    Sum(Var),
    Reshape(Var, usize, usize),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Mean(Vec<Var>),
    SoftmaxXent { logits: Var, rows: Arc<[usize]>, labels: Arc<[usize]> },
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::MatMul(..) => "matmul".into(),
            Op::Add(..) => "add".into(),
            Op::Sub(..) => "sub".into(),
            Op::Mul(..) => "mul".into(),
            Op::Div(..) => "div".into(),
            Op::Scale(..) => "scale".into(),
            Op::Transpose(..) => "transpose".into(),
            Op::Act(_, a) => format!("activation {a:?}"),
            Op::Sum(..) => "sum".into(),
            Op::Reshape(..) => "reshape".into(),
            Op::GatherRows(..) => "gather_rows".into(),
            Op::SegmentSum(..) => "segment_sum".into(),
            Op::SliceCols(..) => "slice_cols".into(),
            Op::ConcatCols(..) => "concat_cols".into(),
            Op::ConcatRows(..) => "concat_rows".into(),
            Op::MulCol(..) => "mul_col".into(),
            Op::DivCol(..) => "div_col".into(),
            Op::Mean(..) => "mean".into(),
            Op::SoftmaxXent { .. } => "softmax_cross_entropy".into(),
            Op::Custom(op, _) => op.name().into(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::MulCol(a, b) | Op::DivCol(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Act(a, _)
            | Op::Sum(a)
            | Op::Reshape(a, ..)
            | Op::GatherRows(a, _)
            | Op::SegmentSum(a, ..)
            | Op::SliceCols(a, ..) => vec![*a],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::ConcatCols(v) | Op::ConcatRows(v) | Op::Mean(v) | Op::Custom(_, v) => v.clone(),
        }
    }

    fn eval<'a>(&self, get: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
        Ok(match self {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => get(*a).matmul(get(*b))?,
            Op::Add(a, b) => get(*a).add(get(*b))?,
            Op::Sub(a, b) => get(*a).sub(get(*b))?,
            Op::Mul(a, b) => get(*a).hadamard(get(*b))?,
            Op::Div(a, b) => get(*a).zip_map(get(*b), "div", |x, y| x / y)?,
            Op::Scale(a, c) => get(*a).scale(*c),
            Op::Transpose(a) => get(*a).transpose(),
            Op::Act(a, act) => get(*a).map(|x| act.apply(x)),
            Op::Sum(a) => Tensor::scalar(get(*a).sum()),
            Op::Reshape(a, r, c) => get(*a).reshape(*r, *c)?,
            Op::GatherRows(a, idx) => {
                let t = get(*a);
                if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
                    return Err(Error::shape("gather_rows", format!("row {bad} of {}", t.rows())));
                }
                t.select_rows(idx)
            }
            Op::SegmentSum(a, seg, n) => {
                let t = get(*a);
                if seg.len() != t.rows() {
                    return Err(Error::shape(
                        "segment_sum",
                        format!("{} segment ids for {} rows", seg.len(), t.rows()),
                    ));
                }
                let c = t.cols();
                let mut out = Tensor::zeros(*n, c);
                for (r, &s) in seg.iter().enumerate() {
                    if s >= *n {
                        return Err(Error::shape("segment_sum", format!("segment {s} of {n}")));
                    }
                    let src = t.row_slice(r);
                    let dst = &mut out.data_mut()[s * c..(s + 1) * c];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
                out
            }
            Op::SliceCols(a, s, e) => {
                let t = get(*a);
                if s >= e || *e > t.cols() {
                    return Err(Error::shape("slice_cols", format!("{s}..{e} of {}", t.cols())));
                }
                let mut data = Vec::with_capacity(t.rows() * (e - s));
                for r in 0..t.rows() {
                    data.extend_from_slice(&t.row_slice(r)[*s..*e]);
                }
                Tensor::matrix(t.rows(), e - s, data)?
            }
            Op::ConcatCols(vs) => {
                let ts: Vec<&Tensor> = vs.iter().map(|v| get(*v)).collect();
                let rows = ts[0].rows();
                if ts.iter().any(|t| t.rows() != rows) {
                    return Err(Error::shape("concat_cols", "row counts differ"));
                }
                let cols: usize = ts.iter().map(|t| t.cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in &ts {
                        data.extend_from_slice(t.row_slice(r));
                    }
                }
                Tensor::matrix(rows, cols, data)?
            }
            Op::ConcatRows(vs) => {
                let ts: Vec<&Tensor> = vs.iter().map(|v| get(*v)).collect();
                let cols = ts[0].cols();
                if ts.iter().any(|t| t.cols() != cols) {
                    return Err(Error::shape("concat_rows", "column counts differ"));
                }
                let rows: usize = ts.iter().map(|t| t.rows()).sum();
                let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::matrix(rows, cols, data)?
            }
            Op::MulCol(a, b) | Op::DivCol(a, b) => {
                let (ta, tb) = (get(*a), get(*b));
                if tb.cols() != 1 || tb.rows() != ta.rows() {
                    return Err(Error::shape(
                        "mul_col",
                        format!("{:?} by column {:?}", ta.shape(), tb.shape()),
                    ));
                }
                let c = ta.cols();
                let div = matches!(self, Op::DivCol(..));
                let mut out = ta.clone();
                for r in 0..ta.rows() {
                    let s = tb.data()[r];
                    for v in &mut out.data_mut()[r * c..(r + 1) * c] {
                        if div {
                            *v /= s
                        } else {
                            *v *= s
                        }
                    }
                }
                out
            }
            Op::Mean(vs) => {
                let mut acc = get(vs[0]).clone();
                for v in &vs[1..] {
                    acc.add_assign(get(*v))?;
                }
                acc.scale(1.0 / vs.len() as f64)
            }
            Op::SoftmaxXent { logits, rows, labels } => {
                let t = get(*logits);
                let (_, loss) = softmax_xent(t, rows, labels)?;
                Tensor::scalar(loss)
            }
            Op::Custom(op, vs) => {
                let refs: Vec<&Tensor> = vs.iter().map(|v| get(*v)).collect();
                op.forward(&refs)?
            }
        })
    }
}

/// Row-wise softmax probabilities of the selected rows and the mean negative
/// log-likelihood of `labels` under them.
fn softmax_xent(logits: &Tensor, rows: &[usize], labels: &[usize]) -> Result<(Vec<Vec<f64>>, f64)> {
    if rows.is_empty() {
        return Err(Error::Invalid("cross-entropy over an empty mask".into()));
    }
    if rows.len() != labels.len() {
        return Err(Error::shape("softmax_cross_entropy", "rows and labels differ in length"));
    }
    let c = logits.cols();
    let mut probs = Vec::with_capacity(rows.len());
    let mut total = 0.0;
    for (&r, &y) in rows.iter().zip(labels) {
        if r >= logits.rows() || y >= c {
            return Err(Error::shape("softmax_cross_entropy", format!("row {r}, label {y}")));
        }
        let z = logits.row_slice(r);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
        probs.push(z.iter().map(|v| (v - lse).exp()).collect());
    }
    Ok((probs, total / rows.len() as f64))
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of the forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when nothing flowed into it.
    pub fn wrt_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            op.eval(&|v: Var| &nodes[v.0].value)?
        };
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Div(a, b))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }
    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        self.record(Op::Act(a, act))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Act(a, Activation::Exp))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.record(Op::Reshape(a, rows, cols))
    }
    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        self.record(Op::GatherRows(a, idx.into()))
    }
    /// Sums rows sharing a segment id into `n` output rows.
    pub fn segment_sum(&mut self, a: Var, seg: impl Into<Arc<[usize]>>, n: usize) -> Result<Var> {
        self.record(Op::SegmentSum(a, seg.into(), n))
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.record(Op::SliceCols(a, start, end))
    }
    pub fn concat_cols(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        self.record(Op::ConcatCols(vs.to_vec()))
    }
    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        self.record(Op::ConcatRows(vs.to_vec()))
    }
    /// Scales row `r` of `a` by `col[r]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.record(Op::MulCol(a, col))
    }
    /// Divides row `r` of `a` by `col[r]`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.record(Op::DivCol(a, col))
    }
    /// Elementwise mean of equally shaped inputs.
    pub fn mean(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::shape("mean", "no inputs"));
        }
        self.record(Op::Mean(vs.to_vec()))
    }
    /// Mean softmax cross-entropy of `labels` over the selected logit rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, rows: &[usize], labels: &[usize]) -> Result<Var> {
        self.record(Op::SoftmaxXent { logits, rows: rows.into(), labels: labels.into() })
    }
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        self.record(Op::Custom(op, inputs.to_vec()))
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => op.eval(&|v: Var| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(root.value.shape().to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.vjp(node, &g)?;
            // gradients of interior nodes are not reported
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot => *slot = Some(contrib),
                }
            }
        }
        // keep only leaves
        for (id, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[id].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(*b).transpose())?;
                let gb = val(*a).transpose().matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.hadamard(val(*b))?), (*b, g.hadamard(val(*a))?)],
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = g.zip_map(tb, "div", |g, y| g / y)?;
                let mut gb = g.hadamard(ta)?;
                for (v, y) in gb.data_mut().iter_mut().zip(tb.data()) {
                    *v = -*v / (y * y);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Act(a, act) => {
                let x = val(*a);
                let mut ga = g.clone();
                for (v, &xi) in ga.data_mut().iter_mut().zip(x.data()) {
                    *v *= act.derivative(xi);
                }
                vec![(*a, ga)]
            }
            Op::Sum(a) => {
                let x = val(*a);
                vec![(*a, Tensor::new(x.shape().to_vec(), vec![g.item(); x.numel()])?)]
            }
            Op::Reshape(a, ..) => {
                let x = val(*a);
                vec![(*a, Tensor::new(x.shape().to_vec(), g.data().to_vec())?)]
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.rows(), c);
                for (r, &src) in idx.iter().enumerate() {
                    let gr = g.row_slice(r);
                    for (d, v) in ga.data_mut()[src * c..(src + 1) * c].iter_mut().zip(gr) {
                        *d += v;
                    }
                }
                vec![(*a, ga)]
            }
            Op::SegmentSum(a, seg, _) => vec![(*a, g.select_rows(seg))],
            Op::SliceCols(a, s, e) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (k, c) in (*s..*e).enumerate() {
                        ga.set(r, c, g.get(r, k));
                    }
                }
                vec![(*a, ga)]
            }
            Op::ConcatCols(vs) => {
                let mut out = Vec::with_capacity(vs.len());
                let mut offset = 0;
                for v in vs {
                    let x = val(*v);
                    let mut gv = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        for c in 0..x.cols() {
                            gv.set(r, c, g.get(r, offset + c));
                        }
                    }
                    offset += x.cols();
                    out.push((*v, gv));
                }
                out
            }
            Op::ConcatRows(vs) => {
                let mut out = Vec::with_capacity(vs.len());
                let mut offset = 0;
                for v in vs {
                    let x = val(*v);
                    let n = x.numel();
                    let gv = Tensor::new(x.shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    out.push((*v, gv));
                }
                out
            }
            Op::MulCol(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(tb.rows(), 1);
                for r in 0..ta.rows() {
                    let s = tb.data()[r];
                    let mut acc = 0.0;
                    for k in 0..c {
                        acc += g.get(r, k) * ta.get(r, k);
                        ga.data_mut()[r * c + k] *= s;
                    }
                    gb.data_mut()[r] = acc;
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::DivCol(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(tb.rows(), 1);
                for r in 0..ta.rows() {
                    let s = tb.data()[r];
                    let mut acc = 0.0;
                    for k in 0..c {
                        acc += g.get(r, k) * ta.get(r, k);
                        ga.data_mut()[r * c + k] /= s;
                    }
                    gb.data_mut()[r] = -acc / (s * s);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mean(vs) => {
                let share = g.scale(1.0 / vs.len() as f64);
                vs.iter().map(|v| (*v, share.clone())).collect()
            }
            Op::SoftmaxXent { logits, rows, labels } => {
                let x = val(*logits);
                let (probs, _) = softmax_xent(x, rows, labels)?;
                let scale = g.item() / rows.len() as f64;
                let mut gl = Tensor::zeros(x.rows(), x.cols());
                for ((&r, &y), p) in rows.iter().zip(labels.iter()).zip(probs) {
                    for (k, pk) in p.into_iter().enumerate() {
                        let target = if k == y { 1.0 } else { 0.0 };
                        let cur = gl.get(r, k);
                        gl.set(r, k, cur + scale * (pk - target));
                    }
                }
                vec![(*logits, gl)]
            }
            Op::Custom(op, vs) => {
                let ins: Vec<&Tensor> = vs.iter().map(|v| val(*v)).collect();
                let gs = op.backward(&ins, &node.value, g)?;
                if gs.len() != vs.len() {
                    return Err(Error::shape(op.name(), "backward returned wrong gradient count"));
                }
                vs.iter().copied().zip(gs).collect()
            }
        })
    }
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter index, coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Denominator floor for relative errors, so coordinates whose true gradient is
/// zero are judged on absolute error at this scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `backward` against `(f(θ+ε) − f(θ−ε)) / 2ε` on every coordinate of
/// every parameter. `f` receives the parameters as tape leaves and returns a
/// scalar node.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Invalid(format!("grad_check eps must be in (0, 1e-2], got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, worst: (0, 0), coordinates: 0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, (p, v)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt_or_zeros(*v, p);
        for k in 0..p.numel() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, k);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
