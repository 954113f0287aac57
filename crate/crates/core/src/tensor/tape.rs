//! Reverse-mode differentiation over dense matrices.
//!
//! A [`GradTape`] records every operation applied to its [`Var`]s in
//! execution order, which is already a topological order of the graph.
//! [`GradTape::backward`] walks the record once in reverse and returns the
//! gradients of the registered parameters only.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use crate::error::{HvplError, Result};

use super::matrix::softmax_in_place;
use super::Matrix;

/// Vector–Jacobian product of an operation defined outside the tape.
pub trait CustomBackward {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, in input order.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>>;
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Silu(usize),
    Softplus(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows(usize, f64),
    Sum(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Pick(usize, Vec<(usize, usize)>),
    DepthwiseConv(usize, usize),
    Custom(Vec<usize>, Box<dyn CustomBackward>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward/backward pass. Single-writer.
#[derive(Default)]
pub struct GradTape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, usize>>,
}

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t GradTape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.map.get(name)
    }

    pub fn take(&mut self, name: &str) -> Option<Matrix> {
        self.map.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Registers `value` as a trainable parameter under `name`.
    pub fn param(&self, name: impl Into<String>, value: Matrix) -> Result<Var<'_>> {
        let name = name.into();
        if self.params.borrow().contains_key(&name) {
            return Err(HvplError::Usage(format!("parameter {name} registered twice")));
        }
        let v = self.push(value, Op::Leaf, true);
        self.params.borrow_mut().insert(name, v.id);
        Ok(v)
    }

    /// Either a parameter or a constant depending on `trainable`.
    pub fn leaf(&self, name: &str, value: &Matrix, trainable: bool) -> Result<Var<'_>> {
        if trainable {
            self.param(name, value.clone())
        } else {
            Ok(self.constant(value.clone()))
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.borrow().keys().cloned().collect()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Records an externally computed operation with its own backward rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Matrix,
        rule: Box<dyn CustomBackward>,
    ) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let needs = self.needs(&ids);
        self.push(output, Op::Custom(ids, rule), needs)
    }

    /// Reverse pass from a `1 × 1` loss node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.shape() != (1, 1) {
            return Err(HvplError::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contrib) in local_grads(&nodes, node, &g)? {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot => *slot = Some(contrib),
                }
            }
        }

        let mut map = BTreeMap::new();
        for (name, &id) in self.params.borrow().iter() {
            let g = grads
                .get_mut(id)
                .and_then(Option::take)
                .unwrap_or_else(|| {
                    let (r, c) = nodes[id].value.shape();
                    Matrix::zeros(r, c)
                });
            map.insert(name.clone(), g);
        }
        Ok(Gradients { map })
    }
}

fn unary<'t>(v: Var<'t>, value: Matrix, op: Op) -> Var<'t> {
    let needs = v.tape.needs(&[v.id]);
    v.tape.push(value, op, needs)
}

fn binary<'t>(a: Var<'t>, b: Var<'t>, value: Matrix, op: Op) -> Var<'t> {
    debug_assert!(std::ptr::eq(a.tape, b.tape), "vars from different tapes");
    let needs = a.tape.needs(&[a.id, b.id]);
    a.tape.push(value, op, needs)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t GradTape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Matrix> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn scalar(&self) -> f64 {
        self.value().get(0, 0)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(binary(self, other, v, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul_t(&other.value())?;
        Ok(binary(self, other, v, Op::MatMulT(self.id, other.id)))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().transpose();
        unary(self, v, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().add(&other.value())?;
        Ok(binary(self, other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().sub(&other.value())?;
        Ok(binary(self, other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().hadamard(&other.value())?;
        Ok(binary(self, other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_with(&other.value(), |a, b| a / b)?;
        Ok(binary(self, other, v, Op::Div(self.id, other.id)))
    }

    fn check_row(&self, row: &Var<'t>, op: &'static str) -> Result<()> {
        let (_, c) = self.shape();
        if row.shape() != (1, c) {
            return Err(HvplError::shape(op, format!("row {:?} for cols {c}", row.shape())));
        }
        Ok(())
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.check_row(&row, "add_row")?;
        let mut v = self.value().clone();
        {
            let r = row.value();
            for i in 0..v.rows() {
                for (x, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                    *x += b;
                }
            }
        }
        Ok(binary(self, row, v, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row elementwise by a `1 × cols` row.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.check_row(&row, "mul_row")?;
        let mut v = self.value().clone();
        {
            let r = row.value();
            for i in 0..v.rows() {
                for (x, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                    *x *= b;
                }
            }
        }
        Ok(binary(self, row, v, Op::MulRow(self.id, row.id)))
    }

    /// Scales row `i` by entry `i` of a `rows × 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let (r, _) = self.shape();
        if col.shape() != (r, 1) {
            return Err(HvplError::shape(
                "mul_col",
                format!("column {:?} for rows {r}", col.shape()),
            ));
        }
        let mut v = self.value().clone();
        {
            let c = col.value();
            for i in 0..r {
                let s = c.get(i, 0);
                for x in v.row_mut(i) {
                    *x *= s;
                }
            }
        }
        Ok(binary(self, col, v, Op::MulCol(self.id, col.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        unary(self, v, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        unary(self, v, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        unary(self, v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        unary(self, v, Op::Log(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        unary(self, v, Op::Sigmoid(self.id))
    }

    /// `x · sigmoid(x)`
    pub fn silu(self) -> Var<'t> {
        let v = self.value().map(|x| x * sigmoid(x));
        unary(self, v, Op::Silu(self.id))
    }

    /// `ln(1 + eˣ)`
    pub fn softplus(self) -> Var<'t> {
        let v = self.value().map(softplus);
        unary(self, v, Op::Softplus(self.id))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let v = self.value().softmax_rows();
        unary(self, v, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let mut v = self.value().clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        unary(self, v, Op::LogSoftmaxRows(self.id))
    }

    pub fn layer_norm_rows(self, eps: f64) -> Var<'t> {
        let v = self.value().layer_norm_rows(eps);
        unary(self, v, Op::LayerNormRows(self.id, eps))
    }

    /// Sum of all entries as a `1 × 1` value.
    pub fn sum(self) -> Var<'t> {
        let v = Matrix::filled(1, 1, self.value().sum());
        unary(self, v, Op::Sum(self.id))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value().slice_rows(start, len)?;
        Ok(unary(self, v, Op::SliceRows(self.id, start)))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value().slice_cols(start, len)?;
        Ok(unary(self, v, Op::SliceCols(self.id, start)))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| HvplError::Usage("concat of zero parts".into()))?
            .tape;
        let v = {
            let vals: Vec<Ref<Matrix>> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Matrix> = vals.iter().map(|r| &**r).collect();
            Matrix::concat_rows(&refs)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        Ok(tape.push(v, Op::ConcatRows(ids), needs))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| HvplError::Usage("concat of zero parts".into()))?
            .tape;
        let v = {
            let vals: Vec<Ref<Matrix>> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Matrix> = vals.iter().map(|r| &**r).collect();
            Matrix::concat_cols(&refs)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        Ok(tape.push(v, Op::ConcatCols(ids), needs))
    }

    /// Gathers the listed entries into a `1 × n` row.
    pub fn pick(self, entries: &[(usize, usize)]) -> Result<Var<'t>> {
        let v = {
            let m = self.value();
            let mut out = Vec::with_capacity(entries.len());
            for &(r, c) in entries {
                if r >= m.rows() || c >= m.cols() {
                    return Err(HvplError::shape("pick", format!("({r}, {c}) of {:?}", m.shape())));
                }
                out.push(m.get(r, c));
            }
            Matrix::row_vector(&out)
        };
        Ok(unary(self, v, Op::Pick(self.id, entries.to_vec())))
    }

    /// Depth-wise 1-D convolution along the rows with "same" padding.
    ///
    /// `kernel` is `k × channels`; output row `i` is
    /// `Σ_m x[i + m − left] ⊙ kernel[m]` with `left = (k − 1) / 2` and
    /// out-of-range rows treated as zero.
    pub fn depthwise_conv1d(self, kernel: Var<'t>) -> Result<Var<'t>> {
        let v = depthwise_conv_forward(&self.value(), &kernel.value())?;
        Ok(binary(self, kernel, v, Op::DepthwiseConv(self.id, kernel.id)))
    }
}

pub(crate) fn depthwise_conv_forward(x: &Matrix, kernel: &Matrix) -> Result<Matrix> {
    let (n, c) = x.shape();
    let (k, kc) = kernel.shape();
    if kc != c || k == 0 {
        return Err(HvplError::shape(
            "depthwise_conv1d",
            format!("kernel {k}x{kc} for {c} channels"),
        ));
    }
    let left = (k - 1) / 2;
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        for m in 0..k {
            let src = i as isize + m as isize - left as isize;
            if src < 0 || src >= n as isize {
                continue;
            }
            let xr = x.row(src as usize);
            let kr = kernel.row(m);
            for ((o, a), b) in out.row_mut(i).iter_mut().zip(xr).zip(kr) {
                *o += a * b;
            }
        }
    }
    Ok(out)
}

fn local_grads(nodes: &[Node], node: &Node, g: &Matrix) -> Result<Vec<(usize, Matrix)>> {
    let val = |i: usize| &nodes[i].value;
    let out = &node.value;
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => vec![
            (*a, g.matmul_t(val(*b))?),
            (*b, val(*a).t_matmul(g)?),
        ],
        Op::MatMulT(a, b) => vec![(*a, g.matmul(val(*b))?), (*b, g.t_matmul(val(*a))?)],
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
        Op::Mul(a, b) => vec![(*a, g.hadamard(val(*b))?), (*b, g.hadamard(val(*a))?)],
        Op::Div(a, b) => {
            let bv = val(*b);
            let ga = g.zip_with(bv, |g, b| g / b)?;
            let gb = ga.hadamard(out)?.scale(-1.0);
            vec![(*a, ga), (*b, gb)]
        }
        Op::AddRow(a, r) => {
            let mut gr = Matrix::zeros(1, g.cols());
            for i in 0..g.rows() {
                for (s, v) in gr.data_mut().iter_mut().zip(g.row(i)) {
                    *s += v;
                }
            }
            vec![(*a, g.clone()), (*r, gr)]
        }
        Op::MulRow(a, r) => {
            let av = val(*a);
            let rv = val(*r);
            let mut ga = g.clone();
            let mut gr = Matrix::zeros(1, g.cols());
            for i in 0..g.rows() {
                for (j, x) in ga.row_mut(i).iter_mut().enumerate() {
                    *x *= rv.get(0, j);
                }
                for ((s, gv), xv) in gr.data_mut().iter_mut().zip(g.row(i)).zip(av.row(i)) {
                    *s += gv * xv;
                }
            }
            vec![(*a, ga), (*r, gr)]
        }
        Op::MulCol(a, c) => {
            let av = val(*a);
            let cv = val(*c);
            let mut ga = g.clone();
            let mut gc = Matrix::zeros(g.rows(), 1);
            for i in 0..g.rows() {
                let s = cv.get(i, 0);
                for x in ga.row_mut(i) {
                    *x *= s;
                }
                gc.set(i, 0, g.row(i).iter().zip(av.row(i)).map(|(p, q)| p * q).sum());
            }
            vec![(*a, ga), (*c, gc)]
        }
        Op::Scale(a, s) => vec![(*a, g.scale(*s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Exp(a) => vec![(*a, g.hadamard(out)?)],
        Op::Log(a) => vec![(*a, g.zip_with(val(*a), |g, x| g / x)?)],
        Op::Sigmoid(a) => vec![(*a, g.zip_with(out, |g, s| g * s * (1.0 - s))?)],
        Op::Silu(a) => vec![(
            *a,
            g.zip_with(val(*a), |g, x| {
                let s = sigmoid(x);
                g * (s + x * s * (1.0 - s))
            })?,
        )],
        Op::Softplus(a) => vec![(*a, g.zip_with(val(*a), |g, x| g * sigmoid(x))?)],
        Op::SoftmaxRows(a) => {
            let mut ga = Matrix::zeros(g.rows(), g.cols());
            for i in 0..g.rows() {
                let y = out.row(i);
                let gi = g.row(i);
                let inner: f64 = y.iter().zip(gi).map(|(y, g)| y * g).sum();
                for ((o, yv), gv) in ga.row_mut(i).iter_mut().zip(y).zip(gi) {
                    *o = yv * (gv - inner);
                }
            }
            vec![(*a, ga)]
        }
        Op::LogSoftmaxRows(a) => {
            let mut ga = Matrix::zeros(g.rows(), g.cols());
            for i in 0..g.rows() {
                let mut p = val(*a).row(i).to_vec();
                softmax_in_place(&mut p);
                let gi = g.row(i);
                let total: f64 = gi.iter().sum();
                for ((o, pv), gv) in ga.row_mut(i).iter_mut().zip(&p).zip(gi) {
                    *o = gv - pv * total;
                }
            }
            vec![(*a, ga)]
        }
        Op::LayerNormRows(a, eps) => {
            let x = val(*a);
            let n = x.cols() as f64;
            let mut ga = Matrix::zeros(g.rows(), g.cols());
            for i in 0..g.rows() {
                let xr = x.row(i);
                let mean = xr.iter().sum::<f64>() / n;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let y = out.row(i);
                let gi = g.row(i);
                let gmean = gi.iter().sum::<f64>() / n;
                let gy = gi.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((o, gv), yv) in ga.row_mut(i).iter_mut().zip(gi).zip(y) {
                    *o = inv * (gv - gmean - yv * gy);
                }
            }
            vec![(*a, ga)]
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            vec![(*a, Matrix::filled(r, c, g.get(0, 0)))]
        }
        Op::SliceRows(a, start) => {
            let (r, c) = val(*a).shape();
            let mut ga = Matrix::zeros(r, c);
            ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            vec![(*a, ga)]
        }
        Op::SliceCols(a, start) => {
            let (r, c) = val(*a).shape();
            let mut ga = Matrix::zeros(r, c);
            for i in 0..r {
                ga.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
            }
            vec![(*a, ga)]
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            let mut res = Vec::with_capacity(ids.len());
            for &id in ids {
                let r = val(id).rows();
                res.push((id, g.slice_rows(offset, r)?));
                offset += r;
            }
            res
        }
        Op::ConcatCols(ids) => {
            let mut offset = 0;
            let mut res = Vec::with_capacity(ids.len());
            for &id in ids {
                let c = val(id).cols();
                res.push((id, g.slice_cols(offset, c)?));
                offset += c;
            }
            res
        }
        Op::Pick(a, entries) => {
            let (r, c) = val(*a).shape();
            let mut ga = Matrix::zeros(r, c);
            for (k, &(i, j)) in entries.iter().enumerate() {
                let cur = ga.get(i, j);
                ga.set(i, j, cur + g.get(0, k));
            }
            vec![(*a, ga)]
        }
        Op::DepthwiseConv(x, w) => {
            let xv = val(*x);
            let wv = val(*w);
            let (n, c) = xv.shape();
            let k = wv.rows();
            let left = (k - 1) / 2;
            let mut gx = Matrix::zeros(n, c);
            let mut gw = Matrix::zeros(k, c);
            for i in 0..n {
                let gi = g.row(i);
                for m in 0..k {
                    let src = i as isize + m as isize - left as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ch in 0..c {
                        let gx_cur = gx.get(src, ch);
                        gx.set(src, ch, gx_cur + gi[ch] * wv.get(m, ch));
                        let gw_cur = gw.get(m, ch);
                        gw.set(m, ch, gw_cur + gi[ch] * xv.get(src, ch));
                    }
                }
            }
            vec![(*x, gx), (*w, gw)]
        }
        Op::Custom(ids, rule) => {
            let inputs: Vec<&Matrix> = ids.iter().map(|&i| val(i)).collect();
            let gs = rule.backward(&inputs, out, g)?;
            if gs.len() != ids.len() {
                return Err(HvplError::Usage(format!(
                    "custom op {} returned {} gradients for {} inputs",
                    rule.name(),
                    gs.len(),
                    ids.len()
                )));
            }
            ids.iter().copied().zip(gs).collect()
        }
    })
}
