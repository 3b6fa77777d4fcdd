//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] records every operation of one forward pass as an append-only
//! node list; [`Graph::backward`] replays it in reverse, accumulating
//! gradients via each node's captured backward rule. Nodes are immutable once
//! written, so a finished graph can be read from multiple threads.
//!
//! Non-finite values are rejected at the boundary: leaves and constants are
//! validated on entry, and every operation checks its inputs, so a NaN/Inf
//! produced anywhere fails fast with the name of the offending node.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`. Leaves that did not participate in
    /// the loss get a zero gradient of the right shape.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

// ── tensor kernels shared by forward and backward rules ─────────────

pub(crate) fn raw_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out).expect("matmul output shape")
}

fn raw_transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.at(i, j);
        }
    }
    Tensor::matrix(c, r, out).expect("transpose shape")
}

fn softmax_lane(z: &[f64], out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z.iter()) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    const A: f64 = 0.7978845608028654; // sqrt(2/pi)
    const B: f64 = 0.044715;
    0.5 * x * (1.0 + (A * (x + B * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const A: f64 = 0.7978845608028654;
    const B: f64 = 0.044715;
    let u = A * (x + B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * B * x * x)
}

pub fn softplus_scalar(x: f64) -> f64 {
    // log(1 + e^x), stable on both tails
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── graph construction ───────────────────────────────────────────────

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Value of a node (cloned; node values are immutable once written).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of node '{}'", op)));
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        let id = nodes.len();
        nodes.push(Node { op, value, parents, backward, needs_grad });
        Ok(Var(id))
    }

    fn check_inputs(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        let nodes = self.nodes.borrow();
        for v in vars {
            if !nodes[v.0].value.all_finite() {
                return Err(Error::NonFinite(format!(
                    "input to node '{}' (from '{}')",
                    op, nodes[v.0].op
                )));
            }
        }
        Ok(())
    }

    /// Borrow two parent values and produce (value, backward) without cloning.
    fn with_values<R>(&self, vars: &[Var], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor> = vars.iter().map(|v| &nodes[v.0].value).collect();
        f(&vals)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::NonFinite("leaf tensor".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: "leaf",
            value: t,
            parents: vec![],
            backward: None,
            needs_grad: requires_grad,
        });
        Ok(Var(id))
    }

    pub fn constant(&self, t: Tensor) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::NonFinite("constant tensor".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: "constant",
            value: t,
            parents: vec![],
            backward: None,
            needs_grad: false,
        });
        Ok(Var(id))
    }

    pub fn scalar(&self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    // ── elementwise binary ───────────────────────────────────────────

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        fwd: impl Fn(f64, f64) -> f64,
        bwd: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Var> {
        self.check_inputs(op, &[a, b])?;
        let (value, av, bv) = self.with_values(&[a, b], |vals| {
            let (x, y) = (vals[0], vals[1]);
            if x.shape() != y.shape() {
                return Err(Error::Shape(format!(
                    "{}: shape {:?} vs {:?}",
                    op,
                    x.shape(),
                    y.shape()
                )));
            }
            let data = x
                .data()
                .iter()
                .zip(y.data().iter())
                .map(|(&p, &q)| fwd(p, q))
                .collect();
            Ok((
                Tensor::new(x.shape().to_vec(), data)?,
                x.clone(),
                y.clone(),
            ))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let mut da = Tensor::zeros(av.shape());
            let mut db = Tensor::zeros(bv.shape());
            for i in 0..d.numel() {
                let (ga, gb) = bwd(av.data()[i], bv.data()[i], d.data()[i]);
                da.data_mut()[i] = ga;
                db.data_mut()[i] = gb;
            }
            vec![da, db]
        });
        self.push(op, value, vec![a.0, b.0], Some(back))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, |_, _, d| (d, d))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, |_, _, d| (d, -d))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, |x, y, d| (d * y, d * x))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            "div",
            a,
            b,
            |x, y| x / y,
            |x, y, d| (d / y, -d * x / (y * y)),
        )
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn min_elem(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            "min",
            a,
            b,
            |x, y| x.min(y),
            |x, y, d| if x <= y { (d, 0.0) } else { (0.0, d) },
        )
    }

    pub fn max_elem(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            "max",
            a,
            b,
            |x, y| x.max(y),
            |x, y, d| if x >= y { (d, 0.0) } else { (0.0, d) },
        )
    }

    // ── elementwise unary ────────────────────────────────────────────

    fn unary(
        &self,
        op: &'static str,
        a: Var,
        fwd: impl Fn(f64) -> f64,
        // (x, y, d) -> dx where y = fwd(x)
        bwd: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        self.check_inputs(op, &[a])?;
        let (value, xv) = self.with_values(&[a], |vals| {
            let x = vals[0];
            (x.map(&fwd), x.clone())
        });
        let yv = value.clone();
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let mut dx = Tensor::zeros(xv.shape());
            for i in 0..d.numel() {
                dx.data_mut()[i] = bwd(xv.data()[i], yv.data()[i], d.data()[i]);
            }
            vec![dx]
        });
        self.push(op, value, vec![a.0], Some(back))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, |_, _, d| -d)
    }

    pub fn scale(&self, a: Var, k: f64) -> Result<Var> {
        self.unary("scale", a, move |x| x * k, move |_, _, d| d * k)
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Result<Var> {
        self.unary("add_scalar", a, move |x| x + k, |_, _, d| d)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), |_, y, d| d * y)
    }

    /// Natural log; the caller is responsible for epsilon floors.
    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary("ln", a, |x| x.ln(), |x, _, d| d / x)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, |x| x.sqrt(), |_, y, d| d * 0.5 / y)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid_scalar, |_, y, d| d * y * (1.0 - y))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), |_, y, d| d * (1.0 - y * y))
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu_scalar, |x, _, d| d * gelu_grad_scalar(x))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), |x, _, d| if x > 0.0 { d } else { 0.0 })
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus_scalar, |x, _, d| d * sigmoid_scalar(x))
    }

    // ── matrix ops ───────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check_inputs("matmul", &[a, b])?;
        let (value, av, bv) = self.with_values(&[a, b], |vals| {
            let (x, y) = (vals[0], vals[1]);
            if !x.is_matrix() || !y.is_matrix() || x.cols() != y.rows() {
                return Err(Error::Shape(format!(
                    "matmul: {:?} x {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
            Ok((raw_matmul(x, y), x.clone(), y.clone()))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let da = raw_matmul(d, &raw_transpose(&bv));
            let db = raw_matmul(&raw_transpose(&av), d);
            vec![da, db]
        });
        self.push("matmul", value, vec![a.0, b.0], Some(back))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.check_inputs("transpose", &[a])?;
        let value = self.with_values(&[a], |vals| {
            if !vals[0].is_matrix() {
                return Err(Error::Shape("transpose: not a matrix".into()));
            }
            Ok(raw_transpose(vals[0]))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| vec![raw_transpose(d)]);
        self.push("transpose", value, vec![a.0], Some(back))
    }

    /// Softmax along `axis` (1 = over each row, 0 = over each column).
    /// Vectors ignore `axis` and normalize the whole lane.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(a, axis, None)
    }

    /// Softmax with an optional key mask: `false` entries are excluded
    /// (treated as -inf logits) and receive exactly zero probability.
    pub fn softmax_masked(&self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_inputs("softmax", &[a])?;
        let mask: Option<Vec<bool>> = mask.map(|m| m.to_vec());
        let value = self.with_values(&[a], |vals| {
            let x = vals[0];
            softmax_tensor(x, axis, mask.as_deref())
        })?;
        let pv = value.clone();
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            vec![softmax_backward(&pv, d, axis)]
        });
        self.push("softmax", value, vec![a.0], Some(back))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        self.check_inputs("sum_all", &[a])?;
        let (value, shape) = self.with_values(&[a], |vals| {
            (
                Tensor::scalar(vals[0].data().iter().sum()),
                vals[0].shape().to_vec(),
            )
        });
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            vec![Tensor::full(&shape, d.item())]
        });
        self.push("sum_all", value, vec![a.0], Some(back))
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let n = self.shape_of(a).iter().product::<usize>();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over `axis` of a matrix: axis 0 pools rows (output `[cols]`),
    /// axis 1 pools columns (output `[rows]`).
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = {
            let shape = self.shape_of(a);
            if shape.len() != 2 {
                return Err(Error::Shape("mean_axis: expects a matrix".into()));
            }
            shape[axis]
        };
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.check_inputs("sum_axis", &[a])?;
        if axis > 1 {
            return Err(Error::Shape("sum_axis: axis must be 0 or 1".into()));
        }
        let (value, rows, cols) = self.with_values(&[a], |vals| {
            let x = vals[0];
            if !x.is_matrix() {
                return Err(Error::Shape("sum_axis: expects a matrix".into()));
            }
            let (r, c) = (x.rows(), x.cols());
            let t = if axis == 0 {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += x.at(i, j);
                    }
                }
                Tensor::vector(out)
            } else {
                let mut out = vec![0.0; r];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = x.row(i).iter().sum();
                }
                Tensor::vector(out)
            };
            Ok((t, r, c))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let mut dx = Tensor::zeros(&[rows, cols]);
            for i in 0..rows {
                for j in 0..cols {
                    let g = if axis == 0 { d.data()[j] } else { d.data()[i] };
                    dx.set(i, j, g);
                }
            }
            vec![dx]
        });
        self.push("sum_axis", value, vec![a.0], Some(back))
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_inputs("reshape", &[a])?;
        let shape = shape.to_vec();
        let (value, old_shape) = self.with_values(&[a], |vals| {
            let x = vals[0];
            if shape.iter().product::<usize>() != x.numel() {
                return Err(Error::Shape(format!(
                    "reshape: {:?} -> {:?}",
                    x.shape(),
                    shape
                )));
            }
            Ok((
                Tensor::new(shape.clone(), x.data().to_vec())?,
                x.shape().to_vec(),
            ))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            vec![Tensor::new(old_shape.clone(), d.data().to_vec()).expect("reshape back")]
        });
        self.push("reshape", value, vec![a.0], Some(back))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: empty input".into()));
        }
        self.check_inputs("concat_rows", parts)?;
        let (value, row_counts, cols) = self.with_values(parts, |vals| {
            let c = vals[0].cols();
            let mut data = Vec::new();
            let mut counts = Vec::new();
            for t in vals {
                if !t.is_matrix() || t.cols() != c {
                    return Err(Error::Shape("concat_rows: column mismatch".into()));
                }
                counts.push(t.rows());
                data.extend_from_slice(t.data());
            }
            let total: usize = counts.iter().sum();
            Ok((Tensor::matrix(total, c, data)?, counts, c))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let mut out = Vec::with_capacity(row_counts.len());
            let mut r0 = 0;
            for &rc in &row_counts {
                let slice = d.data()[r0 * cols..(r0 + rc) * cols].to_vec();
                out.push(Tensor::matrix(rc, cols, slice).expect("concat_rows back"));
                r0 += rc;
            }
            out
        });
        self.push(
            "concat_rows",
            value,
            parts.iter().map(|v| v.0).collect(),
            Some(back),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: empty input".into()));
        }
        self.check_inputs("concat_cols", parts)?;
        let (value, col_counts, rows) = self.with_values(parts, |vals| {
            let r = vals[0].rows();
            let mut counts = Vec::new();
            for t in vals {
                if !t.is_matrix() || t.rows() != r {
                    return Err(Error::Shape("concat_cols: row mismatch".into()));
                }
                counts.push(t.cols());
            }
            let total: usize = counts.iter().sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for t in vals {
                    data.extend_from_slice(t.row(i));
                }
            }
            Ok((Tensor::matrix(r, total, data)?, counts, r))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let mut out: Vec<Tensor> = col_counts
                .iter()
                .map(|&cc| Tensor::zeros(&[rows, cc]))
                .collect();
            for i in 0..rows {
                let mut c0 = 0;
                for (t, &cc) in out.iter_mut().zip(col_counts.iter()) {
                    for j in 0..cc {
                        t.set(i, j, d.at(i, c0 + j));
                    }
                    c0 += cc;
                }
            }
            out
        });
        self.push(
            "concat_cols",
            value,
            parts.iter().map(|v| v.0).collect(),
            Some(back),
        )
    }

    pub fn slice_rows(&self, a: Var, from: usize, to: usize) -> Result<Var> {
        self.check_inputs("slice_rows", &[a])?;
        let (value, rows, cols) = self.with_values(&[a], |vals| {
            let x = vals[0];
            if !x.is_matrix() || to > x.rows() || from >= to {
                return Err(Error::Shape(format!(
                    "slice_rows: [{from}, {to}) of {:?}",
                    x.shape()
                )));
            }
            let data = x.data()[from * x.cols()..to * x.cols()].to_vec();
            Ok((Tensor::matrix(to - from, x.cols(), data)?, x.rows(), x.cols()))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let mut dx = Tensor::zeros(&[rows, cols]);
            dx.data_mut()[from * cols..to * cols].copy_from_slice(d.data());
            vec![dx]
        });
        self.push("slice_rows", value, vec![a.0], Some(back))
    }

    pub fn slice_cols(&self, a: Var, from: usize, to: usize) -> Result<Var> {
        self.check_inputs("slice_cols", &[a])?;
        let (value, rows, cols) = self.with_values(&[a], |vals| {
            let x = vals[0];
            if !x.is_matrix() || to > x.cols() || from >= to {
                return Err(Error::Shape(format!(
                    "slice_cols: [{from}, {to}) of {:?}",
                    x.shape()
                )));
            }
            let mut data = Vec::with_capacity(x.rows() * (to - from));
            for i in 0..x.rows() {
                data.extend_from_slice(&x.row(i)[from..to]);
            }
            Ok((Tensor::matrix(x.rows(), to - from, data)?, x.rows(), x.cols()))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let mut dx = Tensor::zeros(&[rows, cols]);
            for i in 0..rows {
                for j in from..to {
                    dx.set(i, j, d.at(i, j - from));
                }
            }
            vec![dx]
        });
        self.push("slice_cols", value, vec![a.0], Some(back))
    }

    /// Gather rows by index (duplicates allowed; backward scatter-adds).
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check_inputs("gather_rows", &[a])?;
        let idx = idx.to_vec();
        let (value, rows, cols) = self.with_values(&[a], |vals| {
            let x = vals[0];
            if !x.is_matrix() {
                return Err(Error::Shape("gather_rows: expects a matrix".into()));
            }
            for &i in &idx {
                if i >= x.rows() {
                    return Err(Error::Shape(format!(
                        "gather_rows: index {i} out of {} rows",
                        x.rows()
                    )));
                }
            }
            let mut data = Vec::with_capacity(idx.len() * x.cols());
            for &i in &idx {
                data.extend_from_slice(x.row(i));
            }
            Ok((Tensor::matrix(idx.len(), x.cols(), data)?, x.rows(), x.cols()))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let mut dx = Tensor::zeros(&[rows, cols]);
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..cols {
                    let v = dx.at(i, j) + d.at(k, j);
                    dx.set(i, j, v);
                }
            }
            vec![dx]
        });
        self.push("gather_rows", value, vec![a.0], Some(back))
    }

    /// Broadcast a scalar node to a length-n vector; backward sums.
    pub fn broadcast_scalar(&self, a: Var, n: usize) -> Result<Var> {
        self.check_inputs("broadcast_scalar", &[a])?;
        let value = self.with_values(&[a], |vals| {
            if vals[0].numel() != 1 {
                return Err(Error::Shape("broadcast_scalar: input must be scalar".into()));
            }
            Ok(Tensor::full(&[n], vals[0].item()))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            vec![Tensor::scalar(d.data().iter().sum())]
        });
        self.push("broadcast_scalar", value, vec![a.0], Some(back))
    }

    /// Single element of a vector as a scalar node.
    pub fn index_scalar(&self, a: Var, i: usize) -> Result<Var> {
        self.check_inputs("index_scalar", &[a])?;
        let (value, shape) = self.with_values(&[a], |vals| {
            let x = vals[0];
            if i >= x.numel() {
                return Err(Error::Shape(format!(
                    "index_scalar: {i} out of {}",
                    x.numel()
                )));
            }
            Ok((Tensor::scalar(x.data()[i]), x.shape().to_vec()))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let mut dx = Tensor::zeros(&shape);
            dx.data_mut()[i] = d.item();
            vec![dx]
        });
        self.push("index_scalar", value, vec![a.0], Some(back))
    }

    // ── broadcast helpers ────────────────────────────────────────────

    /// Add a `[cols]` bias vector to every row of a `[rows, cols]` matrix.
    pub fn add_row_bias(&self, a: Var, b: Var) -> Result<Var> {
        self.check_inputs("add_row_bias", &[a, b])?;
        let (value, rows, cols) = self.with_values(&[a, b], |vals| {
            let (x, bias) = (vals[0], vals[1]);
            if !x.is_matrix() || bias.shape().len() != 1 || bias.numel() != x.cols() {
                return Err(Error::Shape(format!(
                    "add_row_bias: {:?} + {:?}",
                    x.shape(),
                    bias.shape()
                )));
            }
            let mut out = x.clone();
            for i in 0..x.rows() {
                for j in 0..x.cols() {
                    let v = out.at(i, j) + bias.data()[j];
                    out.set(i, j, v);
                }
            }
            Ok((out, x.rows(), x.cols()))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let mut db = Tensor::zeros(&[cols]);
            for i in 0..rows {
                for j in 0..cols {
                    db.data_mut()[j] += d.at(i, j);
                }
            }
            vec![d.clone(), db]
        });
        self.push("add_row_bias", value, vec![a.0, b.0], Some(back))
    }

    /// Multiply row `i` of a `[rows, cols]` matrix by scalar `s[i]`.
    pub fn scale_rows(&self, a: Var, s: Var) -> Result<Var> {
        self.check_inputs("scale_rows", &[a, s])?;
        let (value, xv, sv) = self.with_values(&[a, s], |vals| {
            let (x, sc) = (vals[0], vals[1]);
            if !x.is_matrix() || sc.shape().len() != 1 || sc.numel() != x.rows() {
                return Err(Error::Shape(format!(
                    "scale_rows: {:?} * {:?}",
                    x.shape(),
                    sc.shape()
                )));
            }
            let mut out = x.clone();
            for i in 0..x.rows() {
                let k = sc.data()[i];
                for j in 0..x.cols() {
                    let v = out.at(i, j) * k;
                    out.set(i, j, v);
                }
            }
            Ok((out, x.clone(), sc.clone()))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let (rows, cols) = (xv.rows(), xv.cols());
            let mut dx = Tensor::zeros(&[rows, cols]);
            let mut ds = Tensor::zeros(&[rows]);
            for i in 0..rows {
                let k = sv.data()[i];
                let mut dot = 0.0;
                for j in 0..cols {
                    dx.set(i, j, d.at(i, j) * k);
                    dot += d.at(i, j) * xv.at(i, j);
                }
                ds.data_mut()[i] = dot;
            }
            vec![dx, ds]
        });
        self.push("scale_rows", value, vec![a.0, s.0], Some(back))
    }

    // ── structured ops for the temporal pyramid ──────────────────────

    /// Unfold a `[L, C]` sequence into `[ceil(L/2), 3C]` windows
    /// (kernel 3, stride 2, replicate padding); a matmul against a
    /// `[3C, C_out]` weight then realizes a strided temporal convolution.
    /// Edge positions replicate the boundary frame so a constant sequence
    /// stays constant through the convolution.
    pub fn unfold_k3s2(&self, a: Var) -> Result<Var> {
        self.check_inputs("unfold_k3s2", &[a])?;
        let (value, rows, cols) = self.with_values(&[a], |vals| {
            let x = vals[0];
            if !x.is_matrix() || x.rows() == 0 {
                return Err(Error::Shape("unfold_k3s2: expects a nonempty matrix".into()));
            }
            let (l, c) = (x.rows(), x.cols());
            let out_l = l.div_ceil(2);
            let mut data = vec![0.0; out_l * 3 * c];
            for o in 0..out_l {
                let center = 2 * o as isize;
                for (w, off) in [-1isize, 0, 1].iter().enumerate() {
                    let t = (center + off).clamp(0, l as isize - 1) as usize;
                    let src = x.row(t);
                    let dst = &mut data[o * 3 * c + w * c..o * 3 * c + (w + 1) * c];
                    dst.copy_from_slice(src);
                }
            }
            Ok((Tensor::matrix(out_l, 3 * c, data)?, l, c))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let (l, c) = (rows, cols);
            let out_l = l.div_ceil(2);
            let mut dx = Tensor::zeros(&[l, c]);
            for o in 0..out_l {
                let center = 2 * o as isize;
                for (w, off) in [-1isize, 0, 1].iter().enumerate() {
                    let t = (center + off).clamp(0, l as isize - 1) as usize;
                    for j in 0..c {
                        let v = dx.at(t, j) + d.at(o, w * c + j);
                        dx.set(t, j, v);
                    }
                }
            }
            vec![dx]
        });
        self.push("unfold_k3s2", value, vec![a.0], Some(back))
    }

    /// Group normalization of a `[L, C]` sequence: channels are split into
    /// `groups`, each normalized over its `(L, C/groups)` block, then scaled
    /// and shifted per channel.
    pub fn group_norm(&self, a: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_inputs("group_norm", &[a, gamma, beta])?;
        let (value, xv, gv, stats) = self.with_values(&[a, gamma, beta], |vals| {
            let (x, g, b) = (vals[0], vals[1], vals[2]);
            if !x.is_matrix() {
                return Err(Error::Shape("group_norm: expects a matrix".into()));
            }
            let (l, c) = (x.rows(), x.cols());
            if groups == 0 || c % groups != 0 {
                return Err(Error::Config(format!(
                    "group_norm: {c} channels not divisible by {groups} groups"
                )));
            }
            if g.numel() != c || b.numel() != c {
                return Err(Error::Shape("group_norm: gamma/beta must be [C]".into()));
            }
            let gs = c / groups;
            let n = (l * gs) as f64;
            let mut out = Tensor::zeros(&[l, c]);
            let mut stats = Vec::with_capacity(groups); // (mean, inv_std)
            for grp in 0..groups {
                let c0 = grp * gs;
                let mut mean = 0.0;
                for i in 0..l {
                    for j in c0..c0 + gs {
                        mean += x.at(i, j);
                    }
                }
                mean /= n;
                let mut var = 0.0;
                for i in 0..l {
                    for j in c0..c0 + gs {
                        let dlt = x.at(i, j) - mean;
                        var += dlt * dlt;
                    }
                }
                var /= n;
                let inv_std = 1.0 / (var + eps).sqrt();
                for i in 0..l {
                    for j in c0..c0 + gs {
                        let xhat = (x.at(i, j) - mean) * inv_std;
                        out.set(i, j, g.data()[j] * xhat + b.data()[j]);
                    }
                }
                stats.push((mean, inv_std));
            }
            Ok((out, x.clone(), g.clone(), stats))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let (l, c) = (xv.rows(), xv.cols());
            let gs = c / groups;
            let n = (l * gs) as f64;
            let mut dx = Tensor::zeros(&[l, c]);
            let mut dgamma = Tensor::zeros(&[c]);
            let mut dbeta = Tensor::zeros(&[c]);
            for grp in 0..groups {
                let c0 = grp * gs;
                let (mean, inv_std) = stats[grp];
                // accumulate the two group-wide reductions of dxhat
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for i in 0..l {
                    for j in c0..c0 + gs {
                        let xhat = (xv.at(i, j) - mean) * inv_std;
                        let dxhat = d.at(i, j) * gv.data()[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma.data_mut()[j] += d.at(i, j) * xhat;
                        dbeta.data_mut()[j] += d.at(i, j);
                    }
                }
                for i in 0..l {
                    for j in c0..c0 + gs {
                        let xhat = (xv.at(i, j) - mean) * inv_std;
                        let dxhat = d.at(i, j) * gv.data()[j];
                        let g = inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                        dx.set(i, j, g);
                    }
                }
            }
            vec![dx, dgamma, dbeta]
        });
        self.push("group_norm", value, vec![a.0, gamma.0, beta.0], Some(back))
    }

    /// Per-row layer normalization of a `[L, C]` matrix.
    pub fn layer_norm(&self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_inputs("layer_norm", &[a, gamma, beta])?;
        let (value, xv, gv, stats) = self.with_values(&[a, gamma, beta], |vals| {
            let (x, g, b) = (vals[0], vals[1], vals[2]);
            if !x.is_matrix() || g.numel() != x.cols() || b.numel() != x.cols() {
                return Err(Error::Shape("layer_norm: shape mismatch".into()));
            }
            let (l, c) = (x.rows(), x.cols());
            let n = c as f64;
            let mut out = Tensor::zeros(&[l, c]);
            let mut stats = Vec::with_capacity(l);
            for i in 0..l {
                let row = x.row(i);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    let xhat = (row[j] - mean) * inv_std;
                    out.set(i, j, g.data()[j] * xhat + b.data()[j]);
                }
                stats.push((mean, inv_std));
            }
            Ok((out, x.clone(), g.clone(), stats))
        })?;
        let back: BackwardFn = Box::new(move |d: &Tensor| {
            let (l, c) = (xv.rows(), xv.cols());
            let n = c as f64;
            let mut dx = Tensor::zeros(&[l, c]);
            let mut dgamma = Tensor::zeros(&[c]);
            let mut dbeta = Tensor::zeros(&[c]);
            for i in 0..l {
                let (mean, inv_std) = stats[i];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..c {
                    let xhat = (xv.at(i, j) - mean) * inv_std;
                    let dxhat = d.at(i, j) * gv.data()[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma.data_mut()[j] += d.at(i, j) * xhat;
                    dbeta.data_mut()[j] += d.at(i, j);
                }
                for j in 0..c {
                    let xhat = (xv.at(i, j) - mean) * inv_std;
                    let dxhat = d.at(i, j) * gv.data()[j];
                    let g = inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    dx.set(i, j, g);
                }
            }
            vec![dx, dgamma, dbeta]
        });
        self.push("layer_norm", value, vec![a.0, gamma.0, beta.0], Some(back))
    }

    /// Extension point: a unary op with caller-supplied forward and backward
    /// rules, recorded on the tape like any built-in.
    pub fn custom_unary(
        &self,
        name: &'static str,
        a: Var,
        fwd: impl Fn(&Tensor) -> Tensor,
        bwd: impl Fn(&Tensor, &Tensor) -> Tensor + 'static,
    ) -> Result<Var> {
        self.check_inputs(name, &[a])?;
        let (value, xv) = self.with_values(&[a], |vals| (fwd(vals[0]), vals[0].clone()));
        let back: BackwardFn = Box::new(move |d: &Tensor| vec![bwd(d, &xv)]);
        self.push(name, value, vec![a.0], Some(back))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar root. Visits each node exactly
    /// once, newest to oldest; nodes outside the root's ancestry are skipped.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad && grads[id].is_none() {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient at node '{}'",
                    node.op
                )));
            }
            if let Some(back) = &node.backward {
                let parent_grads = back(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    if !nodes[*pid].needs_grad {
                        continue;
                    }
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn softmax_tensor(x: &Tensor, axis: usize, mask: Option<&[bool]>) -> Result<Tensor> {
    let apply = |lane: &[f64], out: &mut [f64]| -> Result<()> {
        match mask {
            None => softmax_lane(lane, out),
            Some(m) => {
                if m.len() != lane.len() {
                    return Err(Error::Shape("softmax mask length mismatch".into()));
                }
                if !m.iter().any(|&b| b) {
                    return Err(Error::Input("softmax: all positions masked".into()));
                }
                let mx = lane
                    .iter()
                    .zip(m)
                    .filter(|(_, &b)| b)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for ((o, &v), &b) in out.iter_mut().zip(lane.iter()).zip(m.iter()) {
                    if b {
                        let e = (v - mx).exp();
                        *o = e;
                        sum += e;
                    } else {
                        *o = 0.0;
                    }
                }
                for o in out.iter_mut() {
                    *o /= sum;
                }
            }
        }
        Ok(())
    };

    if x.shape().len() == 1 {
        let mut out = vec![0.0; x.numel()];
        apply(x.data(), &mut out)?;
        return Ok(Tensor::vector(out));
    }
    if !x.is_matrix() || axis > 1 {
        return Err(Error::Shape("softmax: expects a vector or matrix, axis 0/1".into()));
    }
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    if axis == 1 {
        for i in 0..r {
            let mut lane = vec![0.0; c];
            apply(x.row(i), &mut lane)?;
            for j in 0..c {
                out.set(i, j, lane[j]);
            }
        }
    } else {
        for j in 0..c {
            let col: Vec<f64> = (0..r).map(|i| x.at(i, j)).collect();
            let mut lane = vec![0.0; r];
            apply(&col, &mut lane)?;
            for i in 0..r {
                out.set(i, j, lane[i]);
            }
        }
    }
    Ok(out)
}

fn softmax_backward(p: &Tensor, d: &Tensor, axis: usize) -> Tensor {
    // dz = p ⊙ (d − <d, p>) per lane; masked positions have p = 0 and thus
    // receive zero gradient automatically.
    let lane_back = |pl: &[f64], dl: &[f64], out: &mut [f64]| {
        let dot: f64 = pl.iter().zip(dl).map(|(&a, &b)| a * b).sum();
        for ((o, &pv), &dv) in out.iter_mut().zip(pl).zip(dl) {
            *o = pv * (dv - dot);
        }
    };
    if p.shape().len() == 1 {
        let mut out = vec![0.0; p.numel()];
        lane_back(p.data(), d.data(), &mut out);
        return Tensor::vector(out);
    }
    let (r, c) = (p.rows(), p.cols());
    let mut dx = Tensor::zeros(&[r, c]);
    if axis == 1 {
        for i in 0..r {
            let mut out = vec![0.0; c];
            lane_back(p.row(i), d.row(i), &mut out);
            for j in 0..c {
                dx.set(i, j, out[j]);
            }
        }
    } else {
        for j in 0..c {
            let pl: Vec<f64> = (0..r).map(|i| p.at(i, j)).collect();
            let dl: Vec<f64> = (0..r).map(|i| d.at(i, j)).collect();
            let mut out = vec![0.0; r];
            lane_back(&pl, &dl, &mut out);
            for i in 0..r {
                dx.set(i, j, out[i]);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(r: usize, c: usize, d: Vec<f64>) -> Tensor {
        Tensor::matrix(r, c, d).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let g = Graph::new();
        let eye = g.constant(t2(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap();
        let a = g.constant(t2(3, 2, vec![1., 2., 3., 4., 5., 6.])).unwrap();
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out), g.value(a));
    }

    #[test]
    fn matmul_zero_kills_gradient() {
        let g = Graph::new();
        let a = g.leaf(t2(2, 2, vec![1., 2., 3., 4.]), true).unwrap();
        let z = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let out = g.matmul(a, z).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        let loss = g.sum_all(out).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![2.5, 2.5, 2.5, 2.5])).unwrap();
        let p = g.softmax(x, 0).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // [0, log 3] -> [1/4, 3/4]
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 3.0f64.ln()])).unwrap();
        let p = g.softmax(x, 0).unwrap();
        let v = g.value(p);
        assert!((v.data()[0] - 0.25).abs() < 1e-12);
        assert!((v.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::new();
        let x = g
            .constant(t2(3, 4, (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect()))
            .unwrap();
        let p = g.softmax(x, 1).unwrap();
        let v = g.value(p);
        for i in 0..3 {
            let s: f64 = v.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_positions() {
        let g = Graph::new();
        let x = g.constant(t2(2, 3, vec![1., 2., 3., 4., 5., 6.])).unwrap();
        let p = g.softmax_masked(x, 1, Some(&[true, false, true])).unwrap();
        let v = g.value(p);
        for i in 0..2 {
            assert_eq!(v.at(i, 1), 0.0);
            assert!((v.at(i, 0) + v.at(i, 2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_linearity_of_sum() {
        // d/dx (f + g) == d/dx f + d/dx g computed separately
        let x0 = Tensor::vector(vec![0.3, -0.7, 1.2]);
        let grad_of = |combined: bool| -> Vec<f64> {
            let g = Graph::new();
            let x = g.leaf(x0.clone(), true).unwrap();
            let f = g.sum_all(g.mul(x, x).unwrap()).unwrap();
            let h = g.sum_all(g.sigmoid(x).unwrap()).unwrap();
            if combined {
                let total = g.add(f, h).unwrap();
                g.backward(total).unwrap().get(x).into_data()
            } else {
                let ga = g.backward(f).unwrap().get(x);
                let gb = g.backward(h).unwrap().get(x);
                ga.data().iter().zip(gb.data()).map(|(a, b)| a + b).collect()
            }
        };
        let lhs = grad_of(true);
        let rhs = grad_of(false);
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_participating_leaf_gets_zero_grad() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let y = g.leaf(Tensor::vector(vec![3.0, 4.0]), true).unwrap();
        let loss = g.sum_all(g.mul(x, x).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nan_rejected_at_boundary() {
        let g = Graph::new();
        assert!(g.leaf(Tensor::vector(vec![f64::NAN]), false).is_err());
        assert!(g.constant(Tensor::vector(vec![f64::INFINITY])).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = Graph::new();
        let a = g.constant(t2(2, 3, vec![0.0; 6])).unwrap();
        let b = g.constant(t2(2, 2, vec![0.0; 4])).unwrap();
        assert!(g.matmul(a, b).is_err());
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn gather_rows_scatter_adds_duplicates() {
        let g = Graph::new();
        let x = g.leaf(t2(3, 2, vec![1., 2., 3., 4., 5., 6.]), true).unwrap();
        let out = g.gather_rows(x, &[1, 1, 2]).unwrap();
        let loss = g.sum_all(out).unwrap();
        let grads = g.backward(loss).unwrap();
        let dx = grads.get(x);
        assert_eq!(dx.row(0), &[0.0, 0.0]);
        assert_eq!(dx.row(1), &[2.0, 2.0]);
        assert_eq!(dx.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn unfold_shapes_and_replicate_padding() {
        let g = Graph::new();
        let x = g.constant(t2(5, 2, (0..10).map(|i| i as f64).collect())).unwrap();
        let u = g.unfold_k3s2(x).unwrap();
        assert_eq!(g.shape_of(u), vec![3, 6]);
        // first window replicates the boundary frame on the left
        let v = g.value(u);
        assert_eq!(v.row(0)[0..2], [0.0, 1.0]);
        assert_eq!(v.row(0)[2..4], [0.0, 1.0]);
        assert_eq!(v.row(0)[4..6], [2.0, 3.0]);
        // last window (center 4) replicates the right boundary
        assert_eq!(v.row(2)[4..6], [8.0, 9.0]);
    }
}
