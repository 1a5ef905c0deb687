//! Dense f32 tensors with tape-based reverse-mode differentiation.
//!
//! A [`GradTape`] records every differentiable operation whose inputs include
//! a tracked tensor. [`Tensor::backward`] replays the tape once in reverse and
//! fills the gradient buffer of every tracked leaf; the tape is consumed in
//! the process and a second backward call is rejected.
//!
//! Tensors are immutable value handles: `Clone` is cheap (the payload is
//! reference-counted) and forward evaluation never mutates an existing buffer.

mod fdcheck;
mod kernels;

pub use fdcheck::{finite_diff_check, FiniteDiffReport};

use crate::error::{Error, Result};
use crate::special;
use std::cell::RefCell;
use std::rc::Rc;

/// Reverse-mode gradient tape shared by the tensors of one forward pass.
#[derive(Clone)]
pub struct GradTape {
    inner: Rc<RefCell<TapeInner>>,
}

struct TapeInner {
    nodes: Vec<NodeMeta>,
    entries: Vec<Entry>,
    consumed: bool,
}

struct NodeMeta {
    numel: usize,
    grad: Option<Vec<f32>>,
}

/// One recorded operation: identifier, tracked input ids, output id, and the
/// cached forward values its backward rule needs.
struct Entry {
    op: &'static str,
    output: usize,
    step: Step,
}

type TrackedIn = Option<usize>;

enum Step {
    /// y = f(x); `dydx` precomputed during forward.
    Unary { input: usize, dydx: Vec<f32> },
    /// y = a*x + b
    Affine { input: usize, a: f32 },
    AddSub {
        a: TrackedIn,
        b: TrackedIn,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
        sub: bool,
    },
    MulDiv {
        a: TrackedIn,
        b: TrackedIn,
        a_data: Rc<Vec<f32>>,
        b_data: Rc<Vec<f32>>,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
        out_shape: Vec<usize>,
        div: bool,
    },
    Matmul {
        a: TrackedIn,
        b: TrackedIn,
        a_data: Rc<Vec<f32>>,
        b_data: Rc<Vec<f32>>,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: TrackedIn,
        kernel: TrackedIn,
        in_data: Rc<Vec<f32>>,
        k_data: Rc<Vec<f32>>,
        dims: kernels::ConvDims,
    },
    Gap { input: usize, h: usize, w: usize },
    InstanceNorm {
        input: usize,
        normalized: Rc<Vec<f32>>,
        inv_std: Vec<f32>,
        features: usize,
    },
    Upsample {
        input: usize,
        factor: usize,
        in_shape: [usize; 4],
    },
    SumAxis {
        input: usize,
        in_shape: Vec<usize>,
        axis: usize,
    },
    Reduce { input: usize, scale: f32 },
    Reshape { input: usize },
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                entries: Vec::new(),
                consumed: false,
            })),
        }
    }

    /// Register a tracked leaf tensor whose gradient will be available after
    /// the backward pass.
    pub fn leaf(&self, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        let id = self.push_node(t.numel())?;
        Ok(Tensor {
            node: Some((self.clone(), id)),
            ..t
        })
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    pub fn num_entries(&self) -> usize {
        self.inner.borrow().entries.len()
    }

    fn same_tape(&self, other: &GradTape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push_node(&self, numel: usize) -> Result<usize> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Contract(
                "cannot record on a consumed tape".into(),
            ));
        }
        inner.nodes.push(NodeMeta { numel, grad: None });
        Ok(inner.nodes.len() - 1)
    }

    fn record(&self, op: &'static str, output_numel: usize, step: Step) -> Result<usize> {
        let id = self.push_node(output_numel)?;
        self.inner.borrow_mut().entries.push(Entry {
            op,
            output: id,
            step,
        });
        Ok(id)
    }

    fn grad_of(&self, id: usize) -> Option<Vec<f32>> {
        self.inner.borrow().nodes[id].grad.clone()
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Contract(
                "backward called on a consumed tape".into(),
            ));
        }
        inner.consumed = true;
        debug_assert_eq!(inner.nodes[root].numel, 1);
        inner.nodes[root].grad = Some(vec![1.0]);

        // Entries are topologically ordered by construction; one reverse
        // sweep visits each exactly once and drains the cached values.
        let entries = std::mem::take(&mut inner.entries);
        let nodes = &mut inner.nodes;
        for entry in entries.into_iter().rev() {
            let Some(g) = nodes[entry.output].grad.take() else {
                continue;
            };
            apply_backward(entry, &g, nodes);
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [NodeMeta], id: usize, contribution: Vec<f32>) {
    debug_assert_eq!(nodes[id].numel, contribution.len());
    match &mut nodes[id].grad {
        Some(buf) => {
            for (b, c) in buf.iter_mut().zip(contribution) {
                *b += c;
            }
        }
        None => nodes[id].grad = Some(contribution),
    }
}

fn apply_backward(entry: Entry, g: &[f32], nodes: &mut [NodeMeta]) {
    match entry.step {
        Step::Unary { input, dydx } => {
            let contrib: Vec<f32> = g.iter().zip(&dydx).map(|(&gv, &d)| gv * d).collect();
            accumulate(nodes, input, contrib);
        }
        Step::Affine { input, a } => {
            accumulate(nodes, input, g.iter().map(|&gv| gv * a).collect());
        }
        Step::AddSub {
            a,
            b,
            a_shape,
            b_shape,
            sub,
        } => {
            let out_shape = broadcast_shape(&a_shape, &b_shape).expect("validated");
            if let Some(ai) = a {
                accumulate(nodes, ai, reduce_to_shape(g, &out_shape, &a_shape));
            }
            if let Some(bi) = b {
                let mut r = reduce_to_shape(g, &out_shape, &b_shape);
                if sub {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(nodes, bi, r);
            }
        }
        Step::MulDiv {
            a,
            b,
            a_data,
            b_data,
            a_shape,
            b_shape,
            out_shape,
            div,
        } => {
            if let Some(ai) = a {
                // d/da (a*b) = b ; d/da (a/b) = 1/b
                let full = broadcast_apply(g, &out_shape, &b_data, &b_shape, |gv, bv| {
                    if div {
                        gv / bv
                    } else {
                        gv * bv
                    }
                });
                accumulate(nodes, ai, reduce_to_shape(&full, &out_shape, &a_shape));
            }
            if let Some(bi) = b {
                // d/db (a*b) = a ; d/db (a/b) = -a/b^2
                let ga = broadcast_apply(g, &out_shape, &a_data, &a_shape, |gv, av| gv * av);
                let full = if div {
                    broadcast_apply(&ga, &out_shape, &b_data, &b_shape, |gv, bv| {
                        -gv / (bv * bv)
                    })
                } else {
                    ga
                };
                accumulate(nodes, bi, reduce_to_shape(&full, &out_shape, &b_shape));
            }
        }
        Step::Matmul {
            a,
            b,
            a_data,
            b_data,
            m,
            k,
            n,
        } => {
            if let Some(ai) = a {
                accumulate(nodes, ai, kernels::matmul_bt(g, &b_data, m, n, k));
            }
            if let Some(bi) = b {
                accumulate(nodes, bi, kernels::matmul_at(&a_data, g, m, k, n));
            }
        }
        Step::Conv2d {
            input,
            kernel,
            in_data,
            k_data,
            dims,
        } => {
            if let Some(ii) = input {
                accumulate(nodes, ii, kernels::conv2d_backward_input(g, &k_data, &dims));
            }
            if let Some(ki) = kernel {
                accumulate(nodes, ki, kernels::conv2d_backward_kernel(g, &in_data, &dims));
            }
        }
        Step::Gap { input, h, w } => {
            let scale = 1.0 / (h * w) as f32;
            let mut contrib = vec![0.0f32; g.len() * h * w];
            for (i, &gv) in g.iter().enumerate() {
                let v = gv * scale;
                contrib[i * h * w..(i + 1) * h * w]
                    .iter_mut()
                    .for_each(|x| *x = v);
            }
            accumulate(nodes, input, contrib);
        }
        Step::InstanceNorm {
            input,
            normalized,
            inv_std,
            features,
        } => {
            let rows = inv_std.len();
            let mut contrib = vec![0.0f32; rows * features];
            for r in 0..rows {
                let gr = &g[r * features..(r + 1) * features];
                let xh = &normalized[r * features..(r + 1) * features];
                let mut g_mean = 0.0f64;
                let mut gx_mean = 0.0f64;
                for (&gv, &xv) in gr.iter().zip(xh) {
                    g_mean += gv as f64;
                    gx_mean += gv as f64 * xv as f64;
                }
                g_mean /= features as f64;
                gx_mean /= features as f64;
                let is = inv_std[r] as f64;
                for (o, (&gv, &xv)) in contrib[r * features..(r + 1) * features]
                    .iter_mut()
                    .zip(gr.iter().zip(xh))
                {
                    *o = (is * (gv as f64 - g_mean - xv as f64 * gx_mean)) as f32;
                }
            }
            accumulate(nodes, input, contrib);
        }
        Step::Upsample {
            input,
            factor,
            in_shape,
        } => {
            let [b, c, h, w] = in_shape;
            let fw = w * factor;
            let mut contrib = vec![0.0f32; b * c * h * w];
            for plane in 0..b * c {
                let in_base = plane * h * w;
                let out_base = plane * h * w * factor * factor;
                for ih in 0..h {
                    for iw in 0..w {
                        let mut acc = 0.0f32;
                        for dy in 0..factor {
                            let row = out_base + (ih * factor + dy) * fw + iw * factor;
                            for dx in 0..factor {
                                acc += g[row + dx];
                            }
                        }
                        contrib[in_base + ih * w + iw] = acc;
                    }
                }
            }
            accumulate(nodes, input, contrib);
        }
        Step::SumAxis {
            input,
            in_shape,
            axis,
        } => {
            let outer: usize = in_shape[..axis].iter().product();
            let len = in_shape[axis];
            let inner_n: usize = in_shape[axis + 1..].iter().product();
            let mut contrib = vec![0.0f32; outer * len * inner_n];
            for o in 0..outer {
                let gslice = &g[o * inner_n..(o + 1) * inner_n];
                for a in 0..len {
                    let base = (o * len + a) * inner_n;
                    contrib[base..base + inner_n].copy_from_slice(gslice);
                }
            }
            accumulate(nodes, input, contrib);
        }
        Step::Reduce { input, scale } => {
            let gv = g[0] * scale;
            accumulate(nodes, input, vec![gv; nodes[input].numel]);
        }
        Step::Reshape { input } => {
            accumulate(nodes, input, g.to_vec());
        }
    }
    let _ = entry.op;
}

// ── broadcasting ─────────────────────────────────────────────────────

/// Equal-rank broadcast: each axis must agree or be 1 on one side.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "rank mismatch: {a:?} vs {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || y == 1 {
                Ok(x.max(y))
            } else if x == 1 {
                Ok(y)
            } else {
                Err(Error::shape(format!("incompatible shapes {a:?} vs {b:?}")))
            }
        })
        .collect()
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    s
}

/// Apply `f` elementwise over the broadcast of `(a, b)`; `a` must already
/// have the output shape.
fn broadcast_apply(
    a: &[f32],
    out_shape: &[usize],
    b: &[f32],
    b_shape: &[usize],
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    if out_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let bs = strides_for(b_shape);
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(n);
    let mut b_off = 0usize;
    for i in 0..n {
        out.push(f(a[i], b[b_off]));
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            b_off += bs[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            b_off -= bs[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn binary_forward(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<(Vec<f32>, Vec<usize>)> {
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    if out_shape == a.shape {
        Ok((
            broadcast_apply(&a.data, &out_shape, &b.data, &b.shape, f),
            out_shape,
        ))
    } else if out_shape == b.shape {
        Ok((
            broadcast_apply(&b.data, &out_shape, &a.data, &a.shape, |y, x| f(x, y)),
            out_shape,
        ))
    } else {
        // Both sides broadcast; materialize `a` first.
        let ones = vec![0.0f32; out_shape.iter().product()];
        let a_full = broadcast_apply(&ones, &out_shape, &a.data, &a.shape, |_, x| x);
        Ok((
            broadcast_apply(&a_full, &out_shape, &b.data, &b.shape, f),
            out_shape,
        ))
    }
}

/// Sum `g` (shaped `from`) down to `to` over the axes where `to` is 1.
fn reduce_to_shape(g: &[f32], from: &[usize], to: &[usize]) -> Vec<f32> {
    if from == to {
        return g.to_vec();
    }
    let ts = strides_for(to);
    let n: usize = from.iter().product();
    let mut out = vec![0.0f32; to.iter().product()];
    let mut idx = vec![0usize; from.len()];
    let mut t_off = 0usize;
    for i in 0..n {
        out[t_off] += g[i];
        for ax in (0..from.len()).rev() {
            idx[ax] += 1;
            t_off += ts[ax];
            if idx[ax] < from[ax] {
                break;
            }
            t_off -= ts[ax] * from[ax];
            idx[ax] = 0;
        }
    }
    out
}

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense n-dimensional f32 array in row-major order, optionally attached to a
/// [`GradTape`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f32>>,
    node: Option<(GradTape, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

/// Op kinds accepted by the generic [`elementwise`] entry point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Softplus,
    Log,
}

/// Generic elementwise dispatch; binary kinds require `b`.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    use ElementwiseOp::*;
    match (op, b) {
        (Add, Some(b)) => a.add(b),
        (Sub, Some(b)) => a.sub(b),
        (Mul, Some(b)) => a.mul(b),
        (Add | Sub | Mul, None) => Err(Error::Contract(format!(
            "elementwise {op:?} needs a second operand"
        ))),
        (Relu, None) => a.relu(),
        (Sigmoid, None) => a.sigmoid(),
        (Tanh, None) => a.tanh(),
        (Exp, None) => a.exp(),
        (Softplus, None) => a.softplus(),
        (Log, None) => a.log(),
        (_, Some(_)) => Err(Error::Contract(format!(
            "elementwise {op:?} is unary"
        ))),
    }
}

fn ensure_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(op, "non-finite value in output"))
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized axis in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        ensure_finite("from_vec", &data)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()]).expect("zeros")
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Tensor> {
        Tensor::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value; contract error when the tensor is not scalar.
    pub fn item(&self) -> Result<f32> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// Untracked copy sharing the same buffer.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// Gradient buffer filled by the backward pass, if this tensor is tracked.
    pub fn grad(&self) -> Option<Vec<f32>> {
        let (tape, id) = self.node.as_ref()?;
        tape.grad_of(*id)
    }

    /// Reverse pass from a scalar root; fills every tracked leaf's gradient
    /// and consumes the tape.
    pub fn backward(&self) -> Result<()> {
        let Some((tape, id)) = &self.node else {
            return Err(Error::Contract(
                "backward on an untracked tensor".into(),
            ));
        };
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape
            )));
        }
        tape.backward_from(*id)
    }

    fn tape_of(a: &Tensor, b: Option<&Tensor>) -> Result<Option<GradTape>> {
        match (&a.node, b.and_then(|t| t.node.as_ref())) {
            (Some((ta, _)), Some((tb, _))) => {
                if ta.same_tape(tb) {
                    Ok(Some(ta.clone()))
                } else {
                    Err(Error::Contract(
                        "operands belong to different tapes".into(),
                    ))
                }
            }
            (Some((ta, _)), None) => Ok(Some(ta.clone())),
            (None, Some((tb, _))) => Ok(Some(tb.clone())),
            (None, None) => Ok(None),
        }
    }

    fn id(&self) -> TrackedIn {
        self.node.as_ref().map(|(_, id)| *id)
    }

    fn wrap(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        tape: Option<GradTape>,
        step: impl FnOnce() -> Step,
    ) -> Result<Tensor> {
        ensure_finite(op, &data)?;
        let node = match tape {
            Some(t) => {
                let id = t.record(op, data.len(), step())?;
                Some((t, id))
            }
            None => None,
        };
        Ok(Tensor {
            shape,
            data: Rc::new(data),
            node,
        })
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32, // (x, y) -> dy/dx
    ) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&x| f(x)).collect();
        let tape = Tensor::tape_of(self, None)?;
        let input = self.id();
        Tensor::wrap(op, self.shape.clone(), data.clone(), tape, || {
            let dydx = self
                .data
                .iter()
                .zip(&data)
                .map(|(&x, &y)| df(x, y))
                .collect();
            Step::Unary {
                input: input.expect("tracked"),
                dydx,
            }
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary("tanh", f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f32::exp, |_, y| y)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.unary("softplus", stable_softplus, |x, _| stable_sigmoid(x))
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary("log", f32::ln, |x, _| 1.0 / x)
    }

    pub fn recip(&self) -> Result<Tensor> {
        self.unary("recip", |x| 1.0 / x, |_, y| -y * y)
    }

    /// log-Gamma, defined here for strictly positive inputs.
    pub fn lgamma(&self) -> Result<Tensor> {
        if self.data.iter().any(|&x| x <= 0.0) {
            return Err(Error::numeric("lgamma", "argument must be positive"));
        }
        self.unary(
            "lgamma",
            |x| special::ln_gamma(x as f64) as f32,
            |x, _| special::digamma(x as f64) as f32,
        )
    }

    /// Digamma for strictly positive inputs.
    pub fn digamma(&self) -> Result<Tensor> {
        if self.data.iter().any(|&x| x <= 0.0) {
            return Err(Error::numeric("digamma", "argument must be positive"));
        }
        self.unary(
            "digamma",
            |x| special::digamma(x as f64) as f32,
            |x, _| special::trigamma(x as f64) as f32,
        )
    }

    /// y = a*x + b
    pub fn affine(&self, a: f32, b: f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&x| a * x + b).collect();
        let tape = Tensor::tape_of(self, None)?;
        let input = self.id();
        Tensor::wrap("affine", self.shape.clone(), data, tape, || Step::Affine {
            input: input.expect("tracked"),
            a,
        })
    }

    fn addsub(&self, other: &Tensor, sub: bool) -> Result<Tensor> {
        let op = if sub { "sub" } else { "add" };
        let (data, out_shape) = binary_forward(self, other, if sub {
            |x: f32, y: f32| x - y
        } else {
            |x: f32, y: f32| x + y
        })?;
        let tape = Tensor::tape_of(self, Some(other))?;
        let (a, b) = (self.id(), other.id());
        let (a_shape, b_shape) = (self.shape.clone(), other.shape.clone());
        Tensor::wrap(op, out_shape, data, tape, || Step::AddSub {
            a,
            b,
            a_shape,
            b_shape,
            sub,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.addsub(other, false)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.addsub(other, true)
    }

    fn muldiv(&self, other: &Tensor, div: bool) -> Result<Tensor> {
        let op = if div { "div" } else { "mul" };
        let (data, out_shape) = binary_forward(self, other, if div {
            |x: f32, y: f32| x / y
        } else {
            |x: f32, y: f32| x * y
        })?;
        let tape = Tensor::tape_of(self, Some(other))?;
        let (a, b) = (self.id(), other.id());
        let step_parts = (
            Rc::clone(&self.data),
            Rc::clone(&other.data),
            self.shape.clone(),
            other.shape.clone(),
            out_shape.clone(),
        );
        Tensor::wrap(op, out_shape, data, tape, move || Step::MulDiv {
            a,
            b,
            a_data: step_parts.0,
            b_data: step_parts.1,
            a_shape: step_parts.2,
            b_shape: step_parts.3,
            out_shape: step_parts.4,
            div,
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.muldiv(other, false)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.muldiv(other, true)
    }

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::shape(format!(
                "matmul wants rank-2 operands, got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let data = kernels::matmul(&self.data, &other.data, m, k, n);
        let tape = Tensor::tape_of(self, Some(other))?;
        let (a, b) = (self.id(), other.id());
        let (a_data, b_data) = (Rc::clone(&self.data), Rc::clone(&other.data));
        Tensor::wrap("matmul", vec![m, n], data, tape, move || Step::Matmul {
            a,
            b,
            a_data,
            b_data,
            m,
            k,
            n,
        })
    }

    /// input [B,Cin,H,W], kernel [Cout,Cin,kh,kw]; odd kernels, stride 1 or 2.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let [b, c_in, h, w]: [usize; 4] = self
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::shape(format!("conv2d input must be 4-d, got {:?}", self.shape)))?;
        let [c_out, kc_in, kh, kw]: [usize; 4] = kernel
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::shape(format!("conv2d kernel must be 4-d, got {:?}", kernel.shape)))?;
        if kc_in != c_in {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {c_in}, kernel {kc_in}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel dims must be odd, got {kh}x{kw}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d kernel larger than padded input"));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let dims = kernels::ConvDims {
            batch: b,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let data = kernels::conv2d_forward(&self.data, &kernel.data, &dims);
        let tape = Tensor::tape_of(self, Some(kernel))?;
        let (input, kid) = (self.id(), kernel.id());
        let (in_data, k_data) = (Rc::clone(&self.data), Rc::clone(&kernel.data));
        Tensor::wrap(
            "conv2d",
            vec![b, c_out, oh, ow],
            data,
            tape,
            move || Step::Conv2d {
                input,
                kernel: kid,
                in_data,
                k_data,
                dims,
            },
        )
    }

    /// [B,C,H,W] -> [B,C]: mean over each spatial plane.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let [b, c, h, w]: [usize; 4] = self
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::shape(format!("global_avg_pool wants 4-d input, got {:?}", self.shape)))?;
        let plane = h * w;
        let mut data = Vec::with_capacity(b * c);
        for p in 0..b * c {
            let sum: f64 = self.data[p * plane..(p + 1) * plane]
                .iter()
                .map(|&x| x as f64)
                .sum();
            data.push((sum / plane as f64) as f32);
        }
        let tape = Tensor::tape_of(self, None)?;
        let input = self.id();
        Tensor::wrap("global_avg_pool", vec![b, c], data, tape, || Step::Gap {
            input: input.expect("tracked"),
            h,
            w,
        })
    }

    /// [B,F] -> [B,F]: per-row zero mean / unit variance, eps 1e-5, no affine.
    pub fn instance_norm(&self) -> Result<Tensor> {
        let [rows, features]: [usize; 2] = self
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::shape(format!("instance_norm wants 2-d input, got {:?}", self.shape)))?;
        if features < 2 {
            return Err(Error::shape("instance_norm needs at least 2 features"));
        }
        const EPS: f64 = 1e-5;
        let mut data = vec![0.0f32; rows * features];
        let mut inv_std = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &self.data[r * features..(r + 1) * features];
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / features as f64;
            let var = row
                .iter()
                .map(|&x| {
                    let d = x as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / features as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is as f32;
            for (o, &x) in data[r * features..(r + 1) * features].iter_mut().zip(row) {
                *o = ((x as f64 - mean) * is) as f32;
            }
        }
        let tape = Tensor::tape_of(self, None)?;
        let input = self.id();
        let normalized = Rc::new(data.clone());
        Tensor::wrap("instance_norm", self.shape.clone(), data, tape, move || {
            Step::InstanceNorm {
                input: input.expect("tracked"),
                normalized,
                inv_std,
                features,
            }
        })
    }

    /// Nearest-neighbor upsampling by an integer factor (1, 2 or 4).
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        if !(factor == 1 || factor == 2 || factor == 4) {
            return Err(Error::shape(format!("upsample factor must be 1, 2 or 4, got {factor}")));
        }
        let [b, c, h, w]: [usize; 4] = self
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::shape(format!("upsample wants 4-d input, got {:?}", self.shape)))?;
        let (fh, fw) = (h * factor, w * factor);
        let mut data = vec![0.0f32; b * c * fh * fw];
        for plane in 0..b * c {
            let in_base = plane * h * w;
            let out_base = plane * fh * fw;
            for ih in 0..h {
                for iw in 0..w {
                    let v = self.data[in_base + ih * w + iw];
                    for dy in 0..factor {
                        let row = out_base + (ih * factor + dy) * fw + iw * factor;
                        data[row..row + factor].iter_mut().for_each(|x| *x = v);
                    }
                }
            }
        }
        let tape = Tensor::tape_of(self, None)?;
        let input = self.id();
        Tensor::wrap(
            "upsample_nearest",
            vec![b, c, fh, fw],
            data,
            tape,
            || Step::Upsample {
                input: input.expect("tracked"),
                factor,
                in_shape: [b, c, h, w],
            },
        )
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::shape(format!(
                "sum_axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner_n: usize = self.shape[axis + 1..].iter().product();
        let mut data = vec![0.0f32; outer * inner_n];
        for o in 0..outer {
            for i in 0..inner_n {
                let mut acc = 0.0f64;
                for a in 0..len {
                    acc += self.data[(o * len + a) * inner_n + i] as f64;
                }
                data[o * inner_n + i] = acc as f32;
            }
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = 1;
        let tape = Tensor::tape_of(self, None)?;
        let input = self.id();
        let in_shape = self.shape.clone();
        Tensor::wrap("sum_axis", out_shape, data, tape, || Step::SumAxis {
            input: input.expect("tracked"),
            in_shape,
            axis,
        })
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let sum: f64 = self.data.iter().map(|&x| x as f64).sum();
        let tape = Tensor::tape_of(self, None)?;
        let input = self.id();
        Tensor::wrap("sum_all", vec![1], vec![sum as f32], tape, || Step::Reduce {
            input: input.expect("tracked"),
            scale: 1.0,
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        let sum: f64 = self.data.iter().map(|&x| x as f64).sum();
        let tape = Tensor::tape_of(self, None)?;
        let input = self.id();
        Tensor::wrap(
            "mean_all",
            vec![1],
            vec![(sum / n as f64) as f32],
            tape,
            || Step::Reduce {
                input: input.expect("tracked"),
                scale: 1.0 / n as f32,
            },
        )
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() || new_shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {new_shape:?}",
                self.shape
            )));
        }
        let tape = Tensor::tape_of(self, None)?;
        let input = self.id();
        Tensor::wrap(
            "reshape",
            new_shape.to_vec(),
            self.data.as_ref().clone(),
            tape,
            || Step::Reshape {
                input: input.expect("tracked"),
            },
        )
    }
}
