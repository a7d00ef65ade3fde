//! A small tape-based reverse-mode autodiff engine over dense row-major tensors.
//!
//! Nodes are appended to a [`Graph`] in evaluation order, so the tape itself is a
//! topological order and [`Graph::backward`] walks it once from the end. Shapes are
//! always explicit; the only broadcast is the trailing-axis bias add.

mod adam;
mod checkpoint;
mod conv;
mod params;

pub use adam::{adam_step, lr_schedule, AdamConfig, AdamState, LrSchedule};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::ConvGeometry;
pub use params::{NamedTensor, ParamSet};

use thiserror::Error;

use crate::scalar::{gemm, MatRef, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>>>;

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Pow(Var, T),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MaxAxis { input: Var, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, outer: usize, inner: usize, lens: Vec<usize> },
    Reshape(Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry, cols: Vec<T> },
    ScatterToGrid { input: Var, cells: Vec<usize>, channels: usize, plane: usize },
    Upsample2x { input: Var, n: usize, c: usize, h: usize, w: usize },
    Custom { name: &'static str, inputs: Vec<Var>, backward: BackwardFn<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Pow(..) => "pow",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaxAxis { .. } => "max_over_axis",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ScatterToGrid { .. } => "scatter_to_grid",
            Op::Upsample2x { .. } => "upsample2x",
            Op::Custom { name, .. } => name,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Pow(a, _)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::MaxAxis { input, .. } | Op::ScatterToGrid { input, .. } | Op::Upsample2x { input, .. } => vec![*input],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
        }
    }
}

struct Node<T: Scalar> {
    value: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
}

/// Reverse-mode tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Gradients of one scalar with respect to every node that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], |g| g.to_vec())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += *b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in tape order, leaves excluded.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, shape, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<Var, TensorError> {
        if value.len() != numel(&shape) {
            return Err(TensorError::Invalid {
                op: "leaf",
                msg: format!("{} values for shape {:?}", value.len(), shape),
            });
        }
        self.nodes.push(Node { value, shape, requires_grad, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Vec<T>, shape: Vec<usize>) -> Result<Var, TensorError> {
        self.leaf(value, shape, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Vec<T>, shape: Vec<usize>) -> Result<Var, TensorError> {
        self.leaf(value, shape, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect()
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let s = self.shape(a).to_vec();
        Ok(self.push(v, s, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let s = self.shape(a).to_vec();
        Ok(self.push(v, s, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let s = self.shape(a).to_vec();
        Ok(self.push(v, s, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    /// `x + bias` where `bias` has the length of `x`'s last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        let c = *xs.last().unwrap_or(&0);
        if bs.len() != 1 || bs[0] != c || c == 0 {
            return Err(shape_err("add_bias", &[xs, bs]));
        }
        let b = self.value(bias);
        let v = self.value(x).iter().enumerate().map(|(i, x)| *x + b[i % c]).collect();
        let s = xs.to_vec();
        Ok(self.push(v, s, Op::AddBias(x, bias)))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(self.value(a), m, k), MatRef::new(self.value(b), k, n), T::zero(), &mut out);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn pow(&mut self, a: Var, p: T) -> Var {
        self.unary(a, |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], vec![], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Invalid { op: "mean", msg: "empty tensor".into() });
        }
        let s: T = self.value(a).iter().copied().sum();
        Ok(self.push(vec![s / T::from_usize(n).unwrap()], vec![], Op::Mean(a)))
    }

    /// Maximum along `axis`, which is removed from the shape. Ties go to the first index.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::Invalid { op: "max_over_axis", msg: format!("axis {axis} of shape {shape:?}") });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for l in 1..len {
                    let idx = base + l * inner;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(out, out_shape, Op::MaxAxis { input: a, argmax }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs.first().ok_or(TensorError::Invalid { op: "concat", msg: "no inputs".into() })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &[&base]));
        }
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != base[d]) {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
                return Err(shape_err("concat", &shapes));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let lens: Vec<usize> = inputs.iter().map(|v| self.shape(*v)[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in inputs.iter().zip(&lens) {
                let x = self.value(*v);
                out.extend_from_slice(&x[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(out, shape, Op::Concat { inputs: inputs.to_vec(), outer, inner, lens }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if numel(shape) != self.value(a).len() {
            return Err(shape_err("reshape", &[self.shape(a), shape]));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(v, shape.to_vec(), Op::Reshape(a)))
    }

    /// 2D convolution over `[n, c_in, h, w]` with weight `[c_out, c_in, k, k]`.
    ///
    /// Padding is `k / 2` on every side ("same" for stride 1, halving for stride 2).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let geom = ConvGeometry::infer(&xs, &ws, stride).ok_or_else(|| shape_err("conv2d", &[&xs, &ws]))?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(shape_err("conv2d", &[&xs, &ws, self.shape(b)]));
            }
        }
        let (out, cols) = conv::forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        let shape = vec![geom.n, geom.c_out, geom.h_out, geom.w_out];
        Ok(self.push(out, shape, Op::Conv2d { input, weight, bias, geom, cols }))
    }

    /// Places row `k` of a `[K, c]` tensor at `(sample, y, x) = cells[k]` of a zero
    /// `[n, c, h, w]` grid. Cells must be distinct.
    pub fn scatter_to_grid(
        &mut self,
        input: Var,
        cells: &[(usize, usize, usize)],
        grid: [usize; 3],
    ) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        let [n, h, w] = grid;
        if s.len() != 2 || s[0] != cells.len() {
            return Err(shape_err("scatter_to_grid", &[&s, &[cells.len()]]));
        }
        let c = s[1];
        let plane = h * w;
        let mut seen = vec![false; n * plane];
        let mut flat = Vec::with_capacity(cells.len());
        for &(b, y, x) in cells {
            if b >= n || y >= h || x >= w {
                return Err(TensorError::Invalid {
                    op: "scatter_to_grid",
                    msg: format!("cell {:?} outside grid {:?}", (b, y, x), grid),
                });
            }
            let cell = b * plane + y * w + x;
            if std::mem::replace(&mut seen[cell], true) {
                return Err(TensorError::Invalid { op: "scatter_to_grid", msg: format!("duplicate cell {:?}", (b, y, x)) });
            }
            flat.push(cell);
        }
        let mut out = vec![T::zero(); n * c * plane];
        let x = self.value(input);
        for (k, &cell) in flat.iter().enumerate() {
            let (b, pix) = (cell / plane, cell % plane);
            for ch in 0..c {
                out[(b * c + ch) * plane + pix] = x[k * c + ch];
            }
        }
        Ok(self.push(out, vec![n, c, h, w], Op::ScatterToGrid { input, cells: flat, channels: c, plane }))
    }

    /// Nearest-neighbour 2× upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample2x", &[&s]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let x = self.value(input);
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for nc in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[nc * 4 * h * w + y * 2 * w + xx] = x[nc * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(out, vec![n, c, 2 * h, 2 * w], Op::Upsample2x { input, n, c, h, w }))
    }

    /// Records a node computed outside the engine. `backward` receives the output
    /// gradient and returns one gradient buffer per input, in order.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Vec<T>,
        shape: Vec<usize>,
        backward: impl Fn(&[T]) -> Vec<Vec<T>> + 'static,
    ) -> Result<Var, TensorError> {
        if value.len() != numel(&shape) {
            return Err(TensorError::Invalid { op: name, msg: format!("{} values for shape {:?}", value.len(), shape) });
        }
        Ok(self.push(value, shape, Op::Custom { name, inputs: inputs.to_vec(), backward: Box::new(backward) }))
    }

    /// Fails if any value of `v` is NaN or infinite.
    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<(), TensorError> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what.to_string()))
        }
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Invalid { op: "backward", msg: format!("root has shape {:?}", self.shape(root)) });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    accumulate_owned(&mut grads[b.0], g.iter().map(|x| -*x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let gb: Vec<T> = g.iter().zip(self.value(*b)).map(|(g, y)| *g * *y).collect();
                    accumulate_owned(&mut grads[a.0], gb);
                }
                if self.wants(*b) {
                    let ga: Vec<T> = g.iter().zip(self.value(*a)).map(|(g, x)| *g * *x).collect();
                    accumulate_owned(&mut grads[b.0], ga);
                }
            }
            Op::Scale(a, k) => {
                if self.wants(*a) {
                    accumulate_owned(&mut grads[a.0], g.iter().map(|x| *x * *k).collect());
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if self.wants(*b) {
                    let c = self.value(*b).len();
                    let mut gb = vec![T::zero(); c];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += *v;
                    }
                    accumulate_owned(&mut grads[b.0], gb);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(MatRef::new(g, m, n), MatRef::new(self.value(*b), k, n).t(), T::zero(), &mut ga);
                    accumulate_owned(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(MatRef::new(self.value(*a), m, k).t(), MatRef::new(g, m, n), T::zero(), &mut gb);
                    accumulate_owned(&mut grads[b.0], gb);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let ga = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                        .collect();
                    accumulate_owned(&mut grads[a.0], ga);
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let ga = g.iter().zip(&node.value).map(|(g, s)| *g * *s * (T::one() - *s)).collect();
                    accumulate_owned(&mut grads[a.0], ga);
                }
            }
            Op::Log(a) => {
                if self.wants(*a) {
                    let ga = g.iter().zip(self.value(*a)).map(|(g, x)| *g / *x).collect();
                    accumulate_owned(&mut grads[a.0], ga);
                }
            }
            Op::Pow(a, p) => {
                if self.wants(*a) {
                    let p = *p;
                    let ga = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, x)| *g * p * x.powf(p - T::one()))
                        .collect();
                    accumulate_owned(&mut grads[a.0], ga);
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    let two = T::from_f64_lossy(2.0);
                    let ga = g.iter().zip(self.value(*a)).map(|(g, x)| *g * two * *x).collect();
                    accumulate_owned(&mut grads[a.0], ga);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    accumulate_owned(&mut grads[a.0], vec![g[0]; self.value(*a).len()]);
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    accumulate_owned(&mut grads[a.0], vec![g[0] / T::from_usize(n).unwrap(); n]);
                }
            }
            Op::MaxAxis { input, argmax } => {
                if self.wants(*input) {
                    let mut ga = vec![T::zero(); self.value(*input).len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        ga[src] += g[o];
                    }
                    accumulate_owned(&mut grads[input.0], ga);
                }
            }
            Op::Concat { inputs, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (v, &l) in inputs.iter().zip(lens) {
                    if self.wants(*v) {
                        let mut gv = Vec::with_capacity(outer * l * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[start..start + l * inner]);
                        }
                        accumulate_owned(&mut grads[v.0], gv);
                    }
                    offset += l;
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Conv2d { input, weight, bias, geom, cols } => {
                let (gx, gw, gb) = conv::backward(
                    geom,
                    g,
                    self.value(*input),
                    self.value(*weight),
                    cols,
                    self.wants(*input),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                );
                if let Some(gx) = gx {
                    accumulate_owned(&mut grads[input.0], gx);
                }
                if let Some(gw) = gw {
                    accumulate_owned(&mut grads[weight.0], gw);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    accumulate_owned(&mut grads[b.0], gb);
                }
            }
            Op::ScatterToGrid { input, cells, channels, plane } => {
                if self.wants(*input) {
                    let c = *channels;
                    let mut ga = vec![T::zero(); cells.len() * c];
                    for (k, &cell) in cells.iter().enumerate() {
                        let (b, pix) = (cell / plane, cell % plane);
                        for ch in 0..c {
                            ga[k * c + ch] = g[(b * c + ch) * plane + pix];
                        }
                    }
                    accumulate_owned(&mut grads[input.0], ga);
                }
            }
            Op::Upsample2x { input, n, c, h, w } => {
                if self.wants(*input) {
                    let (h, w) = (*h, *w);
                    let mut ga = vec![T::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                ga[nc * h * w + (y / 2) * w + x / 2] += g[nc * 4 * h * w + y * 2 * w + x];
                            }
                        }
                    }
                    accumulate_owned(&mut grads[input.0], ga);
                }
            }
            Op::Custom { inputs, backward, .. } => {
                let gs = backward(g);
                debug_assert_eq!(gs.len(), inputs.len());
                for (v, gv) in inputs.iter().zip(gs) {
                    if self.wants(*v) {
                        debug_assert_eq!(gv.len(), self.value(*v).len());
                        accumulate_owned(&mut grads[v.0], gv);
                    }
                }
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_gradient_at_negative_input_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(vec![-1.0, 2.0], vec![2]).unwrap();
        let y = g.relu(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let a_vals: Vec<f64> = (0..9).map(|v| v as f64 - 4.0).collect();
        let a = g.param(a_vals.clone(), vec![3, 3]).unwrap();
        let eye = g.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3]).unwrap();
        let p = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(p), &a_vals[..]);
        // d/dA sum(A·I) is all ones
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).unwrap().iter().all(|v| *v == 1.0));
        assert!(grads.get(eye).is_none());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = g.constant(vec![0.0; 6], vec![3, 2]).unwrap();
        let err = g.add(a, b).unwrap_err();
        assert_eq!(err, TensorError::Shape { op: "add", shapes: vec![vec![2, 3], vec![3, 2]] });
        assert!(err.to_string().contains("add"));
        assert!(matches!(g.matmul(a, a), Err(TensorError::Shape { op: "matmul", .. })));
        assert!(g.reshape(a, &[4]).is_err());
    }

    #[test]
    fn max_ties_go_to_first_index() {
        let mut g = Graph::<f64>::new();
        let x = g.param(vec![1.0, 3.0, 3.0, 0.0, 2.0, 2.0], vec![2, 3]).unwrap();
        let m = g.max_over_axis(x, 1).unwrap();
        assert_eq!(g.value(m), &[3.0, 2.0]);
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn scatter_rejects_duplicates_and_out_of_range() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![1.0; 4], vec![2, 2]).unwrap();
        assert!(g.scatter_to_grid(x, &[(0, 1, 1), (0, 1, 1)], [1, 2, 2]).is_err());
        assert!(g.scatter_to_grid(x, &[(0, 1, 1), (0, 2, 0)], [1, 2, 2]).is_err());
        let y = g.scatter_to_grid(x, &[(0, 1, 1), (0, 0, 1)], [1, 2, 2]).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2, 2]);
        assert_eq!(g.value(y), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn each_node_visited_once_with_shared_subexpressions() {
        // y = x*x + x, dy/dx = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.param(vec![3.0], vec![1]).unwrap();
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[7.0]);
    }
}
