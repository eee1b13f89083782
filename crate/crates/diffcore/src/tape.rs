//! Define-by-run computation tape.
//!
//! Every forward operation appends a node holding its value and the indices
//! of its parents, so nodes are stored in topological order by construction.
//! [`Tape::backward`] walks the nodes once in reverse, accumulating gradients
//! via each operation's vector-Jacobian rule.
//!
//! The tape is rebuilt per forward pass: parameters live outside the tape as
//! plain [`Matrix`] values and are stamped onto a fresh tape with
//! [`Tape::var`] each pass. Shape violations and domain violations (`log` of
//! a non-positive value, non-scalar `backward` root) are programming errors
//! and panic with a message naming the offending shapes or value.

use crate::matrix::Matrix;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SoftmaxRows(usize),
    LayerNormRows { x: usize, eps: f64 },
}

struct Node {
    op: Op,
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
}

/// Numerically safe sigmoid.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe softplus: `max(x, 0) + ln(1 + exp(-|x|))`.
///
/// The result is clamped to `f64::MIN_POSITIVE` so it stays strictly
/// positive even where `exp(-|x|)` underflows (x below roughly -745).
pub fn softplus_scalar(x: f64) -> f64 {
    let r = x.max(0.0) + (-x.abs()).exp().ln_1p();
    r.max(f64::MIN_POSITIVE)
}

/// A define-by-run computation graph over [`Matrix`] values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable leaf (a parameter).
    pub fn var(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Registers a non-differentiable leaf (data, masks).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// A non-differentiable `1x1` constant.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`.
    ///
    /// # Panics
    /// Panics if no backward pass has touched `v`.
    pub fn grad(&self, v: Var) -> &Matrix {
        self.nodes[v.0]
            .grad
            .as_ref()
            .expect("grad() called before backward()")
    }

    fn requires(&self, a: usize) -> bool {
        self.nodes[a].requires_grad
    }

    fn binary_shape(&self, op: &str, a: Var, b: Var) -> (usize, usize) {
        let (ar, ac) = self.nodes[a.0].value.shape();
        let (br, bc) = self.nodes[b.0].value.shape();
        if (ar, ac) == (br, bc) {
            (ar, ac)
        } else if ar * ac == 1 {
            (br, bc)
        } else if br * bc == 1 {
            (ar, ac)
        } else {
            panic!("{op}: incompatible shapes {ar}x{ac} and {br}x{bc}");
        }
    }

    fn elementwise_binary(
        &mut self,
        op_name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Var {
        let (rows, cols) = self.binary_shape(op_name, a, b);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n = rows * cols;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = if av.is_scalar() { av.data()[0] } else { av.data()[i] };
            let y = if bv.is_scalar() { bv.data()[0] } else { bv.data()[i] };
            out.push(f(x, y));
        }
        let rg = self.requires(a.0) || self.requires(b.0);
        self.push(op, Matrix::new(rows, cols, out), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.elementwise_binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.elementwise_binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.elementwise_binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.elementwise_binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = &self.nodes[a.0].value;
        let out = Matrix::new(av.rows(), av.cols(), av.iter().map(|&x| f(x)).collect());
        let rg = self.requires(a.0);
        self.push(op, out, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    /// Natural logarithm.
    ///
    /// # Panics
    /// Panics on a non-positive entry (domain error).
    pub fn log(&mut self, a: Var) -> Var {
        if let Some(&bad) = self.nodes[a.0].value.iter().find(|&&x| x <= 0.0) {
            panic!("log: domain error, non-positive input {bad}");
        }
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus_scalar, Op::Softplus(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    /// Matrix product.
    ///
    /// # Panics
    /// Panics when the inner dimensions disagree, naming both shapes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.nodes[a.0].value.shape();
        let (br, bc) = self.nodes[b.0].value.shape();
        if ac != br {
            panic!("matmul: incompatible shapes {ar}x{ac} and {br}x{bc}");
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out = matmul_raw(av, bv);
        let rg = self.requires(a.0) || self.requires(b.0);
        self.push(Op::MatMul(a.0, b.0), out, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.transposed();
        let rg = self.requires(a.0);
        self.push(Op::Transpose(a.0), out, rg)
    }

    /// Sum of all entries, as a `1x1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.requires(a.0);
        self.push(Op::Sum(a.0), Matrix::scalar(s), rg)
    }

    /// Mean of all entries, as a `1x1` matrix.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.requires(a.0);
        self.push(Op::Mean(a.0), Matrix::scalar(s / n as f64), rg)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let cols = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(
                v.cols(),
                cols,
                "concat_rows: column mismatch {} vs {}",
                v.cols(),
                cols
            );
            rows += v.rows();
            data.extend_from_slice(v.data());
            rg |= self.requires(p.0);
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.push(Op::ConcatRows(ids), Matrix::new(rows, cols, data), rg)
    }

    /// Stacks matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let rows = self.nodes[parts[0].0].value.rows();
        let total_cols: usize = parts
            .iter()
            .map(|p| {
                let v = &self.nodes[p.0].value;
                assert_eq!(
                    v.rows(),
                    rows,
                    "concat_cols: row mismatch {} vs {}",
                    v.rows(),
                    rows
                );
                v.cols()
            })
            .sum();
        let mut out = Matrix::zeros(rows, total_cols);
        let mut col0 = 0;
        let mut rg = false;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, col0 + c, v.get(r, c));
                }
            }
            col0 += v.cols();
            rg |= self.requires(p.0);
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.push(Op::ConcatCols(ids), out, rg)
    }

    /// Row-wise softmax with max-subtraction for overflow safety.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let (rows, cols) = v.shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..cols {
                mx = mx.max(v.get(r, c));
            }
            let mut denom = 0.0;
            for c in 0..cols {
                let e = (v.get(r, c) - mx).exp();
                out.set(r, c, e);
                denom += e;
            }
            for c in 0..cols {
                out.set(r, c, out.get(r, c) / denom);
            }
        }
        let rg = self.requires(a.0);
        self.push(Op::SoftmaxRows(a.0), out, rg)
    }

    /// Row-wise layer normalization (no affine part): each row is shifted to
    /// mean zero and scaled by `1/sqrt(var + eps)` with biased variance.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let (rows, cols) = v.shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut mean = 0.0;
            for c in 0..cols {
                mean += v.get(r, c);
            }
            mean /= cols as f64;
            let mut var = 0.0;
            for c in 0..cols {
                let d = v.get(r, c) - mean;
                var += d * d;
            }
            var /= cols as f64;
            let s = (var + eps).sqrt();
            for c in 0..cols {
                out.set(r, c, (v.get(r, c) - mean) / s);
            }
        }
        let rg = self.requires(a.0);
        self.push(Op::LayerNormRows { x: a.0, eps }, out, rg)
    }

    /// Reverse pass from a scalar root. Every `var` leaf reachable from the
    /// root receives `d root / d leaf`; repeated calls without a fresh tape
    /// accumulate into existing gradients.
    ///
    /// # Panics
    /// Panics if `root` is not `1x1` (contract error).
    pub fn backward(&mut self, root: Var) {
        let (r, c) = self.nodes[root.0].value.shape();
        if (r, c) != (1, 1) {
            panic!("backward: root must be a scalar, got {r}x{c}");
        }
        for i in 0..=root.0 {
            if self.nodes[i].grad.is_none() {
                let (nr, nc) = self.nodes[i].value.shape();
                self.nodes[i].grad = Some(Matrix::zeros(nr, nc));
            }
        }
        if let Some(g) = self.nodes[root.0].grad.as_mut() {
            g.data_mut()[0] += 1.0;
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let dc = self.nodes[i].grad.clone().unwrap();
                    if self.requires(a) {
                        let bt = self.nodes[b].value.transposed();
                        let da = matmul_raw(&dc, &bt);
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let at = self.nodes[a].value.transposed();
                        let db = matmul_raw(&at, &dc);
                        self.accumulate(b, &db);
                    }
                }
                Op::Transpose(a) => {
                    let dt = self.nodes[i].grad.as_ref().unwrap().transposed();
                    self.accumulate(a, &dt);
                }
                Op::Add(a, b) => {
                    self.accumulate_broadcast(a, i, |_, _, g| g);
                    self.accumulate_broadcast(b, i, |_, _, g| g);
                }
                Op::Sub(a, b) => {
                    self.accumulate_broadcast(a, i, |_, _, g| g);
                    self.accumulate_broadcast(b, i, |_, _, g| -g);
                }
                Op::Mul(a, b) => {
                    self.accumulate_broadcast_binary(a, b, i, |_, y, g| g * y);
                    self.accumulate_broadcast_binary_rhs(a, b, i, |x, _, g| g * x);
                }
                Op::Div(a, b) => {
                    self.accumulate_broadcast_binary(a, b, i, |_, y, g| g / y);
                    self.accumulate_broadcast_binary_rhs(a, b, i, |x, y, g| -g * x / (y * y));
                }
                Op::Neg(a) => self.accumulate_unary(a, i, |_, _, g| -g),
                Op::Exp(a) => self.accumulate_unary(a, i, |_, out, g| g * out),
                Op::Log(a) => self.accumulate_unary(a, i, |x, _, g| g / x),
                Op::Sqrt(a) => self.accumulate_unary(a, i, |_, out, g| g * 0.5 / out),
                Op::Square(a) => self.accumulate_unary(a, i, |x, _, g| g * 2.0 * x),
                Op::Sigmoid(a) => self.accumulate_unary(a, i, |_, out, g| g * out * (1.0 - out)),
                Op::Tanh(a) => self.accumulate_unary(a, i, |_, out, g| g * (1.0 - out * out)),
                Op::Softplus(a) => self.accumulate_unary(a, i, |x, _, g| g * sigmoid_scalar(x)),
                Op::Relu(a) => self.accumulate_unary(a, i, |x, _, g| if x > 0.0 { g } else { 0.0 }),
                Op::Sum(a) => {
                    let g = self.nodes[i].grad.as_ref().unwrap().data()[0];
                    let (nr, nc) = self.nodes[a].value.shape();
                    let da = Matrix::new(nr, nc, vec![g; nr * nc]);
                    self.accumulate(a, &da);
                }
                Op::Mean(a) => {
                    let g = self.nodes[i].grad.as_ref().unwrap().data()[0];
                    let n = self.nodes[a].value.numel();
                    let (nr, nc) = self.nodes[a].value.shape();
                    let da = Matrix::new(nr, nc, vec![g / n as f64; nr * nc]);
                    self.accumulate(a, &da);
                }
                Op::ConcatRows(parts) => {
                    let dc = self.nodes[i].grad.clone().unwrap();
                    let mut row0 = 0;
                    for p in parts {
                        let (pr, pc) = self.nodes[p].value.shape();
                        let part = Matrix::from_fn(pr, pc, |r, c| dc.get(row0 + r, c));
                        row0 += pr;
                        self.accumulate(p, &part);
                    }
                }
                Op::ConcatCols(parts) => {
                    let dc = self.nodes[i].grad.clone().unwrap();
                    let mut col0 = 0;
                    for p in parts {
                        let (pr, pc) = self.nodes[p].value.shape();
                        let part = Matrix::from_fn(pr, pc, |r, c| dc.get(r, col0 + c));
                        col0 += pc;
                        self.accumulate(p, &part);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[i].value.clone();
                    let dy = self.nodes[i].grad.clone().unwrap();
                    let (rows, cols) = y.shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += dy.get(r, c) * y.get(r, c);
                        }
                        for c in 0..cols {
                            dx.set(r, c, (dy.get(r, c) - dot) * y.get(r, c));
                        }
                    }
                    self.accumulate(a, &dx);
                }
                Op::LayerNormRows { x, eps } => {
                    let y = self.nodes[i].value.clone();
                    let dy = self.nodes[i].grad.clone().unwrap();
                    let xv = self.nodes[x].value.clone();
                    let (rows, cols) = y.shape();
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let mut mean = 0.0;
                        for c in 0..cols {
                            mean += xv.get(r, c);
                        }
                        mean /= n;
                        let mut var = 0.0;
                        for c in 0..cols {
                            let d = xv.get(r, c) - mean;
                            var += d * d;
                        }
                        var /= n;
                        let s = (var + eps).sqrt();
                        let mut dy_mean = 0.0;
                        let mut dyy_mean = 0.0;
                        for c in 0..cols {
                            dy_mean += dy.get(r, c);
                            dyy_mean += dy.get(r, c) * y.get(r, c);
                        }
                        dy_mean /= n;
                        dyy_mean /= n;
                        for c in 0..cols {
                            let v = (dy.get(r, c) - dy_mean - y.get(r, c) * dyy_mean) / s;
                            dx.set(r, c, v);
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
        }
    }

    fn accumulate(&mut self, target: usize, delta: &Matrix) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let g = self.nodes[target].grad.as_mut().unwrap();
        debug_assert_eq!(g.shape(), delta.shape());
        for (gi, di) in g.data_mut().iter_mut().zip(delta.iter()) {
            *gi += di;
        }
    }

    /// Accumulates `f(x_a, out, g)` into parent `a` of unary node `i`.
    fn accumulate_unary(&mut self, a: usize, i: usize, f: impl Fn(f64, f64, f64) -> f64) {
        if !self.nodes[a].requires_grad {
            return;
        }
        let n = self.nodes[i].value.numel();
        let mut delta = Vec::with_capacity(n);
        {
            let xv = &self.nodes[a].value;
            let out = &self.nodes[i].value;
            let g = self.nodes[i].grad.as_ref().unwrap();
            for k in 0..n {
                delta.push(f(xv.data()[k], out.data()[k], g.data()[k]));
            }
        }
        let (nr, nc) = self.nodes[i].value.shape();
        let dm = Matrix::new(nr, nc, delta);
        self.accumulate(a, &self.reduce_to_shape(a, &dm));
    }

    /// Accumulates into parent `a` for `Add`/`Sub` where the local rule only
    /// needs the upstream gradient.
    fn accumulate_broadcast(&mut self, a: usize, i: usize, f: impl Fn(f64, f64, f64) -> f64) {
        if !self.nodes[a].requires_grad {
            return;
        }
        let (nr, nc) = self.nodes[i].value.shape();
        let n = nr * nc;
        let mut delta = Vec::with_capacity(n);
        {
            let g = self.nodes[i].grad.as_ref().unwrap();
            for k in 0..n {
                delta.push(f(0.0, 0.0, g.data()[k]));
            }
        }
        let dm = Matrix::new(nr, nc, delta);
        self.accumulate(a, &self.reduce_to_shape(a, &dm));
    }

    /// Gradient of binary node `i = op(a, b)` with respect to `a`, where the
    /// local rule needs the (broadcast-expanded) operand values.
    fn accumulate_broadcast_binary(
        &mut self,
        a: usize,
        b: usize,
        i: usize,
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        if !self.nodes[a].requires_grad {
            return;
        }
        let dm = self.expanded_binary_delta(a, b, i, f);
        self.accumulate(a, &self.reduce_to_shape(a, &dm));
    }

    /// Same as `accumulate_broadcast_binary` but targets parent `b`.
    fn accumulate_broadcast_binary_rhs(
        &mut self,
        a: usize,
        b: usize,
        i: usize,
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        if !self.nodes[b].requires_grad {
            return;
        }
        let dm = self.expanded_binary_delta(a, b, i, f);
        self.accumulate(b, &self.reduce_to_shape(b, &dm));
    }

    fn expanded_binary_delta(
        &self,
        a: usize,
        b: usize,
        i: usize,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Matrix {
        let (nr, nc) = self.nodes[i].value.shape();
        let n = nr * nc;
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let g = self.nodes[i].grad.as_ref().unwrap();
        let mut delta = Vec::with_capacity(n);
        for k in 0..n {
            let x = if av.is_scalar() { av.data()[0] } else { av.data()[k] };
            let y = if bv.is_scalar() { bv.data()[0] } else { bv.data()[k] };
            delta.push(f(x, y, g.data()[k]));
        }
        Matrix::new(nr, nc, delta)
    }

    /// Sums a full-shape delta down to a scalar when the parent was
    /// broadcast; otherwise returns it unchanged.
    fn reduce_to_shape(&self, target: usize, delta: &Matrix) -> Matrix {
        let tv = &self.nodes[target].value;
        if tv.shape() == delta.shape() {
            delta.clone()
        } else {
            debug_assert!(tv.is_scalar());
            Matrix::scalar(delta.iter().sum())
        }
    }
}

fn matmul_raw(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let bc = b.cols();
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; ar * bc];
    for r in 0..ar {
        let orow = &mut out[r * bc..(r + 1) * bc];
        for k in 0..ac {
            let av = ad[r * ac + k];
            let brow = &bd[k * bc..(k + 1) * bc];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Matrix::new(ar, bc, out)
}
