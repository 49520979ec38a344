//! Taped reverse-mode automatic differentiation.
//!
//! A [`Var`] is a reference-counted node holding its forward value and the
//! operation that produced it. Nodes created from inputs that do not
//! require gradients record nothing, so inference graphs free their
//! intermediates as soon as the last handle drops.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{dim_err, NumError, Result};
use crate::kernels::{self, Mask};
use crate::scalar::Scalar;
use crate::tensor::{check_finite, Tensor};

pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    retain: Cell<bool>,
    backward_done: Cell<bool>,
}

/// Elementwise unary kernels available on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Abs,
    /// `x * sigmoid(x)`, the gate of SwiGLU blocks.
    Silu,
}

enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var<T>,
        b: Var<T>,
        a_t: bool,
        b_t: bool,
    },
    Add(Var<T>, Var<T>),
    Sub(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Affine {
        x: Var<T>,
        mul: T,
    },
    MulScalar {
        x: Var<T>,
        s: Var<T>,
    },
    Unary {
        x: Var<T>,
        kind: Unary,
    },
    Softmax {
        x: Var<T>,
    },
    RmsNorm {
        x: Var<T>,
        gain: Var<T>,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var<T>,
        table: Rc<RopeTable<T>>,
    },
    Embedding {
        table: Var<T>,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var<T>,
        targets: Vec<Option<usize>>,
        count: usize,
        probs: Vec<T>,
    },
    Sum(Var<T>),
    Block {
        x: Var<T>,
        r0: usize,
        c0: usize,
    },
    Concat {
        parts: Vec<(Var<T>, usize, usize)>,
    },
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<&Var<T>> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![a, b]
            }
            Op::MulScalar { x, s } => vec![x, s],
            Op::RmsNorm { x, gain, .. } => vec![x, gain],
            Op::Affine { x, .. }
            | Op::Unary { x, .. }
            | Op::Softmax { x }
            | Op::Rope { x, .. }
            | Op::Block { x, .. }
            | Op::Sum(x) => vec![x],
            Op::Embedding { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Concat { parts } => parts.iter().map(|(v, _, _)| v).collect(),
        }
    }
}

/// Precomputed rotary angles for `positions x head_dim/2` frequency pairs.
#[derive(Debug)]
pub struct RopeTable<T> {
    pub head_dim: usize,
    pub seq_len: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    /// Row `r` of an input is rotated by position `offset + r % seq_len`.
    pub fn new(head_dim: usize, seq_len: usize, theta: f64, offset: usize) -> Result<Self> {
        if head_dim % 2 != 0 || head_dim == 0 {
            return Err(dim_err("rope", format!("head_dim {head_dim} must be even")));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq_len * half);
        let mut sin = Vec::with_capacity(seq_len * half);
        for p in 0..seq_len {
            let pos = (p + offset) as f64;
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let ang = pos * freq;
                cos.push(T::of(ang.cos()));
                sin.push(T::of(ang.sin()));
            }
        }
        Ok(Self {
            head_dim,
            seq_len,
            cos,
            sin,
        })
    }

    fn apply(&self, x: &[T], cols: usize, inverse: bool) -> Vec<T> {
        let half = self.head_dim / 2;
        let mut out = vec![T::zero(); x.len()];
        for (r, (src, dst)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let p = r % self.seq_len;
            let cs = &self.cos[p * half..(p + 1) * half];
            let sn = &self.sin[p * half..(p + 1) * half];
            for (hs, hd) in src.chunks(self.head_dim).zip(dst.chunks_mut(self.head_dim)) {
                for i in 0..half {
                    let (a, b) = (hs[i], hs[i + half]);
                    let s = if inverse { -sn[i] } else { sn[i] };
                    hd[i] = a * cs[i] - b * s;
                    hd[i + half] = a * s + b * cs[i];
                }
            }
        }
        out
    }
}

impl<T: Scalar> Var<T> {
    fn from_node(value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            value,
            op,
            requires_grad,
            grad: RefCell::new(None),
            retain: Cell::new(false),
            backward_done: Cell::new(false),
        }))
    }

    /// Result node; drops the op record when no parent needs gradients.
    fn derived(op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Self> {
        check_finite(op_name, value.data())?;
        let rg = op.parents().iter().any(|p| p.0.requires_grad);
        Ok(if rg {
            Self::from_node(value, op, true)
        } else {
            Self::from_node(value, Op::Leaf, false)
        })
    }

    /// Differentiable input (parameter or probe point).
    pub fn param(value: Tensor<T>) -> Self {
        Self::from_node(value, Op::Leaf, true)
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::from_node(value, Op::Leaf, false)
    }

    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Self::from_node(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn same_node(&self, other: &Var<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Keep this intermediate's gradient after `backward`.
    pub fn retain_grad(&self) {
        self.0.retain.set(true);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    /// Gradient as a tensor, zeros when the node was never reached.
    pub fn grad_tensor(&self) -> Tensor<T> {
        let data = self
            .grad()
            .unwrap_or_else(|| vec![T::zero(); self.0.value.numel()]);
        Tensor::new(self.0.value.shape(), data).expect("gradient matches value shape")
    }

    /// Clears this node's gradient and re-arms `backward`.
    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
        self.0.backward_done.set(false);
    }

    pub fn into_value(self) -> Tensor<T> {
        match Rc::try_unwrap(self.0) {
            Ok(node) => node.value,
            Err(rc) => rc.value.clone(),
        }
    }

    fn dims(&self) -> Result<(usize, usize)> {
        self.0.value.dims2()
    }

    fn same_shape(&self, op: &'static str, other: &Var<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Var<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .0
            .value
            .data()
            .iter()
            .zip(other.0.value.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape(), data).expect("shape preserved")
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&self, b: &Var<T>) -> Result<Var<T>> {
        self.matmul_t(b, false, false)
    }

    /// `self * b^T`.
    pub fn matmul_nt(&self, b: &Var<T>) -> Result<Var<T>> {
        self.matmul_t(b, false, true)
    }

    /// `op(self) * op(b)` with optional transposes of the stored matrices.
    pub fn matmul_t(&self, b: &Var<T>, a_t: bool, b_t: bool) -> Result<Var<T>> {
        let (ar, ac) = self.dims()?;
        let (br, bc) = b.dims()?;
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("inner extents differ: {m}x{k} times {k2}x{n}"),
            ));
        }
        check_finite("matmul", self.0.value.data())?;
        check_finite("matmul", b.0.value.data())?;
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.0.value.data(),
            a_t,
            b.0.value.data(),
            b_t,
            T::zero(),
            &mut out,
        )?;
        let value = Tensor::new(&[m, n], out)?;
        Self::derived(
            "matmul",
            value,
            Op::MatMul {
                a: self.clone(),
                b: b.clone(),
                a_t,
                b_t,
            },
        )
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, b: &Var<T>) -> Result<Var<T>> {
        self.same_shape("add", b)?;
        let v = self.zip_with(b, |x, y| x + y);
        Self::derived("add", v, Op::Add(self.clone(), b.clone()))
    }

    pub fn sub(&self, b: &Var<T>) -> Result<Var<T>> {
        self.same_shape("sub", b)?;
        let v = self.zip_with(b, |x, y| x - y);
        Self::derived("sub", v, Op::Sub(self.clone(), b.clone()))
    }

    pub fn mul(&self, b: &Var<T>) -> Result<Var<T>> {
        self.same_shape("mul", b)?;
        let v = self.zip_with(b, |x, y| x * y);
        Self::derived("mul", v, Op::Mul(self.clone(), b.clone()))
    }

    /// `self * mul + add` with constant coefficients.
    pub fn affine(&self, mul: T, add: T) -> Result<Var<T>> {
        let v = self.0.value.map(|x| x * mul + add);
        Self::derived(
            "affine",
            v,
            Op::Affine {
                x: self.clone(),
                mul,
            },
        )
    }

    pub fn scale(&self, c: T) -> Result<Var<T>> {
        self.affine(c, T::zero())
    }

    /// Multiplies every element by a scalar node.
    pub fn mul_scalar(&self, s: &Var<T>) -> Result<Var<T>> {
        if s.0.value.numel() != 1 {
            return Err(dim_err(
                "mul_scalar",
                format!("expected a scalar, got shape {:?}", s.shape()),
            ));
        }
        let c = s.0.value.item();
        let v = self.0.value.map(|x| x * c);
        Self::derived(
            "mul_scalar",
            v,
            Op::MulScalar {
                x: self.clone(),
                s: s.clone(),
            },
        )
    }

    pub fn unary(&self, kind: Unary) -> Result<Var<T>> {
        let x = &self.0.value;
        let v = match kind {
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Log => {
                if let Some(i) = x.data().iter().position(|&v| v <= T::zero()) {
                    return Err(NumError::Domain {
                        op: "log",
                        detail: format!("non-positive input at element {i}"),
                    });
                }
                x.map(|v| v.ln())
            }
            Unary::Abs => x.map(|v| v.abs()),
            Unary::Silu => x.map(|v| v / (T::one() + (-v).exp())),
        };
        Self::derived(
            "unary",
            v,
            Op::Unary {
                x: self.clone(),
                kind,
            },
        )
    }

    pub fn exp(&self) -> Result<Var<T>> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Result<Var<T>> {
        self.unary(Unary::Log)
    }

    pub fn abs(&self) -> Result<Var<T>> {
        self.unary(Unary::Abs)
    }

    pub fn silu(&self) -> Result<Var<T>> {
        self.unary(Unary::Silu)
    }

    // ---- structured -----------------------------------------------------

    pub fn softmax_masked(&self, mask: &Mask) -> Result<Var<T>> {
        let (r, c) = self.dims()?;
        check_finite("row_softmax_masked", self.0.value.data())?;
        let p = kernels::softmax_rows_masked(self.0.value.data(), r, c, mask)?;
        let v = Tensor::new(&[r, c], p)?;
        Self::derived("row_softmax_masked", v, Op::Softmax { x: self.clone() })
    }

    /// Row-wise RMS normalization followed by a per-column gain.
    pub fn rms_norm(&self, gain: &Var<T>, eps: f64) -> Result<Var<T>> {
        let (r, c) = self.dims()?;
        if gain.0.value.numel() != c {
            return Err(dim_err(
                "rms_norm",
                format!("gain has {} entries for width {c}", gain.0.value.numel()),
            ));
        }
        let x = self.0.value.data();
        let g = gain.0.value.data();
        let mut out = vec![T::zero(); r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let ms: T = row.iter().map(|&v| v * v).sum::<T>() / T::of(c as f64);
            let inv = T::one() / (ms + T::of(eps)).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out[i * c + j] = row[j] * inv * g[j];
            }
        }
        let v = Tensor::new(&[r, c], out)?;
        Self::derived(
            "rms_norm",
            v,
            Op::RmsNorm {
                x: self.clone(),
                gain: gain.clone(),
                inv_rms,
            },
        )
    }

    /// Rotary embedding over every `head_dim`-wide column group.
    pub fn rope(&self, table: &Rc<RopeTable<T>>) -> Result<Var<T>> {
        let (_, c) = self.dims()?;
        if c % table.head_dim != 0 {
            return Err(dim_err(
                "rope",
                format!("width {c} is not a multiple of head_dim {}", table.head_dim),
            ));
        }
        let v = Tensor::new(self.shape(), table.apply(self.0.value.data(), c, false))?;
        Self::derived(
            "rope",
            v,
            Op::Rope {
                x: self.clone(),
                table: Rc::clone(table),
            },
        )
    }

    /// Gathers rows of an embedding table.
    pub fn embedding(table: &Var<T>, ids: &[usize]) -> Result<Var<T>> {
        let (vocab, d) = table.dims()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(dim_err("embedding", format!("id {id} >= vocab {vocab}")));
            }
            out.extend_from_slice(table.0.value.row(id));
        }
        let v = Tensor::new(&[ids.len(), d], out)?;
        Self::derived(
            "embedding",
            v,
            Op::Embedding {
                table: table.clone(),
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean cross entropy of `rows x vocab` logits against one target per row.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<T>> {
        let t: Vec<Option<usize>> = targets.iter().copied().map(Some).collect();
        self.cross_entropy_masked(&t)
    }

    /// Cross entropy averaged over the rows whose target is `Some`.
    pub fn cross_entropy_masked(&self, targets: &[Option<usize>]) -> Result<Var<T>> {
        let (r, c) = self.dims()?;
        if targets.len() != r {
            return Err(dim_err(
                "cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(NumError::Contract(
                "cross_entropy: no row has a target".into(),
            ));
        }
        check_finite("cross_entropy", self.0.value.data())?;
        let x = self.0.value.data();
        let mut probs = vec![T::zero(); r * c];
        let mut total = 0.0f64;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(dim_err("cross_entropy", format!("target {t} >= vocab {c}")));
            }
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let pr = &mut probs[i * c..(i + 1) * c];
            for (p, &v) in pr.iter_mut().zip(row) {
                *p = (v - max).exp();
            }
            let sum: T = pr.iter().copied().sum();
            total += (sum.ln() + max - row[t]).f64();
            let inv = T::one() / sum;
            pr.iter_mut().for_each(|p| *p = *p * inv);
        }
        let v = Tensor::scalar(T::of(total / count as f64));
        Self::derived(
            "cross_entropy",
            v,
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                count,
                probs,
            },
        )
    }

    pub fn sum(&self) -> Result<Var<T>> {
        let s: T = self.0.value.data().iter().copied().sum();
        Self::derived("sum", Tensor::scalar(s), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let n = self.0.value.numel() as f64;
        self.sum()?.scale(T::of(1.0 / n))
    }

    /// Copies a `rows x cols` block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var<T>> {
        let v = self.0.value.block(r0, rows, c0, cols)?;
        Self::derived(
            "block",
            v,
            Op::Block {
                x: self.clone(),
                r0,
                c0,
            },
        )
    }

    /// Assembles a grid of blocks: `grid[i]` is one block-row, concatenated
    /// along columns; block-rows are stacked vertically.
    pub fn concat_grid(grid: &[Vec<Var<T>>]) -> Result<Var<T>> {
        let mut parts = Vec::new();
        let mut total_rows = 0;
        let mut total_cols = None;
        for row in grid {
            let h = match row.first() {
                Some(v) => v.dims()?.0,
                None => return Err(dim_err("concat", "empty block row")),
            };
            let mut c0 = 0;
            for v in row {
                let (r, c) = v.dims()?;
                if r != h {
                    return Err(dim_err("concat", "blocks in a row differ in height"));
                }
                parts.push((v.clone(), total_rows, c0));
                c0 += c;
            }
            if *total_cols.get_or_insert(c0) != c0 {
                return Err(dim_err("concat", "block rows differ in width"));
            }
            total_rows += h;
        }
        let cols = total_cols.ok_or_else(|| dim_err("concat", "empty grid"))?;
        let mut out = vec![T::zero(); total_rows * cols];
        for (v, r0, c0) in &parts {
            let (r, c) = v.dims()?;
            let src = v.0.value.data();
            for i in 0..r {
                out[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(&[total_rows, cols], out)?;
        Self::derived("concat", value, Op::Concat { parts })
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates `d self / d node` into every reachable node that requires
    /// gradients. Leaf gradients accumulate; calling twice on the same loss
    /// without [`Var::zero_grad`] is a contract error.
    pub fn backward(&self) -> Result<()> {
        if self.0.value.numel() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.0.backward_done.get() {
            return Err(NumError::Contract(
                "backward called twice on the same loss without zero_grad".into(),
            ));
        }
        if !self.0.requires_grad {
            self.0.backward_done.set(true);
            return Ok(());
        }
        let order = self.topo_order();
        accumulate(self, |g| g[0] = g[0] + T::one());
        for node in order.iter().rev() {
            let g = {
                let slot = node.0.grad.borrow();
                match slot.as_ref() {
                    Some(g) => g.clone(),
                    None => continue,
                }
            };
            node.propagate(&g)?;
            let is_leaf = matches!(node.0.op, Op::Leaf);
            if !is_leaf && !node.0.retain.get() && !node.same_node(self) {
                *node.0.grad.borrow_mut() = None;
            }
        }
        self.0.backward_done.set(true);
        Ok(())
    }

    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&v.0)) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in v.0.op.parents().into_iter().rev() {
                if p.0.requires_grad && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, g: &[T]) -> Result<()> {
        let out = &self.0.value;
        match &self.0.op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let (m, n) = out.dims2()?;
                let (ar, ac) = a.dims()?;
                let k = if *a_t { ar } else { ac };
                if a.0.requires_grad {
                    let bd = b.0.value.data();
                    try_accumulate(a, |ga| {
                        if *a_t {
                            kernels::gemm(k, n, m, bd, *b_t, g, true, T::one(), ga)
                        } else {
                            kernels::gemm(m, n, k, g, false, bd, !*b_t, T::one(), ga)
                        }
                    })?;
                }
                if b.0.requires_grad {
                    let ad = a.0.value.data();
                    try_accumulate(b, |gb| {
                        if *b_t {
                            kernels::gemm(n, m, k, g, true, ad, *a_t, T::one(), gb)
                        } else {
                            kernels::gemm(k, m, n, ad, !*a_t, g, false, T::one(), gb)
                        }
                    })?;
                }
            }
            Op::Add(a, b) => {
                accumulate(a, |ga| add_into(ga, g));
                accumulate(b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                accumulate(a, |ga| add_into(ga, g));
                accumulate(b, |gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (a.0.value.data(), b.0.value.data());
                accumulate(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                });
                accumulate(b, |gb| {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                });
            }
            Op::Affine { x, mul } => {
                accumulate(x, |gx| gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * *mul));
            }
            Op::MulScalar { x, s } => {
                let c = s.0.value.item();
                accumulate(x, |gx| gx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * c));
                let xv = x.0.value.data();
                accumulate(s, |gs| {
                    let dot: T = xv.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    gs[0] = gs[0] + dot;
                });
            }
            Op::Unary { x, kind } => {
                let xv = x.0.value.data();
                let yv = out.data();
                match kind {
                    Unary::Exp => accumulate(x, |gx| {
                        for i in 0..g.len() {
                            gx[i] = gx[i] + g[i] * yv[i];
                        }
                    }),
                    Unary::Log => accumulate(x, |gx| {
                        for i in 0..g.len() {
                            gx[i] = gx[i] + g[i] / xv[i];
                        }
                    }),
                    Unary::Abs => {
                        if let Some(i) = xv.iter().position(|&v| v == T::zero()) {
                            return Err(NumError::Domain {
                                op: "abs",
                                detail: format!("derivative undefined at zero (element {i})"),
                            });
                        }
                        accumulate(x, |gx| {
                            for i in 0..g.len() {
                                gx[i] = gx[i] + g[i] * xv[i].signum();
                            }
                        })
                    }
                    Unary::Silu => accumulate(x, |gx| {
                        for i in 0..g.len() {
                            let s = T::one() / (T::one() + (-xv[i]).exp());
                            gx[i] = gx[i] + g[i] * (s + xv[i] * s * (T::one() - s));
                        }
                    }),
                }
            }
            Op::Softmax { x } => {
                let (r, c) = out.dims2()?;
                let dx = kernels::softmax_rows_backward(out.data(), g, r, c);
                accumulate(x, |gx| add_into(gx, &dx));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (r, c) = out.dims2()?;
                let xv = x.0.value.data();
                let gv = gain.0.value.data();
                if gain.0.requires_grad {
                    accumulate(gain, |gg| {
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] = gg[j] + g[i * c + j] * xv[i * c + j] * inv_rms[i];
                            }
                        }
                    });
                }
                if x.0.requires_grad {
                    let inv_c = T::of(1.0 / c as f64);
                    accumulate(x, |gx| {
                        for i in 0..r {
                            let ri = inv_rms[i];
                            let row = &xv[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let dot: T = (0..c).map(|j| gr[j] * gv[j] * row[j]).sum();
                            let coef = ri * ri * ri * dot * inv_c;
                            for j in 0..c {
                                gx[i * c + j] = gx[i * c + j] + ri * gv[j] * gr[j] - coef * row[j];
                            }
                        }
                    });
                }
            }
            Op::Rope { x, table } => {
                let (_, c) = out.dims2()?;
                let dx = table.apply(g, c, true);
                accumulate(x, |gx| add_into(gx, &dx));
            }
            Op::Embedding { table, ids } => {
                let (_, d) = out.dims2()?;
                accumulate(table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                count,
                probs,
            } => {
                let (_, c) = logits.dims()?;
                let scale = g[0] / T::of(*count as f64);
                accumulate(logits, |gl| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            let mut d = probs[i * c + j];
                            if j == t {
                                d = d - T::one();
                            }
                            gl[i * c + j] = gl[i * c + j] + d * scale;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                accumulate(x, |gx| gx.iter_mut().for_each(|d| *d = *d + g[0]));
            }
            Op::Block { x, r0, c0 } => {
                let (rows, cols) = out.dims2()?;
                let (_, xc) = x.dims()?;
                accumulate(x, |gx| {
                    for i in 0..rows {
                        let dst = &mut gx[(r0 + i) * xc + c0..(r0 + i) * xc + c0 + cols];
                        add_into(dst, &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::Concat { parts } => {
                let (_, cols) = out.dims2()?;
                for (v, r0, c0) in parts {
                    let (r, c) = v.dims()?;
                    accumulate(v, |gv| {
                        for i in 0..r {
                            let src = &g[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + c];
                            add_into(&mut gv[i * c..(i + 1) * c], src);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn accumulate<T: Scalar>(v: &Var<T>, f: impl FnOnce(&mut [T])) {
    if !v.0.requires_grad {
        return;
    }
    let mut slot = v.0.grad.borrow_mut();
    let buf = slot.get_or_insert_with(|| vec![T::zero(); v.0.value.numel()]);
    f(buf);
}

fn try_accumulate<T: Scalar>(v: &Var<T>, f: impl FnOnce(&mut [T]) -> Result<()>) -> Result<()> {
    if !v.0.requires_grad {
        return Ok(());
    }
    let mut slot = v.0.grad.borrow_mut();
    let buf = slot.get_or_insert_with(|| vec![T::zero(); v.0.value.numel()]);
    f(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_grad_is_ones() {
        let x = Var::param(Tensor::<f64>::full(&[3, 2], 0.5));
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn half_square_grad_is_identity() {
        let x = Var::param(t(&[vec![1.0, -2.0], vec![3.0, 0.25]]));
        let loss = x.mul(&x).unwrap().sum().unwrap().scale(0.5).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), x.value().data());
    }

    #[test]
    fn double_backward_is_contract_error() {
        let x = Var::param(Tensor::<f64>::ones(&[2]));
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(NumError::Contract(_))));
        loss.zero_grad();
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Var::param(Tensor::<f64>::ones(&[2]));
        assert!(matches!(x.backward(), Err(NumError::Contract(_))));
    }

    #[test]
    fn unreached_param_has_no_grad() {
        let x = Var::param(Tensor::<f64>::ones(&[2]));
        let y = Var::param(Tensor::<f64>::ones(&[2]));
        x.sum().unwrap().backward().unwrap();
        assert!(y.grad().is_none());
    }

    #[test]
    fn constants_record_nothing() {
        let a = Var::constant(Tensor::<f64>::ones(&[2, 2]));
        let b = a.matmul(&a).unwrap();
        assert!(!b.requires_grad());
        assert_eq!(b.value().data(), &[2.0; 4]);
    }

    #[test]
    fn log_domain_error() {
        let x = Var::param(Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(matches!(x.log(), Err(NumError::Domain { .. })));
    }

    #[test]
    fn abs_derivative_at_zero_is_error() {
        let x = Var::param(Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let l = x.abs().unwrap().sum().unwrap();
        assert!(matches!(l.backward(), Err(NumError::Domain { .. })));
    }

    #[test]
    fn retained_intermediate_keeps_grad() {
        let x = Var::param(Tensor::<f64>::full(&[2], 2.0));
        let y = x.scale(3.0).unwrap();
        y.retain_grad();
        let z = x.scale(5.0).unwrap();
        let loss = y.mul(&y).unwrap().sum().unwrap().add(&z.sum().unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![12.0, 12.0]);
        assert!(z.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![41.0, 41.0]);
    }

    #[test]
    fn rope_preserves_norm_and_inverts() {
        let table = Rc::new(RopeTable::<f64>::new(4, 3, 10000.0, 0).unwrap());
        let x = Var::constant(
            Tensor::new(&[3, 8], (0..24).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap(),
        );
        let y = x.rope(&table).unwrap();
        for r in 0..3 {
            let n0: f64 = x.value().row(r).iter().map(|v| v * v).sum();
            let n1: f64 = y.value().row(r).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
        let back = table.apply(y.value().data(), 8, true);
        for (a, b) in back.iter().zip(x.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
