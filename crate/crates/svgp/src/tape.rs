//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The tape is eager: every operation computes its value immediately and
//! records enough structure for a single reverse sweep. Scalars are `1×1`
//! arrays and vectors are single-column arrays, so one node type covers
//! everything the objectives need.
//!
//! Matrix-factorization adjoints follow the usual identities: the Cholesky
//! reverse uses `Ā = ½(S + Sᵀ)` with `S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹` (Φ keeps the
//! lower triangle and halves the diagonal), which is correct whenever the
//! forward input is exactly symmetric — all factorized matrices in this
//! crate are built symmetrically.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{chol_with_jitter, solve_lower, solve_lower_t};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Recip(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sqr(Var),
    Softplus(Var),
    Sigmoid(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    MatMul(Var, Var),
    Transpose(Var),
    OuterDiff(Var, Var),
    AddColVec(Var, Var),
    AddRowVec(Var, Var),
    AddEye(Var),
    Chol(Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    TrilSoftplusDiag(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    ClampMin(Var, f64),
    Diag(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    track: bool,
}

/// Eager computation tape.
pub struct Tape {
    nodes: Vec<Node>,
    /// Number of Cholesky calls that needed a nonzero jitter rung.
    pub jitter_events: usize,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), jitter_events: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, track: bool) -> Var {
        self.nodes.push(Node { value, op, track });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].track
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1), "scalar() on non-scalar node");
        a[[0, 0]]
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, noise draws, masks).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), t)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MulElem(a, b), t)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        let t = self.tracked(a);
        self.push(v, Op::Neg(a), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| c * x);
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, c), t)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        let t = self.tracked(a);
        self.push(v, Op::AddConst(a), t)
    }

    /// Broadcast multiply by a `1×1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).mapv(|x| x * sv);
        let t = self.tracked(a) || self.tracked(s);
        self.push(v, Op::MulScalar(a, s), t)
    }

    /// Broadcast add of a `1×1` node.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).mapv(|x| x + sv);
        let t = self.tracked(a) || self.tracked(s);
        self.push(v, Op::AddScalar(a, s), t)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x);
        let t = self.tracked(a);
        self.push(v, Op::Recip(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let t = self.tracked(a);
        self.push(v, Op::Exp(a), t)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let t = self.tracked(a);
        self.push(v, Op::Ln(a), t)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        let t = self.tracked(a);
        self.push(v, Op::Sqrt(a), t)
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let t = self.tracked(a);
        self.push(v, Op::Sqr(a), t)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let t = self.tracked(a);
        self.push(v, Op::Softplus(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let t = self.tracked(a);
        self.push(v, Op::Sigmoid(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let t = self.tracked(a);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a), t)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let t = self.tracked(a);
        self.push(s, Op::SumRows(a), t)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let t = self.tracked(a);
        self.push(s, Op::SumCols(a), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMul(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let t = self.tracked(a);
        self.push(v, Op::Transpose(a), t)
    }

    /// `out[i,j] = a[i,0] − b[j,0]` for column vectors `a`, `b`.
    pub fn outer_diff(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        debug_assert_eq!(av.ncols(), 1);
        debug_assert_eq!(bv.ncols(), 1);
        let (n, m) = (av.nrows(), bv.nrows());
        let mut out = Array2::zeros((n, m));
        for i in 0..n {
            let ai = av[[i, 0]];
            for j in 0..m {
                out[[i, j]] = ai - bv[[j, 0]];
            }
        }
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::OuterDiff(a, b), t)
    }

    /// Add a column vector to every column of `a`.
    pub fn add_colvec(&mut self, a: Var, c: Var) -> Var {
        let av = self.value(a);
        let cv = self.value(c);
        debug_assert_eq!(cv.ncols(), 1);
        debug_assert_eq!(cv.nrows(), av.nrows());
        let mut out = av.clone();
        for i in 0..out.nrows() {
            let ci = cv[[i, 0]];
            for j in 0..out.ncols() {
                out[[i, j]] += ci;
            }
        }
        let t = self.tracked(a) || self.tracked(c);
        self.push(out, Op::AddColVec(a, c), t)
    }

    /// Add a row vector to every row of `a`.
    pub fn add_rowvec(&mut self, a: Var, r: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(r);
        debug_assert_eq!(rv.nrows(), 1);
        debug_assert_eq!(rv.ncols(), av.ncols());
        let mut out = av.clone();
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[[i, j]] += rv[[0, j]];
            }
        }
        let t = self.tracked(a) || self.tracked(r);
        self.push(out, Op::AddRowVec(a, r), t)
    }

    pub fn add_eye(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.nrows().min(v.ncols()) {
            v[[i, i]] += c;
        }
        let t = self.tracked(a);
        self.push(v, Op::AddEye(a), t)
    }

    /// Cholesky with the trace-scaled jitter ladder. The jitter is treated as
    /// a constant of the graph (not differentiated).
    pub fn chol(&mut self, a: Var) -> Result<Var> {
        let (l, jitter) = chol_with_jitter(self.value(a))?;
        if jitter > 0.0 {
            self.jitter_events += 1;
        }
        let jittered = self.add_eye(a, jitter);
        let t = self.tracked(jittered);
        Ok(self.push(l, Op::Chol(jittered), t))
    }

    /// `L⁻¹·B` for lower-triangular `l`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Var {
        let x = solve_lower(self.value(l), self.value(b));
        let t = self.tracked(l) || self.tracked(b);
        self.push(x, Op::SolveLower(l, b), t)
    }

    /// `L⁻ᵀ·B` for lower-triangular `l`.
    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Var {
        let x = solve_lower_t(self.value(l), self.value(b));
        let t = self.tracked(l) || self.tracked(b);
        self.push(x, Op::SolveLowerT(l, b), t)
    }

    /// Strict lower triangle passed through, diagonal mapped by
    /// `softplus(·) + eps`, upper triangle zeroed.
    pub fn tril_softplus_diag(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let n = av.nrows();
        debug_assert_eq!(av.ncols(), n);
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..i {
                out[[i, j]] = av[[i, j]];
            }
            out[[i, i]] = softplus(av[[i, i]]) + eps;
        }
        let t = self.tracked(a);
        self.push(out, Op::TrilSoftplusDiag(a), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Array2::zeros((n, total));
        let mut c0 = 0;
        for &p in parts {
            let v = self.value(p);
            debug_assert_eq!(v.nrows(), n);
            out.slice_mut(ndarray::s![.., c0..c0 + v.ncols()]).assign(v);
            c0 += v.ncols();
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut out = Array2::zeros((total, m));
        let mut r0 = 0;
        for &p in parts {
            let v = self.value(p);
            debug_assert_eq!(v.ncols(), m);
            out.slice_mut(ndarray::s![r0..r0 + v.nrows(), ..]).assign(v);
            r0 += v.nrows();
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let v = self.value(a).slice(ndarray::s![.., c0..c1]).to_owned();
        let t = self.tracked(a);
        self.push(v, Op::SliceCols(a, c0), t)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Array2::zeros((idx.len(), av.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&av.row(i));
        }
        let t = self.tracked(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), t)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        debug_assert_eq!(av.len(), rows * cols);
        let flat: Vec<f64> = av.iter().cloned().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape size");
        let t = self.tracked(a);
        self.push(v, Op::Reshape(a), t)
    }

    /// Elementwise `max(a, c)`; gradient passes where `a ≥ c`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(c));
        let t = self.tracked(a);
        self.push(v, Op::ClampMin(a, c), t)
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.nrows().min(av.ncols());
        let mut out = Array2::zeros((n, 1));
        for i in 0..n {
            out[[i, 0]] = av[[i, i]];
        }
        let t = self.tracked(a);
        self.push(out, Op::Diag(a), t)
    }

    /// Log-sum-exp across columns with a stop-gradient shift; `(n,s) → (n,1)`.
    pub fn logsumexp_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.nrows();
        let mut neg_m = Array2::zeros((n, 1));
        let mut m = Array2::zeros((n, 1));
        for i in 0..n {
            let row_max = xv.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m[[i, 0]] = row_max;
            neg_m[[i, 0]] = -row_max;
        }
        let neg_m = self.constant(neg_m);
        let m = self.constant(m);
        let shifted = self.add_colvec(x, neg_m);
        let e = self.exp(shifted);
        let s = self.sum_rows(e);
        let l = self.ln(s);
        self.add(l, m)
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        debug_assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].track {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let add_to = |slot: &mut Option<Array2<f64>>, delta: Array2<f64>| match slot {
            Some(acc) => *acc += &delta,
            None => *slot = Some(delta),
        };
        let add_if_tracked = |v: Var, delta: Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
            if self.tracked(v) {
                add_to(&mut grads[v.0], delta);
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_if_tracked(*a, g.clone(), grads);
                add_if_tracked(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                add_if_tracked(*a, g.clone(), grads);
                add_if_tracked(*b, g.mapv(|x| -x), grads);
            }
            Op::MulElem(a, b) => {
                add_if_tracked(*a, g * self.value(*b), grads);
                add_if_tracked(*b, g * self.value(*a), grads);
            }
            Op::Neg(a) => add_if_tracked(*a, g.mapv(|x| -x), grads),
            Op::Scale(a, c) => add_if_tracked(*a, g.mapv(|x| c * x), grads),
            Op::AddConst(a) => add_if_tracked(*a, g.clone(), grads),
            Op::MulScalar(a, s) => {
                let sv = self.scalar(*s);
                add_if_tracked(*a, g.mapv(|x| sv * x), grads);
                let d = (g * self.value(*a)).sum();
                add_if_tracked(*s, Array2::from_elem((1, 1), d), grads);
            }
            Op::AddScalar(a, s) => {
                add_if_tracked(*a, g.clone(), grads);
                add_if_tracked(*s, Array2::from_elem((1, 1), g.sum()), grads);
            }
            Op::Recip(a) => {
                let out = &self.nodes[i].value;
                add_if_tracked(*a, -(g * out * out), grads);
            }
            Op::Exp(a) => add_if_tracked(*a, g * &self.nodes[i].value, grads),
            Op::Ln(a) => add_if_tracked(*a, g / self.value(*a), grads),
            Op::Sqrt(a) => {
                let out = &self.nodes[i].value;
                add_if_tracked(*a, 0.5 * g / out, grads);
            }
            Op::Sqr(a) => add_if_tracked(*a, 2.0 * (g * self.value(*a)), grads),
            Op::Softplus(a) => {
                add_if_tracked(*a, g * &self.value(*a).mapv(sigmoid), grads);
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[i].value;
                add_if_tracked(*a, g * &(out * &out.mapv(|x| 1.0 - x)), grads);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).raw_dim();
                add_if_tracked(*a, Array2::from_elem(shape, g[[0, 0]]), grads);
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let mut d = Array2::zeros(av.raw_dim());
                for r in 0..av.nrows() {
                    let gv = g[[r, 0]];
                    for c in 0..av.ncols() {
                        d[[r, c]] = gv;
                    }
                }
                add_if_tracked(*a, d, grads);
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let mut d = Array2::zeros(av.raw_dim());
                for c in 0..av.ncols() {
                    let gv = g[[0, c]];
                    for r in 0..av.nrows() {
                        d[[r, c]] = gv;
                    }
                }
                add_if_tracked(*a, d, grads);
            }
            Op::MatMul(a, b) => {
                add_if_tracked(*a, g.dot(&self.value(*b).t()), grads);
                add_if_tracked(*b, self.value(*a).t().dot(g), grads);
            }
            Op::Transpose(a) => add_if_tracked(*a, g.t().to_owned(), grads),
            Op::OuterDiff(a, b) => {
                add_if_tracked(*a, g.sum_axis(Axis(1)).insert_axis(Axis(1)), grads);
                add_if_tracked(*b, g.sum_axis(Axis(0)).insert_axis(Axis(1)).mapv(|x| -x), grads);
            }
            Op::AddColVec(a, c) => {
                add_if_tracked(*a, g.clone(), grads);
                add_if_tracked(*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)), grads);
            }
            Op::AddRowVec(a, r) => {
                add_if_tracked(*a, g.clone(), grads);
                add_if_tracked(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
            }
            Op::AddEye(a) => add_if_tracked(*a, g.clone(), grads),
            Op::Chol(a) => {
                let l = &self.nodes[i].value;
                let n = l.nrows();
                // P = Φ(Lᵀ·Ḡ)
                let mut p = l.t().dot(g);
                for r in 0..n {
                    for c in 0..n {
                        if c > r {
                            p[[r, c]] = 0.0;
                        } else if c == r {
                            p[[r, c]] *= 0.5;
                        }
                    }
                }
                // S = L⁻ᵀ·P·L⁻¹, via two triangular solves
                let t1 = solve_lower_t(l, &p);
                let s_t = solve_lower_t(l, &t1.t().to_owned());
                let s = s_t.t().to_owned();
                let sym = (&s + &s.t()).mapv(|x| 0.5 * x);
                add_if_tracked(*a, sym, grads);
            }
            Op::SolveLower(l, b) => {
                let lv = self.value(*l);
                let x = &self.nodes[i].value;
                let gb = solve_lower_t(lv, g);
                if self.tracked(*l) {
                    let mut gl = gb.dot(&x.t()).mapv(|v| -v);
                    zero_upper(&mut gl);
                    add_to(&mut grads[l.0], gl);
                }
                add_if_tracked(*b, gb, grads);
            }
            Op::SolveLowerT(l, b) => {
                let lv = self.value(*l);
                let x = &self.nodes[i].value;
                let gb = solve_lower(lv, g);
                if self.tracked(*l) {
                    let mut gl = x.dot(&gb.t()).mapv(|v| -v);
                    zero_upper(&mut gl);
                    add_to(&mut grads[l.0], gl);
                }
                add_if_tracked(*b, gb, grads);
            }
            Op::TrilSoftplusDiag(a) => {
                let av = self.value(*a);
                let n = av.nrows();
                let mut d = Array2::zeros((n, n));
                for r in 0..n {
                    for c in 0..r {
                        d[[r, c]] = g[[r, c]];
                    }
                    d[[r, r]] = g[[r, r]] * sigmoid(av[[r, r]]);
                }
                add_if_tracked(*a, d, grads);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    let gp = g.slice(ndarray::s![.., c0..c0 + w]).to_owned();
                    add_if_tracked(p, gp, grads);
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    let gp = g.slice(ndarray::s![r0..r0 + h, ..]).to_owned();
                    add_if_tracked(p, gp, grads);
                    r0 += h;
                }
            }
            Op::SliceCols(a, c0) => {
                let av = self.value(*a);
                let mut d = Array2::zeros(av.raw_dim());
                d.slice_mut(ndarray::s![.., *c0..*c0 + g.ncols()]).assign(g);
                add_if_tracked(*a, d, grads);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut d = Array2::zeros(av.raw_dim());
                for (r, &srow) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(srow);
                    dst += &g.row(r);
                }
                add_if_tracked(*a, d, grads);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).raw_dim();
                let flat: Vec<f64> = g.iter().cloned().collect();
                let d = Array2::from_shape_vec(shape, flat).expect("reshape grad");
                add_if_tracked(*a, d, grads);
            }
            Op::ClampMin(a, c) => {
                let av = self.value(*a);
                let mut d = g.clone();
                for (dv, xv) in d.iter_mut().zip(av.iter()) {
                    if *xv < *c {
                        *dv = 0.0;
                    }
                }
                add_if_tracked(*a, d, grads);
            }
            Op::Diag(a) => {
                let av = self.value(*a);
                let mut d = Array2::zeros(av.raw_dim());
                for r in 0..g.nrows() {
                    d[[r, r]] = g[[r, 0]];
                }
                add_if_tracked(*a, d, grads);
            }
        }
    }
}

fn zero_upper(a: &mut Array2<f64>) {
    for r in 0..a.nrows() {
        for c in (r + 1)..a.ncols() {
            a[[r, c]] = 0.0;
        }
    }
}

/// Gradients resulting from one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, zero-filled when the objective does not depend on it.
    pub fn of(&self, v: Var, tape: &Tape) -> Array2<f64> {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.value(v).raw_dim()),
        }
    }
}

/// Non-finite guard used by objective evaluators.
pub fn ensure_finite(t: &Tape, v: Var, what: &str) -> Result<()> {
    if t.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
