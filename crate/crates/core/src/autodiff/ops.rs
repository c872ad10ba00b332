use std::rc::Rc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{factor_lower, gemm, solve_triangular, JitterLadder, Matrix, Side};

/// Primitive applications recorded on the tape. Indices refer to parent nodes.
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Softplus(usize),
    ClampMin(usize, f64),
    Sum(usize),
    RowSums(usize),
    ColSums(usize),
    Broadcast(usize),
    Cholesky(usize),
    TriSolve { l: usize, b: usize, side: Side },
    LogDetChol(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { src: usize, start: usize },
    GatherRows { src: usize, idx: Rc<[usize]> },
    ScatterRows { src: usize, idx: Rc<[usize]> },
    SelectCols { src: usize, idx: Rc<[usize]> },
    Diag(usize),
    TriFromRaw { src: usize, dim: usize },
    BatchTriSolve { l: usize, v: usize, side: Side },
    BatchMatVec { l: usize, v: usize },
    ReshapeRow { src: usize, row: usize },
    SegmentSums { src: usize, width: usize },
    RowsToBlocks { src: usize, dim: usize },
    KernelCross { h: usize, z: usize, log_ls: usize, log_sf2: usize },
    KernelGram { h: usize, log_ls: usize, log_sf2: usize },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Transpose(a) | Exp(a) | Log(a) | Sqrt(a) | Square(a)
            | Softplus(a) | ClampMin(a, _) | Sum(a) | RowSums(a) | ColSums(a) | Broadcast(a)
            | Cholesky(a) | LogDetChol(a) | Diag(a) => vec![*a],
            TriSolve { l, b, .. } => vec![*l, *b],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            SliceRows { src, .. }
            | GatherRows { src, .. }
            | ScatterRows { src, .. }
            | SelectCols { src, .. }
            | TriFromRaw { src, .. }
            | ReshapeRow { src, .. }
            | SegmentSums { src, .. }
            | RowsToBlocks { src, .. } => vec![*src],
            BatchTriSolve { l, v, .. } | BatchMatVec { l, v } => vec![*l, *v],
            KernelCross { h, z, log_ls, log_sf2 } => vec![*h, *z, *log_ls, *log_sf2],
            KernelGram { h, log_ls, log_sf2 } => vec![*h, *log_ls, *log_sf2],
        }
    }

    /// Pushes `∂loss/∂parent` contributions into `sink` given the node's
    /// adjoint `g` and forward value `out`.
    pub(crate) fn backward<'a>(
        &self,
        g: &Matrix,
        out: &Matrix,
        val: &dyn Fn(usize) -> &'a Matrix,
        sink: &mut dyn FnMut(usize, Matrix),
    ) {
        use Op::*;
        match self {
            Leaf | Constant => {}
            Add(a, b) => {
                sink(*a, reduce_to(g, val(*a).shape()));
                sink(*b, reduce_to(g, val(*b).shape()));
            }
            Sub(a, b) => {
                sink(*a, reduce_to(g, val(*a).shape()));
                sink(*b, reduce_to(&g.scale(-1.0), val(*b).shape()));
            }
            Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                sink(*a, reduce_to(&bzip(g, vb, |x, y| x * y), va.shape()));
                sink(*b, reduce_to(&bzip(g, va, |x, y| x * y), vb.shape()));
            }
            Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                sink(*a, reduce_to(&bzip(g, vb, |x, y| x / y), va.shape()));
                // d(a/b)/db = -out / b
                let t = bzip(&g.hadamard(out).expect("same shape"), vb, |x, y| -x / y);
                sink(*b, reduce_to(&t, vb.shape()));
            }
            Scale(a, c) => sink(*a, g.scale(*c)),
            AddScalar(a) => sink(*a, g.clone()),
            MatMul(a, b) => {
                sink(*a, gemm(g, false, val(*b), true));
                sink(*b, gemm(val(*a), true, g, false));
            }
            Transpose(a) => sink(*a, g.transpose()),
            Exp(a) => sink(*a, g.hadamard(out).expect("same shape")),
            Log(a) => sink(*a, g.zip_map(val(*a), |x, y| x / y).expect("same shape")),
            Sqrt(a) => sink(*a, g.zip_map(out, |x, y| 0.5 * x / y).expect("same shape")),
            Square(a) => sink(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y).expect("same shape")),
            Softplus(a) => sink(
                *a,
                g.zip_map(val(*a), |x, y| x * sigmoid(y)).expect("same shape"),
            ),
            ClampMin(a, lo) => sink(
                *a,
                g.zip_map(val(*a), |x, y| if y > *lo { x } else { 0.0 })
                    .expect("same shape"),
            ),
            Sum(a) => {
                let (r, c) = val(*a).shape();
                sink(*a, Matrix::filled(r, c, g.item()));
            }
            RowSums(a) => {
                let (r, c) = val(*a).shape();
                sink(*a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            ColSums(a) => {
                let (r, c) = val(*a).shape();
                sink(*a, Matrix::from_fn(r, c, |_, j| g[(0, j)]));
            }
            Broadcast(a) => sink(*a, reduce_to(g, val(*a).shape())),
            Cholesky(a) => sink(*a, cholesky_adjoint(out, g)),
            TriSolve { l, b, side } => {
                let lv = val(*l);
                let bbar = solve_triangular(lv, g, flip(*side));
                let lbar = match side {
                    Side::Lower => gemm(&bbar, false, out, true),
                    Side::Upper => gemm(out, false, &bbar, true),
                };
                sink(*l, lower_part(&lbar).scale(-1.0));
                sink(*b, bbar);
            }
            LogDetChol(a) => {
                let l = val(*a);
                let n = l.rows();
                let mut d = Matrix::zeros(n, n);
                for i in 0..n {
                    d[(i, i)] = 2.0 * g.item() / l[(i, i)];
                }
                sink(*a, d);
            }
            ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = val(p).rows();
                    sink(p, slice_rows(g, start, r));
                    start += r;
                }
            }
            ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    sink(p, Matrix::from_fn(r, c, |i, j| g[(i, start + j)]));
                    start += c;
                }
            }
            SliceRows { src, start } => {
                let (r, c) = val(*src).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    d.row_mut(start + i).copy_from_slice(g.row(i));
                }
                sink(*src, d);
            }
            GatherRows { src, idx } => {
                let (r, c) = val(*src).shape();
                let mut d = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (dst, &s) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *dst += s;
                    }
                }
                sink(*src, d);
            }
            ScatterRows { src, idx } => sink(*src, g.select_rows(idx)),
            SelectCols { src, idx } => {
                let (r, c) = val(*src).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    for (k, &j) in idx.iter().enumerate() {
                        d[(i, j)] += g[(i, k)];
                    }
                }
                sink(*src, d);
            }
            Diag(a) => {
                let n = val(*a).rows();
                let mut d = Matrix::zeros(n, n);
                for i in 0..n {
                    d[(i, i)] = g[(i, 0)];
                }
                sink(*a, d);
            }
            TriFromRaw { src, dim } => {
                let q = *dim;
                let d = Matrix::from_fn(g.rows(), g.cols(), |n, e| {
                    let (i, j) = (e / q, e % q);
                    if i == j {
                        g[(n, e)] * out[(n, e)]
                    } else if j < i {
                        g[(n, e)]
                    } else {
                        0.0
                    }
                });
                sink(*src, d);
            }
            BatchTriSolve { l, v, side } => {
                let lp = val(*l);
                let q = out.cols();
                let mut lbar = Matrix::zeros(lp.rows(), lp.cols());
                let mut vbar = Matrix::zeros(out.rows(), q);
                for n in 0..out.rows() {
                    let ln = Matrix::from_vec(q, q, lp.row(n).to_vec()).expect("q*q row");
                    let gb = Matrix::column(g.row(n));
                    let bb = solve_triangular(&ln, &gb, flip(*side));
                    let x = out.row(n);
                    for i in 0..q {
                        for j in 0..=i {
                            lbar[(n, i * q + j)] = match side {
                                Side::Lower => -bb[(i, 0)] * x[j],
                                Side::Upper => -x[i] * bb[(j, 0)],
                            };
                        }
                    }
                    vbar.row_mut(n).copy_from_slice(bb.as_slice());
                }
                sink(*l, lbar);
                sink(*v, vbar);
            }
            BatchMatVec { l, v } => {
                let (lp, vv) = (val(*l), val(*v));
                let q = vv.cols();
                let mut lbar = Matrix::zeros(lp.rows(), lp.cols());
                let mut vbar = Matrix::zeros(vv.rows(), q);
                for n in 0..vv.rows() {
                    let (gr, vr, lr) = (g.row(n), vv.row(n), lp.row(n));
                    for i in 0..q {
                        for j in 0..q {
                            lbar[(n, i * q + j)] = gr[i] * vr[j];
                            vbar[(n, j)] += lr[i * q + j] * gr[i];
                        }
                    }
                }
                sink(*l, lbar);
                sink(*v, vbar);
            }
            ReshapeRow { src, row } => {
                let (r, c) = val(*src).shape();
                let mut d = Matrix::zeros(r, c);
                d.row_mut(*row).copy_from_slice(g.as_slice());
                sink(*src, d);
            }
            SegmentSums { src, width } => {
                let (r, c) = val(*src).shape();
                sink(*src, Matrix::from_fn(r, c, |i, j| g[(i, j / width)]));
            }
            RowsToBlocks { src, dim } => {
                let (r, c) = val(*src).shape();
                sink(*src, Matrix::from_fn(r, c, |b, e| g[(e / dim, b * dim + e % dim)]));
            }
            KernelCross {
                h,
                z,
                log_ls,
                log_sf2,
            } => {
                let (hv, zv) = (val(*h), val(*z));
                let inv_l2 = inv_sq_lengthscales(val(*log_ls));
                let p = g.hadamard(out).expect("same shape");
                let q = hv.cols();
                let mut hbar = Matrix::zeros(hv.rows(), q);
                let mut zbar = Matrix::zeros(zv.rows(), q);
                let mut lsbar = Matrix::zeros(1, q);
                for i in 0..hv.rows() {
                    for j in 0..zv.rows() {
                        let pij = p[(i, j)];
                        if pij == 0.0 {
                            continue;
                        }
                        for k in 0..q {
                            let diff = hv[(i, k)] - zv[(j, k)];
                            let t = pij * diff * inv_l2[k];
                            hbar[(i, k)] -= t;
                            zbar[(j, k)] += t;
                            lsbar[(0, k)] += t * diff;
                        }
                    }
                }
                sink(*h, hbar);
                sink(*z, zbar);
                sink(*log_ls, lsbar);
                sink(*log_sf2, Matrix::scalar(p.sum()));
            }
            KernelGram { h, log_ls, log_sf2 } => {
                let hv = val(*h);
                let inv_l2 = inv_sq_lengthscales(val(*log_ls));
                let p = g.hadamard(out).expect("same shape");
                let (n, q) = hv.shape();
                let mut hbar = Matrix::zeros(n, q);
                let mut lsbar = Matrix::zeros(1, q);
                for i in 0..n {
                    for j in 0..n {
                        let pij = p[(i, j)];
                        if i == j || pij == 0.0 {
                            continue;
                        }
                        for k in 0..q {
                            let diff = hv[(i, k)] - hv[(j, k)];
                            let t = pij * diff * inv_l2[k];
                            hbar[(i, k)] -= t;
                            hbar[(j, k)] += t;
                            lsbar[(0, k)] += t * diff;
                        }
                    }
                }
                sink(*h, hbar);
                sink(*log_ls, lsbar);
                sink(*log_sf2, Matrix::scalar(p.sum()));
            }
        }
    }
}

fn flip(side: Side) -> Side {
    match side {
        Side::Lower => Side::Upper,
        Side::Upper => Side::Lower,
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn inv_sq_lengthscales(log_ls: &Matrix) -> Vec<f64> {
    log_ls.as_slice().iter().map(|l| (-2.0 * l).exp()).collect()
}

fn lower_part(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| if j <= i { m[(i, j)] } else { 0.0 })
}

fn slice_rows(m: &Matrix, start: usize, len: usize) -> Matrix {
    let c = m.cols();
    Matrix::from_vec(len, c, m.as_slice()[start * c..(start + len) * c].to_vec()).expect("slice")
}

/// Adjoint of `A ↦ chol(sym(A))` given `L` and `L̄`:
/// `Ā = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)` with `Φ` taking the lower triangle and halving
/// the diagonal.
fn cholesky_adjoint(l: &Matrix, lbar: &Matrix) -> Matrix {
    let n = l.rows();
    let mut p = gemm(l, true, &lower_part(lbar), false);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                p[(i, j)] = 0.0;
            } else if i == j {
                p[(i, j)] *= 0.5;
            }
        }
    }
    // L⁻ᵀ P L⁻¹ = L⁻ᵀ (L⁻ᵀ Pᵀ)ᵀ
    let t = solve_triangular(l, &p.transpose(), Side::Upper);
    let s = solve_triangular(l, &t.transpose(), Side::Upper);
    Matrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]))
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::shape(
            op,
            format!("broadcast-compatible with {}x{}", a.0, a.1),
            format!("{}x{}", b.0, b.1),
        )),
    }
}

/// Elementwise `f(a, b)` where `b` may be broadcast up to `a`'s shape.
fn bzip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        return a.zip_map(b, f).expect("same shape");
    }
    let (br, bc) = b.shape();
    Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        f(a[(i, j)], b[(if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j })])
    })
}

fn expand(a: &Matrix, shape: (usize, usize)) -> Matrix {
    if a.shape() == shape {
        return a.clone();
    }
    let (ar, ac) = a.shape();
    Matrix::from_fn(shape.0, shape.1, |i, j| {
        a[(if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j })]
    })
}

fn reduce_to(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (ti, tj) = (if shape.0 == 1 { 0 } else { i }, if shape.1 == 1 { 0 } else { j });
            out[(ti, tj)] += g[(i, j)];
        }
    }
    out
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(
        std::ptr::eq(a.tape, b.tape),
        "vars from different tapes cannot be combined"
    );
}

/// Squared-exponential ARD kernel between the rows of `h` and `z`.
pub(crate) fn se_ard_cross(h: &Matrix, z: &Matrix, log_ls: &Matrix, log_sf2: f64) -> Matrix {
    let inv_l2 = inv_sq_lengthscales(log_ls);
    let sf2 = log_sf2.exp();
    let q = h.cols();
    Matrix::from_fn(h.rows(), z.rows(), |i, j| {
        let (hi, zj) = (h.row(i), z.row(j));
        let mut d2 = 0.0;
        for k in 0..q {
            let d = hi[k] - zj[k];
            d2 += d * d * inv_l2[k];
        }
        sf2 * (-0.5 * d2).exp()
    })
}

/// Gram matrix of `h`; exactly symmetric with diagonal `σ_f²`.
pub(crate) fn se_ard_gram(h: &Matrix, log_ls: &Matrix, log_sf2: f64) -> Matrix {
    let inv_l2 = inv_sq_lengthscales(log_ls);
    let sf2 = log_sf2.exp();
    let (n, q) = h.shape();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = sf2;
        for j in 0..i {
            let (hi, hj) = (h.row(i), h.row(j));
            let mut d2 = 0.0;
            for t in 0..q {
                let d = hi[t] - hj[t];
                d2 += d * d * inv_l2[t];
            }
            let v = sf2 * (-0.5 * d2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

impl<'t> Var<'t> {
    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.record(op, v)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let v = if a.shape() == b.shape() {
            a.zip_map(&b, f)?
        } else {
            let (ea, eb) = (expand(&a, shape), expand(&b, shape));
            ea.zip_map(&eb, f)?
        };
        Ok(self.tape.record(op(self.idx, other.idx), v))
    }

    /// Elementwise sum; either operand may be a broadcastable row, column or scalar.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, c), |x| c * x)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.idx), |x| x + c)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.record(Op::MatMul(self.idx, other.idx), v))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.record(Op::Transpose(self.idx), v)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.idx), f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.idx), f64::sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.idx), |x| x * x)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.idx), softplus)
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.unary(Op::ClampMin(self.idx, lo), |x| x.max(lo))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Matrix::scalar(self.value().sum());
        self.tape.record(Op::Sum(self.idx), v)
    }

    pub fn row_sums(self) -> Var<'t> {
        let a = self.value();
        let v = Matrix::from_fn(a.rows(), 1, |i, _| a.row(i).iter().sum());
        self.tape.record(Op::RowSums(self.idx), v)
    }

    pub fn col_sums(self) -> Var<'t> {
        let a = self.value();
        let mut v = Matrix::zeros(1, a.cols());
        for i in 0..a.rows() {
            for (acc, x) in v.as_mut_slice().iter_mut().zip(a.row(i)) {
                *acc += x;
            }
        }
        self.tape.record(Op::ColSums(self.idx), v)
    }

    pub fn broadcast_to(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = broadcast_shape("broadcast", (rows, cols), a.shape())?;
        if shape != (rows, cols) {
            return Err(Error::shape(
                "broadcast",
                format!("{rows}x{cols}"),
                format!("{}x{}", a.rows(), a.cols()),
            ));
        }
        let v = expand(&a, shape);
        Ok(self.tape.record(Op::Broadcast(self.idx), v))
    }

    /// Lower Cholesky factor of the symmetric part of `self`, escalating
    /// along `ladder` when needed. Jitter is treated as a constant.
    pub fn cholesky(self, ladder: &JitterLadder) -> Result<Var<'t>> {
        let a = self.value();
        if !a.is_square() {
            return Err(Error::shape(
                "cholesky",
                "square",
                format!("{}x{}", a.rows(), a.cols()),
            ));
        }
        let n = a.rows();
        let sym = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
        let mean_diag = if n == 0 { 0.0 } else { sym.diag().iter().sum::<f64>() / n as f64 };
        let mut last = 0.0;
        for &rel in &ladder.relative {
            let jitter = rel * mean_diag.abs();
            last = jitter;
            if let Some(l) = factor_lower(&sym, jitter) {
                return Ok(self.tape.record(Op::Cholesky(self.idx), l));
            }
        }
        Err(Error::NotPositiveDefinite { max_jitter: last })
    }

    /// With `self` a lower-triangular factor `L`: `L⁻¹ b` or `L⁻ᵀ b`.
    pub fn tri_solve(self, b: Var<'t>, side: Side) -> Result<Var<'t>> {
        same_tape(&self, &b);
        let (l, bv) = (self.value(), b.value());
        if !l.is_square() || l.rows() != bv.rows() {
            return Err(Error::shape(
                "tri_solve",
                format!("{} rows", l.rows()),
                format!("{}x{}", bv.rows(), bv.cols()),
            ));
        }
        let x = solve_triangular(&l, &bv, side);
        Ok(self.tape.record(
            Op::TriSolve {
                l: self.idx,
                b: b.idx,
                side,
            },
            x,
        ))
    }

    /// `2 Σ log Lᵢᵢ` for a Cholesky factor `L`.
    pub fn logdet_chol(self) -> Result<Var<'t>> {
        let l = self.value();
        if !l.is_square() {
            return Err(Error::shape("logdet_chol", "square", format!("{:?}", l.shape())));
        }
        let v = 2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>();
        Ok(self.tape.record(Op::LogDetChol(self.idx), Matrix::scalar(v)))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::InvalidCount(0))?;
        let c = first.value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            same_tape(first, p);
            let v = p.value();
            if v.cols() != c {
                return Err(Error::shape("concat_rows", format!("{c} cols"), format!("{}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let v = Matrix::from_vec(rows, c, data)?;
        Ok(first
            .tape
            .record(Op::ConcatRows(parts.iter().map(|p| p.idx).collect()), v))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::InvalidCount(0))?;
        let r = first.value().rows();
        let vals: Vec<Rc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        if let Some(bad) = vals.iter().find(|v| v.rows() != r) {
            return Err(Error::shape("concat_cols", format!("{r} rows"), format!("{}", bad.rows())));
        }
        let c: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let mut off = 0;
            for v in &vals {
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
                off += v.cols();
            }
        }
        Ok(first
            .tape
            .record(Op::ConcatCols(parts.iter().map(|p| p.idx).collect()), out))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if start + len > a.rows() {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: a.rows(),
            });
        }
        let v = slice_rows(&a, start, len);
        Ok(self.tape.record(Op::SliceRows { src: self.idx, start }, v))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= a.rows()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: a.rows(),
            });
        }
        let v = a.select_rows(idx);
        Ok(self.tape.record(
            Op::GatherRows {
                src: self.idx,
                idx: idx.into(),
            },
            v,
        ))
    }

    /// Places row `k` of `self` at row `idx[k]` of a `total`-row zero matrix.
    pub fn scatter_rows(self, idx: &[usize], total: usize) -> Result<Var<'t>> {
        let a = self.value();
        if idx.len() != a.rows() {
            return Err(Error::shape("scatter_rows", format!("{} rows", idx.len()), format!("{}", a.rows())));
        }
        let mut v = Matrix::zeros(total, a.cols());
        for (k, &i) in idx.iter().enumerate() {
            if i >= total {
                return Err(Error::IndexOutOfRange { index: i, len: total });
            }
            v.row_mut(i).copy_from_slice(a.row(k));
        }
        Ok(self.tape.record(
            Op::ScatterRows {
                src: self.idx,
                idx: idx.into(),
            },
            v,
        ))
    }

    pub fn select_cols(self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&bad) = idx.iter().find(|&&j| j >= a.cols()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: a.cols(),
            });
        }
        let v = Matrix::from_fn(a.rows(), idx.len(), |i, k| a[(i, idx[k])]);
        Ok(self.tape.record(
            Op::SelectCols {
                src: self.idx,
                idx: idx.into(),
            },
            v,
        ))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(self) -> Result<Var<'t>> {
        let a = self.value();
        if !a.is_square() {
            return Err(Error::shape("diag", "square", format!("{:?}", a.shape())));
        }
        let v = Matrix::column(&a.diag());
        Ok(self.tape.record(Op::Diag(self.idx), v))
    }

    /// Each row holds a packed `dim x dim` raw factor; returns packed lower
    /// factors with strictly-lower entries copied and the diagonal
    /// exponentiated. Upper entries are zero.
    pub fn tri_from_raw(self, dim: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.cols() != dim * dim {
            return Err(Error::shape("tri_from_raw", format!("{} cols", dim * dim), format!("{}", a.cols())));
        }
        let v = Matrix::from_fn(a.rows(), a.cols(), |n, e| {
            let (i, j) = (e / dim, e % dim);
            if i == j {
                a[(n, e)].exp()
            } else if j < i {
                a[(n, e)]
            } else {
                0.0
            }
        });
        Ok(self.tape.record(Op::TriFromRaw { src: self.idx, dim }, v))
    }

    /// Row-wise triangular solve: row `n` of the result is `L_n⁻¹ v_n`
    /// (or `L_n⁻ᵀ v_n`), with `L_n` the packed lower factor in row `n` of `self`.
    pub fn batch_tri_solve(self, v: Var<'t>, side: Side) -> Result<Var<'t>> {
        same_tape(&self, &v);
        let (lp, vv) = (self.value(), v.value());
        let q = vv.cols();
        if lp.rows() != vv.rows() || lp.cols() != q * q {
            return Err(Error::shape(
                "batch_tri_solve",
                format!("{}x{}", vv.rows(), q * q),
                format!("{}x{}", lp.rows(), lp.cols()),
            ));
        }
        let mut out = Matrix::zeros(vv.rows(), q);
        for n in 0..vv.rows() {
            let ln = Matrix::from_vec(q, q, lp.row(n).to_vec())?;
            let x = solve_triangular(&ln, &Matrix::column(vv.row(n)), side);
            out.row_mut(n).copy_from_slice(x.as_slice());
        }
        Ok(self.tape.record(
            Op::BatchTriSolve {
                l: self.idx,
                v: v.idx,
                side,
            },
            out,
        ))
    }

    /// Row-wise matrix-vector product `L_n v_n` with packed `L_n`.
    pub fn batch_matvec(self, v: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &v);
        let (lp, vv) = (self.value(), v.value());
        let q = vv.cols();
        if lp.rows() != vv.rows() || lp.cols() != q * q {
            return Err(Error::shape(
                "batch_matvec",
                format!("{}x{}", vv.rows(), q * q),
                format!("{}x{}", lp.rows(), lp.cols()),
            ));
        }
        let mut out = Matrix::zeros(vv.rows(), q);
        for n in 0..vv.rows() {
            let (lr, vr) = (lp.row(n), vv.row(n));
            for i in 0..q {
                out[(n, i)] = (0..q).map(|j| lr[i * q + j] * vr[j]).sum();
            }
        }
        Ok(self.tape.record(
            Op::BatchMatVec {
                l: self.idx,
                v: v.idx,
            },
            out,
        ))
    }

    /// Row `row` of `self` viewed as an `r x c` matrix.
    pub fn reshape_row(self, row: usize, r: usize, c: usize) -> Result<Var<'t>> {
        let a = self.value();
        if row >= a.rows() {
            return Err(Error::IndexOutOfRange { index: row, len: a.rows() });
        }
        if a.cols() != r * c {
            return Err(Error::shape("reshape_row", format!("{} cols", r * c), format!("{}", a.cols())));
        }
        let v = Matrix::from_vec(r, c, a.row(row).to_vec())?;
        Ok(self.tape.record(Op::ReshapeRow { src: self.idx, row }, v))
    }

    /// Sums over consecutive column segments of length `width`:
    /// an `r x (k·width)` input gives `r x k`.
    pub fn segment_sums(self, width: usize) -> Result<Var<'t>> {
        let a = self.value();
        if width == 0 || a.cols() % width != 0 {
            return Err(Error::shape(
                "segment_sums",
                format!("columns divisible by {width}"),
                format!("{}", a.cols()),
            ));
        }
        let k = a.cols() / width;
        let v = Matrix::from_fn(a.rows(), k, |i, s| a.row(i)[s * width..(s + 1) * width].iter().sum());
        Ok(self.tape.record(Op::SegmentSums { src: self.idx, width }, v))
    }

    /// Rows of `self`, each a packed `dim x dim` matrix, laid side by side:
    /// an `r x dim²` input gives `dim x (r·dim)`.
    pub fn rows_to_blocks(self, dim: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.cols() != dim * dim {
            return Err(Error::shape("rows_to_blocks", format!("{} cols", dim * dim), format!("{}", a.cols())));
        }
        let r = a.rows();
        let v = Matrix::from_fn(dim, r * dim, |i, j| a[(j / dim, i * dim + j % dim)]);
        Ok(self.tape.record(Op::RowsToBlocks { src: self.idx, dim }, v))
    }

    /// SE-ARD cross-covariance between rows of `self` (n x Q) and `z` (m x Q).
    pub fn kernel_cross(self, z: Var<'t>, log_ls: Var<'t>, log_sf2: Var<'t>) -> Result<Var<'t>> {
        let (h, zv, ls, sf) = (self.value(), z.value(), log_ls.value(), log_sf2.value());
        let q = h.cols();
        if zv.cols() != q || ls.shape() != (1, q) || sf.shape() != (1, 1) {
            return Err(Error::shape(
                "kernel_cross",
                format!("Q={q} columns, 1x{q} lengthscales, 1x1 variance"),
                format!("z {:?}, ls {:?}, sf2 {:?}", zv.shape(), ls.shape(), sf.shape()),
            ));
        }
        let v = se_ard_cross(&h, &zv, &ls, sf.item());
        Ok(self.tape.record(
            Op::KernelCross {
                h: self.idx,
                z: z.idx,
                log_ls: log_ls.idx,
                log_sf2: log_sf2.idx,
            },
            v,
        ))
    }

    /// SE-ARD Gram matrix of the rows of `self`.
    pub fn kernel_gram(self, log_ls: Var<'t>, log_sf2: Var<'t>) -> Result<Var<'t>> {
        let (h, ls, sf) = (self.value(), log_ls.value(), log_sf2.value());
        let q = h.cols();
        if ls.shape() != (1, q) || sf.shape() != (1, 1) {
            return Err(Error::shape(
                "kernel_gram",
                format!("1x{q} lengthscales, 1x1 variance"),
                format!("ls {:?}, sf2 {:?}", ls.shape(), sf.shape()),
            ));
        }
        let v = se_ard_gram(&h, &ls, sf.item());
        Ok(self.tape.record(
            Op::KernelGram {
                h: self.idx,
                log_ls: log_ls.idx,
                log_sf2: log_sf2.idx,
            },
            v,
        ))
    }
}

impl Tape {
    /// Identity matrix constant.
    pub fn eye(&self, n: usize) -> Var<'_> {
        self.constant(Matrix::identity(n))
    }
}
