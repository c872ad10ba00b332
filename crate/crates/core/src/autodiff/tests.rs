use super::*;
use crate::linalg::{chol_solve, cholesky, JitterLadder, RngStream, Side};

fn rand_m(rng: &mut RngStream, r: usize, c: usize) -> Matrix {
    rng.normal_matrix(r, c)
}

fn spd(rng: &mut RngStream, n: usize) -> Matrix {
    let b = rand_m(rng, n, n);
    let mut a = b.matmul(&b.transpose()).unwrap();
    a.add_diag(n as f64);
    a
}

fn check<F>(f: F, point: &[Matrix])
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let rep = grad_check(f, point, 1e-5, 1e-5).unwrap();
    assert!(rep.pass, "gradcheck failed: {rep:?}");
}

#[test]
fn forward_identities() {
    let mut rng = RngStream::new(1);
    let tape = Tape::new();
    let x = tape.var(rand_m(&mut rng, 3, 4));
    let zero = tape.constant(Matrix::zeros(3, 4));
    assert_eq!(*x.add(zero).unwrap().value(), *x.value());
    let i3 = tape.eye(3);
    assert!(i3.matmul(x).unwrap().value().sub(&x.value()).unwrap().max_abs() == 0.0);
    let pos = tape.var(rand_m(&mut rng, 3, 3).map(|v| v.abs() + 0.1));
    let rt = pos.ln().exp();
    assert!(rt.value().sub(&pos.value()).unwrap().max_abs() < 1e-12);
}

#[test]
fn simple_backward_cases() {
    let mut rng = RngStream::new(2);
    let tape = Tape::new();
    let x = tape.var(rand_m(&mut rng, 2, 3));
    let g = tape.backward(x.sum()).unwrap();
    assert_eq!(g.wrt(x), Matrix::filled(2, 3, 1.0));

    let tape = Tape::new();
    let xv = rand_m(&mut rng, 3, 2);
    let x = tape.var(xv.clone());
    let loss = x.square().sum().scale(0.5);
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(x).sub(&xv).unwrap().max_abs() < 1e-15);
}

#[test]
fn logdet_shift_gradient_is_trace_inverse() {
    let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
    let f = |x: f64| {
        let mut m = a.clone();
        m.add_diag(x);
        crate::linalg::logdet(&cholesky(&m, &JitterLadder::exact()).unwrap())
    };
    let h = 1e-6;
    let fd = (f(h) - f(-h)) / (2.0 * h);
    assert!((fd - 1.5).abs() < 1e-8);

    let tape = Tape::new();
    let x = tape.var(Matrix::scalar(0.0));
    let ac = tape.constant(a.clone());
    let shifted = ac.add(tape.eye(2).mul(x).unwrap()).unwrap();
    let ld = shifted
        .cholesky(&JitterLadder::exact())
        .unwrap()
        .logdet_chol()
        .unwrap();
    let g = tape.backward(ld).unwrap().wrt(x).item();
    assert!((g - 1.5).abs() < 1e-12);
    assert!((g - fd).abs() < 1e-8);
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.var(Matrix::zeros(2, 2));
    assert!(matches!(
        tape.backward(x),
        Err(Error::NonScalarLoss { rows: 2, cols: 2 })
    ));
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let mut rng = RngStream::new(3);
    let a = rand_m(&mut rng, 3, 3);
    let b = rand_m(&mut rng, 3, 3);
    let pos = a.map(|v| v.abs() + 0.5);
    let w = rand_m(&mut rng, 3, 3);
    // Weighting by a fixed random matrix makes every output entry matter.
    macro_rules! wsum {
        ($t:expr, $y:expr) => {
            $y.mul($t.constant(w.clone()))?.sum()
        };
    }
    check(|t, v| Ok(wsum!(t, v[0].add(v[1])?)), &[a.clone(), b.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].sub(v[1])?)), &[a.clone(), b.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].mul(v[1])?)), &[a.clone(), b.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].div(v[1])?)), &[a.clone(), pos.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].matmul(v[1])?)), &[a.clone(), b.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].t())), &[a.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].exp())), &[a.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].ln())), &[pos.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].sqrt())), &[pos.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].square())), &[a.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].softplus())), &[a.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].scale(-2.5))), &[a.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].add_scalar(0.7))), &[a.clone()]);
    check(|t, v| Ok(wsum!(t, v[0].clamp_min(-10.0))), &[a.clone()]);
    check(|_, v| Ok(v[0].sum()), &[a.clone()]);
    check(
        |t, v| Ok(v[0].row_sums().mul(t.constant(Matrix::column(&[1.0, -2.0, 0.5])))?.sum()),
        &[a.clone()],
    );
    check(
        |t, v| Ok(v[0].col_sums().mul(t.constant(Matrix::row_vector(&[1.0, -2.0, 0.5])))?.sum()),
        &[a.clone()],
    );
}

#[test]
fn broadcasting_primitives_match_finite_differences() {
    let mut rng = RngStream::new(4);
    let a = rand_m(&mut rng, 3, 3);
    let row = rand_m(&mut rng, 1, 3);
    let col = rand_m(&mut rng, 3, 1).map(|v| v.abs() + 0.5);
    let s = Matrix::scalar(0.8);
    let w = rand_m(&mut rng, 3, 3);
    check(
        |t, v| v[0].mul(v[1])?.mul(t.constant(w.clone())).map(|y| y.sum()),
        &[a.clone(), row.clone()],
    );
    check(
        |t, v| v[1].mul(v[0])?.mul(t.constant(w.clone())).map(|y| y.sum()),
        &[a.clone(), row.clone()],
    );
    check(
        |t, v| v[0].div(v[1])?.mul(t.constant(w.clone())).map(|y| y.sum()),
        &[a.clone(), col.clone()],
    );
    check(
        |t, v| v[0].sub(v[1])?.add(v[2])?.mul(t.constant(w.clone())).map(|y| y.sum()),
        &[a.clone(), s.clone(), row.clone()],
    );
    check(
        |t, v| v[0].broadcast_to(3, 3)?.mul(t.constant(w.clone())).map(|y| y.sum()),
        &[col.clone()],
    );
}

#[test]
fn factorization_primitives_match_finite_differences() {
    let mut rng = RngStream::new(5);
    let a = spd(&mut rng, 3);
    let b = rand_m(&mut rng, 3, 2);
    let w = rand_m(&mut rng, 3, 3);
    let ladder = JitterLadder::exact();
    check(
        |t, v| Ok(v[0].cholesky(&ladder)?.mul(t.constant(w.clone()))?.sum()),
        &[a.clone()],
    );
    check(|_, v| v[0].cholesky(&ladder)?.logdet_chol(), &[a.clone()]);
    for side in [Side::Lower, Side::Upper] {
        check(
            |_, v| {
                let l = v[0].cholesky(&ladder)?;
                Ok(l.tri_solve(v[1], side)?.square().sum())
            },
            &[a.clone(), b.clone()],
        );
    }
    check(|_, v| Ok(v[0].diag()?.square().sum()), &[a.clone()]);
}

#[test]
fn structural_primitives_match_finite_differences() {
    let mut rng = RngStream::new(6);
    let a = rand_m(&mut rng, 3, 3);
    let b = rand_m(&mut rng, 2, 3);
    let c = rand_m(&mut rng, 3, 2);
    check(
        |_, v| Ok(Var::concat_rows(&[v[0], v[1]])?.square().sum()),
        &[a.clone(), b.clone()],
    );
    check(
        |_, v| Ok(Var::concat_cols(&[v[0], v[1]])?.exp().sum()),
        &[a.clone(), c.clone()],
    );
    check(|_, v| Ok(v[0].slice_rows(1, 2)?.exp().sum()), &[a.clone()]);
    check(|_, v| Ok(v[0].gather_rows(&[2, 0, 2])?.exp().sum()), &[a.clone()]);
    check(|_, v| Ok(v[0].scatter_rows(&[4, 1], 5)?.exp().sum()), &[b.clone()]);
    check(|_, v| Ok(v[0].select_cols(&[2, 2, 0])?.exp().sum()), &[a.clone()]);
    check(|_, v| Ok(v[0].reshape_row(1, 3, 3)?.exp().sum()), &[rand_m(&mut rng, 2, 9)]);
    check(|_, v| Ok(v[0].segment_sums(3)?.square().sum()), &[rand_m(&mut rng, 2, 6)]);
    let w = rand_m(&mut rng, 2, 4);
    check(
        |t, v| Ok(v[0].rows_to_blocks(2)?.mul(t.constant(w.clone()))?.exp().sum()),
        &[rand_m(&mut rng, 2, 4)],
    );
}

#[test]
fn block_layout_forward() {
    let tape = Tape::new();
    let a = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]).unwrap());
    assert_eq!(a.segment_sums(2).unwrap().value().as_slice(), &[3.0, 7.0, 11.0, 15.0]);
    let b = a.rows_to_blocks(2).unwrap().value();
    assert_eq!(b.shape(), (2, 4));
    assert_eq!(b.as_slice(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
}

#[test]
fn packed_triangular_primitives_match_finite_differences() {
    let mut rng = RngStream::new(7);
    let raw = rand_m(&mut rng, 3, 9).scale(0.5);
    let v = rand_m(&mut rng, 3, 3);
    check(|_, x| Ok(x[0].tri_from_raw(3)?.square().sum()), &[raw.clone()]);
    for side in [Side::Lower, Side::Upper] {
        check(
            |_, x| {
                let l = x[0].tri_from_raw(3)?;
                Ok(l.batch_tri_solve(x[1], side)?.square().sum())
            },
            &[raw.clone(), v.clone()],
        );
    }
    check(
        |_, x| {
            let l = x[0].tri_from_raw(3)?;
            Ok(l.batch_matvec(x[1])?.exp().sum())
        },
        &[raw.clone(), v.clone()],
    );
}

#[test]
fn kernel_primitives_match_finite_differences() {
    let mut rng = RngStream::new(8);
    let h = rand_m(&mut rng, 3, 3);
    let z = rand_m(&mut rng, 3, 3);
    let ls = rand_m(&mut rng, 1, 3).scale(0.3);
    let sf = Matrix::scalar(0.2);
    let w = rand_m(&mut rng, 3, 3);
    check(
        |t, x| Ok(x[0].kernel_cross(x[1], x[2], x[3])?.mul(t.constant(w.clone()))?.sum()),
        &[h.clone(), z.clone(), ls.clone(), sf.clone()],
    );
    check(
        |t, x| Ok(x[0].kernel_gram(x[1], x[2])?.mul(t.constant(w.clone()))?.sum()),
        &[h.clone(), ls.clone(), sf.clone()],
    );
}

#[test]
fn logdet_gradient_is_inverse_on_spd() {
    let mut rng = RngStream::new(9);
    let a = spd(&mut rng, 4);
    let tape = Tape::new();
    let x = tape.var(a.clone());
    let ld = x.cholesky(&JitterLadder::exact()).unwrap().logdet_chol().unwrap();
    let g = tape.backward(ld).unwrap().wrt(x);
    let inv = chol_solve(
        &cholesky(&a, &JitterLadder::exact()).unwrap(),
        &Matrix::identity(4),
    )
    .unwrap();
    let inv_sym = Matrix::from_fn(4, 4, |i, j| 0.5 * (inv[(i, j)] + inv[(j, i)]));
    assert!(g.sub(&inv_sym).unwrap().max_abs() < 1e-12);
}

#[test]
fn mvn_logpdf_gradient_wrt_mean() {
    let mut rng = RngStream::new(10);
    let cov = spd(&mut rng, 3);
    let x = rand_m(&mut rng, 3, 1);
    let mean = rand_m(&mut rng, 3, 1);
    let rep = grad_check(
        |t, v| {
            let l = t.constant(cov.clone()).cholesky(&JitterLadder::exact())?;
            let r = t.constant(x.clone()).sub(v[0])?;
            let maha = l.tri_solve(r, Side::Lower)?.square().sum();
            let c = 3.0 * (2.0 * std::f64::consts::PI).ln();
            Ok(maha.add(l.logdet_chol()?)?.add_scalar(c).scale(-0.5))
        },
        &[mean],
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn sign_flipped_adjoint_fails_the_check() {
    let mut rng = RngStream::new(11);
    let x = rand_m(&mut rng, 3, 3);
    fn f<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
        Ok(v[0].exp().sum())
    }
    let wrong = x.map(|v| -v.exp());
    let rep = grad_check_against(&f, &[x.clone()], &[wrong], 1e-5, 1e-6).unwrap();
    assert!(!rep.pass);
    let ok = grad_check(|_, v| Ok(v[0].square().sum()), &[x], 1e-5, 1e-6).unwrap();
    assert!(ok.pass);
}

#[test]
fn replay_is_bitwise_deterministic() {
    let mut rng = RngStream::new(12);
    let a = spd(&mut rng, 4);
    let b = rand_m(&mut rng, 4, 2);
    let run = || {
        let tape = Tape::new();
        let av = tape.var(a.clone());
        let bv = tape.var(b.clone());
        let l = av.cholesky(&JitterLadder::default()).unwrap();
        let loss = l
            .tri_solve(bv, Side::Lower)
            .unwrap()
            .square()
            .sum()
            .add(l.logdet_chol().unwrap())
            .unwrap();
        let g = tape.backward(loss).unwrap();
        (loss.item().to_bits(), g.wrt(av), g.wrt(bv))
    };
    let (l1, ga1, gb1) = run();
    let (l2, ga2, gb2) = run();
    assert_eq!(l1, l2);
    assert_eq!(ga1, ga2);
    assert_eq!(gb1, gb2);
}

#[test]
fn detach_blocks_gradient() {
    let tape = Tape::new();
    let x = tape.var(Matrix::scalar(2.0));
    let y = x.square().detach().mul(x).unwrap();
    let g = tape.backward(y).unwrap().wrt(x).item();
    assert_eq!(g, 4.0);
}

#[test]
fn constants_receive_no_adjoint() {
    let tape = Tape::new();
    let c = tape.constant(Matrix::scalar(3.0));
    let x = tape.var(Matrix::scalar(2.0));
    let g = tape.backward(c.mul(x).unwrap()).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.wrt(x).item(), 3.0);
}
