//! Dense linear-algebra helpers shared by the conic solver and model layer:
//! blocked Cholesky (nalgebra's is unblocked and too slow for our Schur
//! complements), Lyapunov/Riccati solves for controller seeding.

use nalgebra::{DMatrix, DVector};

const CHOL_BLOCK: usize = 48;

/// In-place lower-triangular Cholesky, blocked so the trailing update runs
/// through matrixmultiply's GEMM. Returns `Err` if a pivot drops below
/// `min_pivot`.
pub fn cholesky_in_place(a: &mut DMatrix<f64>, min_pivot: f64) -> Result<(), usize> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut k = 0;
    while k < n {
        let nb = CHOL_BLOCK.min(n - k);
        // Factor diagonal block (unblocked).
        for j in k..k + nb {
            let mut d = a[(j, j)];
            for p in k..j {
                d -= a[(j, p)] * a[(j, p)];
            }
            if d <= min_pivot {
                return Err(j);
            }
            let l = d.sqrt();
            a[(j, j)] = l;
            for i in j + 1..k + nb {
                let mut s = a[(i, j)];
                for p in k..j {
                    s -= a[(i, p)] * a[(j, p)];
                }
                a[(i, j)] = s / l;
            }
        }
        let rest = k + nb;
        if rest < n {
            // Panel solve: A[rest.., k..k+nb] <- A[rest.., k..] * L_kk^-T
            for j in k..k + nb {
                let ljj = a[(j, j)];
                for i in rest..n {
                    let mut s = a[(i, j)];
                    for p in k..j {
                        s -= a[(i, p)] * a[(j, p)];
                    }
                    a[(i, j)] = s / ljj;
                }
            }
            // Trailing update: A22 -= L21 * L21^T (GEMM).
            let l21 = a.view((rest, k), (n - rest, nb)).clone_owned();
            let update = &l21 * l21.transpose();
            let mut a22 = a.view_mut((rest, rest), (n - rest, n - rest));
            a22 -= update;
        }
        k += nb;
    }
    // Zero the strict upper triangle so the factor can be used directly.
    for j in 1..n {
        for i in 0..j {
            a[(i, j)] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L L' X = B` in place given the lower factor from
/// [`cholesky_in_place`]; block-partitioned so the off-diagonal updates run
/// through GEMM.
pub fn cholesky_solve_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    if n == 0 || b.ncols() == 0 {
        return;
    }
    let nb = CHOL_BLOCK;
    // Forward: L Y = B.
    let mut k = 0;
    while k < n {
        let len = nb.min(n - k);
        for j in k..k + len {
            let inv = 1.0 / l[(j, j)];
            for col in 0..b.ncols() {
                b[(j, col)] *= inv;
            }
            for i in j + 1..k + len {
                let lij = l[(i, j)];
                if lij != 0.0 {
                    for col in 0..b.ncols() {
                        b[(i, col)] -= lij * b[(j, col)];
                    }
                }
            }
        }
        if k + len < n {
            let panel = l.view((k + len, k), (n - k - len, len));
            let top = b.view((k, 0), (len, b.ncols())).clone_owned();
            let update = panel * top;
            let mut rest = b.view_mut((k + len, 0), (n - k - len, b.ncols()));
            rest -= update;
        }
        k += len;
    }
    // Backward: L' X = Y.
    let mut k_end = n;
    while k_end > 0 {
        let len = nb.min(k_end);
        let k0 = k_end - len;
        for j in (k0..k_end).rev() {
            let inv = 1.0 / l[(j, j)];
            for col in 0..b.ncols() {
                b[(j, col)] *= inv;
            }
            for i in (k0..j).rev() {
                let lji = l[(j, i)];
                if lji != 0.0 {
                    for col in 0..b.ncols() {
                        b[(i, col)] -= lji * b[(j, col)];
                    }
                }
            }
        }
        if k0 > 0 {
            let panel = l.view((k0, 0), (len, k0)).transpose();
            let bot = b.view((k0, 0), (len, b.ncols())).clone_owned();
            let update = panel * bot;
            let mut rest = b.view_mut((0, 0), (k0, b.ncols()));
            rest -= update;
        }
        k_end = k0;
    }
}

pub fn cholesky_solve_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    cholesky_solve_in_place(l, &mut m);
    DVector::from_column_slice(m.as_slice())
}

/// Solves the continuous Lyapunov equation `A' P + P A = -Q` by Kronecker
/// vectorization; sizes here are tiny (n <= ~8).
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(q.nrows(), n);
    let mut k = DMatrix::<f64>::zeros(n * n, n * n);
    // vec(A'P + PA) = (I (x) A' + A' (x) I) vec(P), column-major vec.
    for i in 0..n {
        for j in 0..n {
            let row_base = |r: usize, c: usize| c * n + r;
            for p in 0..n {
                // (A'P)_{ij} = sum_p A_{pi} P_{pj}
                k[(row_base(i, j), row_base(p, j))] += a[(p, i)];
                // (PA)_{ij} = sum_p P_{ip} A_{pj}
                k[(row_base(i, j), row_base(i, p))] += a[(p, j)];
            }
        }
    }
    let rhs = DVector::from_iterator(n * n, (0..n * n).map(|idx| -q[(idx % n, idx / n)]));
    let sol = k.lu().solve(&rhs)?;
    let mut p = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            p[(i, j)] = sol[j * n + i];
        }
    }
    // Symmetrize against roundoff.
    let pt = p.transpose();
    Some(0.5 * (p + pt))
}

/// Stationary solution of the Riccati ODE
/// `Pdot = A'P + PA - P B R^-1 B' P + Q`, integrated with RK4 until the
/// derivative norm drops below tolerance. Returns the LQR pair `(P, K)` with
/// `K = R^-1 B' P`.
pub fn lqr_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let r_inv = r.clone().try_inverse()?;
    let mut p = DMatrix::<f64>::identity(n, n);
    let deriv = |p: &DMatrix<f64>| -> DMatrix<f64> {
        a.transpose() * p + p * a - p * b * &r_inv * b.transpose() * p + q
    };
    // The flow stiffness is governed by both A and B R^-1 B'; start from a
    // conservative step and adapt it so each RK4 step changes P by a bounded
    // relative amount.
    let row_norm = |m: &DMatrix<f64>| -> f64 {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)].abs()).sum::<f64>())
            .fold(1.0f64, f64::max)
    };
    let bbt = b * &r_inv * b.transpose();
    let stiffness = row_norm(a).max(row_norm(&bbt));
    let h_cap = (1.0 / stiffness).min(0.05);
    let mut h = (0.1 / stiffness).min(0.05);
    for _ in 0..2_000_000 {
        let k1 = deriv(&p);
        if k1.amax() < 1e-9 * p.amax().max(1.0) {
            let gain = &r_inv * b.transpose() * &p;
            return Some((p, gain));
        }
        let k2 = deriv(&(&p + 0.5 * h * &k1));
        let k3 = deriv(&(&p + 0.5 * h * &k2));
        let k4 = deriv(&(&p + h * &k3));
        let step = (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let limit = 0.1 * p.amax().max(1.0);
        if !step.iter().all(|v| v.is_finite()) || step.amax() > limit {
            h *= 0.5;
            if h < 1e-14 {
                return None;
            }
            continue;
        }
        p += step;
        // Keep symmetric.
        let pt = p.transpose();
        p = 0.5 * (&p + pt);
        if h < h_cap {
            h = (h * 1.1).min(h_cap);
        }
    }
    None
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn blocked_cholesky_matches_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for &n in &[1usize, 7, 60, 130] {
            let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let spd = &g * g.transpose() + DMatrix::identity(n, n) * (n as f64);
            let mut l = spd.clone();
            cholesky_in_place(&mut l, 0.0).unwrap();
            let rebuilt = &l * l.transpose();
            assert!((rebuilt - &spd).amax() < 1e-9 * (n as f64));

            let rhs = DVector::from_fn(n, |i, _| (i as f64).sin() + 0.5);
            let x = cholesky_solve_vec(&l, &rhs);
            assert!((spd * x - rhs).amax() < 1e-8);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let mut l = m;
        assert!(cholesky_in_place(&mut l, 0.0).is_err());
    }

    #[test]
    fn lyapunov_solves_shifted_equation() {
        // P A + A' P = -alpha P - I  <=>  (A + alpha/2 I)' P + P (A + alpha/2 I) = -I
        let alpha = 0.1;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -2.0]);
        let shifted = &a + DMatrix::identity(2, 2) * (alpha / 2.0);
        let p = lyapunov(&shifted, &DMatrix::identity(2, 2)).unwrap();
        let resid = p.clone() * &a + a.transpose() * &p + alpha * &p + DMatrix::identity(2, 2);
        assert!(resid.amax() < 1e-10);
        assert!(min_eigenvalue(&p) > 0.0);
    }

    #[test]
    fn riccati_double_integrator() {
        // Known CARE solution for A=[[0,1],[0,0]], B=[0;1], Q=I, R=I:
        // P = [[sqrt(3), 1], [1, sqrt(3)]].
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let (p, k) = lqr_riccati(&a, &b, &q, &r).unwrap();
        let s3 = 3.0f64.sqrt();
        assert!((p[(0, 0)] - s3).abs() < 1e-6);
        assert!((p[(0, 1)] - 1.0).abs() < 1e-6);
        assert!((p[(1, 1)] - s3).abs() < 1e-6);
        assert!((k[(0, 0)] - 1.0).abs() < 1e-6);
        assert!((k[(0, 1)] - s3).abs() < 1e-6);
    }
}
