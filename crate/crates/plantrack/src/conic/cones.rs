//! Nesterov-Todd scalings and Jordan-algebra operations per cone block.

use nalgebra::{DMatrix, DVector};

use super::{svec_to_mat, ConicError};

/// Internal (non-free) cone block layout inside the concatenated cone vector.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ConeSpec {
    Nonneg { offset: usize, len: usize },
    Psd { offset: usize, side: usize },
}

impl ConeSpec {
    pub fn dim(&self) -> usize {
        match *self {
            ConeSpec::Nonneg { len, .. } => len,
            ConeSpec::Psd { side, .. } => super::svec_len(side),
        }
    }

    pub fn offset(&self) -> usize {
        match *self {
            ConeSpec::Nonneg { offset, .. } | ConeSpec::Psd { offset, .. } => offset,
        }
    }

    pub fn barrier_degree(&self) -> usize {
        match *self {
            ConeSpec::Nonneg { len, .. } => len,
            ConeSpec::Psd { side, .. } => side,
        }
    }
}

/// NT scaling state for one block.
pub(crate) enum Scaling {
    Nonneg {
        /// w_i^2 = x_i / z_i
        w2: DVector<f64>,
        lambda: DVector<f64>,
    },
    Psd {
        side: usize,
        r: DMatrix<f64>,
        r_inv: DMatrix<f64>,
        /// T = R R' (the NT point); H = congruence by T in svec coords.
        t: DMatrix<f64>,
        /// Scaled-space eigenvalues (diagonal of the scaled point).
        sigma: DVector<f64>,
    },
}

fn congruence(side: usize, left_t: &DMatrix<f64>, v: &[f64], right: &DMatrix<f64>) -> Vec<f64> {
    // svec(left_t' * mat(v) * right)
    let m = svec_to_mat(side, v);
    let out = left_t.transpose() * m * right;
    super::mat_to_svec(&out)
}

impl Scaling {
    pub fn compute(spec: &ConeSpec, x: &[f64], z: &[f64]) -> Result<Self, ConicError> {
        match *spec {
            ConeSpec::Nonneg { len, .. } => {
                let mut w2 = DVector::zeros(len);
                let mut lambda = DVector::zeros(len);
                for i in 0..len {
                    if x[i] <= 0.0 || z[i] <= 0.0 {
                        return Err(ConicError::Numerical("nonneg iterate left the cone".into()));
                    }
                    w2[i] = x[i] / z[i];
                    lambda[i] = (x[i] * z[i]).sqrt();
                }
                Ok(Scaling::Nonneg { w2, lambda })
            }
            ConeSpec::Psd { side, .. } => {
                let xm = svec_to_mat(side, x);
                let zm = svec_to_mat(side, z);
                let lx = xm
                    .cholesky()
                    .ok_or_else(|| ConicError::Numerical("psd iterate lost definiteness (x)".into()))?;
                let lz = zm
                    .cholesky()
                    .ok_or_else(|| ConicError::Numerical("psd iterate lost definiteness (z)".into()))?;
                let lx = lx.l();
                let lz = lz.l();
                let svd = (lz.transpose() * &lx).svd(true, true);
                let u = svd.u.as_ref().ok_or_else(|| ConicError::Numerical("svd failed".into()))?;
                let vt = svd.v_t.as_ref().ok_or_else(|| ConicError::Numerical("svd failed".into()))?;
                let sigma = svd.singular_values.clone();
                if sigma.iter().any(|&s| !(s > 0.0)) {
                    return Err(ConicError::Numerical("nt scaling singular".into()));
                }
                let sigma_mhalf = DMatrix::from_diagonal(&sigma.map(|s| 1.0 / s.sqrt()));
                let sigma_phalf = DMatrix::from_diagonal(&sigma.map(|s| s.sqrt()));
                // R = L_x V Sigma^{-1/2};  R^{-T} = L_z U Sigma^{-1/2}
                let r = &lx * vt.transpose() * &sigma_mhalf;
                let r_inv_t = &lz * u * &sigma_mhalf;
                let r_inv = r_inv_t.transpose();
                let _ = sigma_phalf;
                let t = &r * r.transpose();
                Ok(Scaling::Psd { side, r, r_inv, t, sigma })
            }
        }
    }

    pub fn lambda_svec(&self) -> Vec<f64> {
        match self {
            Scaling::Nonneg { lambda, .. } => lambda.as_slice().to_vec(),
            Scaling::Psd { side, sigma, .. } => {
                let m = DMatrix::from_diagonal(sigma);
                let _ = side;
                super::mat_to_svec(&m)
            }
        }
    }

    /// W v = svec(R' mat(v) R) for PSD, diag(w) v for nonneg.
    pub fn apply_w(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Scaling::Nonneg { w2, .. } => {
                v.iter().zip(w2.iter()).map(|(a, w)| a * w.sqrt()).collect()
            }
            Scaling::Psd { side, r, .. } => congruence(*side, r, v, r),
        }
    }

    /// W' v = svec(R mat(v) R').
    pub fn apply_wt(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Scaling::Nonneg { w2, .. } => {
                v.iter().zip(w2.iter()).map(|(a, w)| a * w.sqrt()).collect()
            }
            Scaling::Psd { side, r, .. } => {
                let m = svec_to_mat(*side, v);
                super::mat_to_svec(&(r * m * r.transpose()))
            }
        }
    }

    /// W^{-T} v = svec(R^{-1} mat(v) R^{-T}).
    pub fn apply_w_inv_t(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Scaling::Nonneg { w2, .. } => {
                v.iter().zip(w2.iter()).map(|(a, w)| a / w.sqrt()).collect()
            }
            Scaling::Psd { side, r_inv, .. } => {
                let m = svec_to_mat(*side, v);
                super::mat_to_svec(&(r_inv * m * r_inv.transpose()))
            }
        }
    }

    /// H v = W' W v = svec(T mat(v) T).
    pub fn apply_h(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Scaling::Nonneg { w2, .. } => v.iter().zip(w2.iter()).map(|(a, w)| a * w).collect(),
            Scaling::Psd { side, t, .. } => {
                let m = svec_to_mat(*side, v);
                super::mat_to_svec(&(t * m * t))
            }
        }
    }

    /// Dense H in svec coordinates (symmetric Kronecker square of T).
    pub fn h_dense(&self) -> HDense<'_> {
        match self {
            Scaling::Nonneg { w2, .. } => HDense::Diag(w2),
            Scaling::Psd { side, t, .. } => {
                let s = *side;
                let d = super::svec_len(s);
                let mut h = DMatrix::zeros(d, d);
                let sqrt2 = std::f64::consts::SQRT_2;
                let mut row = 0;
                for j in 0..s {
                    for i in j..s {
                        let mut col = 0;
                        for l in 0..s {
                            for k in l..s {
                                let val = if i == j && k == l {
                                    t[(i, k)] * t[(i, k)]
                                } else if i == j {
                                    sqrt2 * t[(i, k)] * t[(i, l)]
                                } else if k == l {
                                    sqrt2 * t[(i, k)] * t[(j, k)]
                                } else {
                                    t[(i, k)] * t[(j, l)] + t[(i, l)] * t[(j, k)]
                                };
                                h[(row, col)] = val;
                                col += 1;
                            }
                        }
                        row += 1;
                    }
                }
                HDense::Dense(h)
            }
        }
    }

    /// Solves lambda o u = d in scaled space (lambda is diagonal there).
    pub fn jordan_solve_lambda(&self, d: &[f64]) -> Vec<f64> {
        match self {
            Scaling::Nonneg { lambda, .. } => {
                d.iter().zip(lambda.iter()).map(|(a, l)| a / l).collect()
            }
            Scaling::Psd { side, sigma, .. } => {
                let s = *side;
                let mut out = Vec::with_capacity(d.len());
                let mut idx = 0;
                for j in 0..s {
                    for i in j..s {
                        out.push(2.0 * d[idx] / (sigma[i] + sigma[j]));
                        idx += 1;
                    }
                }
                out
            }
        }
    }

    /// lambda o lambda in svec coordinates.
    pub fn lambda_sq(&self) -> Vec<f64> {
        match self {
            Scaling::Nonneg { lambda, .. } => lambda.iter().map(|l| l * l).collect(),
            Scaling::Psd { sigma, .. } => {
                let m = DMatrix::from_diagonal(&sigma.map(|s| s * s));
                super::mat_to_svec(&m)
            }
        }
    }

    /// Jordan product of two svec vectors: svec((AB + BA)/2).
    pub fn jordan_prod(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        match self {
            Scaling::Nonneg { .. } => a.iter().zip(b.iter()).map(|(x, y)| x * y).collect(),
            Scaling::Psd { side, .. } => {
                let am = svec_to_mat(*side, a);
                let bm = svec_to_mat(*side, b);
                let prod = 0.5 * (&am * &bm + bm * am);
                super::mat_to_svec(&prod)
            }
        }
    }

    /// Largest step alpha with lambda + alpha v staying in the cone.
    pub fn step_to_boundary(&self, v: &[f64]) -> f64 {
        match self {
            Scaling::Nonneg { lambda, .. } => {
                let mut alpha = f64::INFINITY;
                for (l, dv) in lambda.iter().zip(v.iter()) {
                    if *dv < 0.0 {
                        alpha = alpha.min(-l / dv);
                    }
                }
                alpha
            }
            Scaling::Psd { side, sigma, .. } => {
                let m = svec_to_mat(*side, v);
                let scaled = DMatrix::from_fn(*side, *side, |i, j| {
                    m[(i, j)] / (sigma[i].sqrt() * sigma[j].sqrt())
                });
                let sym = 0.5 * (&scaled + scaled.transpose());
                let min_eig =
                    sym.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
                if min_eig >= 0.0 {
                    f64::INFINITY
                } else {
                    -1.0 / min_eig
                }
            }
        }
    }
}

pub(crate) enum HDense<'a> {
    Diag(&'a DVector<f64>),
    Dense(DMatrix<f64>),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::mat_to_svec;
    use rand::{Rng, SeedableRng};

    fn random_spd(side: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(side, side, |_, _| rng.gen_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(side, side) * 0.5
    }

    #[test]
    fn nt_scaling_maps_both_points_to_lambda() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for side in [2usize, 5, 9] {
            let spec = ConeSpec::Psd { offset: 0, side };
            let x = mat_to_svec(&random_spd(side, &mut rng));
            let z = mat_to_svec(&random_spd(side, &mut rng));
            let s = Scaling::compute(&spec, &x, &z).unwrap();
            let lam = s.lambda_svec();
            let xs = s.apply_w_inv_t(&x);
            let zs = s.apply_w(&z);
            for i in 0..lam.len() {
                assert!((xs[i] - lam[i]).abs() < 1e-8, "w^-T x != lambda");
                assert!((zs[i] - lam[i]).abs() < 1e-8, "w z != lambda");
            }
            // H = W'W as dense matrix matches the congruence application.
            let v: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hv = s.apply_h(&v);
            if let HDense::Dense(h) = s.h_dense() {
                let hv2 = h * DVector::from_column_slice(&v);
                for i in 0..hv.len() {
                    assert!((hv[i] - hv2[i]).abs() < 1e-8);
                }
            } else {
                panic!("expected dense H");
            }
        }
    }

    #[test]
    fn jordan_solve_inverts_product() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let spec = ConeSpec::Psd { offset: 0, side: 4 };
        let x = mat_to_svec(&random_spd(4, &mut rng));
        let z = mat_to_svec(&random_spd(4, &mut rng));
        let s = Scaling::compute(&spec, &x, &z).unwrap();
        let d: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u = s.jordan_solve_lambda(&d);
        let lam = s.lambda_svec();
        let back = s.jordan_prod(&lam, &u);
        for i in 0..d.len() {
            assert!((back[i] - d[i]).abs() < 1e-9);
        }
    }
}
