//! Small-scale semidefinite programming over the product of free,
//! nonnegative and PSD cones.
//!
//! Problems are equality-constrained conic programs
//!
//! ```text
//!     minimize    c' x
//!     subject to  A x = b,   x in K
//! ```
//!
//! with `K` an ordered product of cone blocks. PSD blocks are stored in
//! packed lower-triangular (svec) form with sqrt(2) scaling on off-diagonal
//! entries, so that inner products of packed vectors equal matrix inner
//! products.
//!
//! The solver is a homogeneous self-dual embedding with a Mehrotra
//! predictor-corrector interior-point method and Nesterov-Todd scaling;
//! problem sizes here (Gram sides up to ~120) make dense block factorizations
//! the right tool.

mod cones;
mod solver;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("cone structure is malformed: {0}")]
    BadStructure(String),
    #[error("numerical breakdown: {0}")]
    Numerical(String),
}

/// One block of the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeBlock {
    /// Unrestricted scalars.
    Free(usize),
    /// Componentwise nonnegative scalars.
    Nonneg(usize),
    /// Symmetric PSD matrix of the given side length, packed svec.
    Psd(usize),
}

impl ConeBlock {
    pub fn dim(&self) -> usize {
        match *self {
            ConeBlock::Free(n) | ConeBlock::Nonneg(n) => n,
            ConeBlock::Psd(s) => svec_len(s),
        }
    }
}

pub const fn svec_len(side: usize) -> usize {
    side * (side + 1) / 2
}

/// Index of entry (i, j), i >= j, in lower-triangular column-major packing.
pub fn svec_index(side: usize, i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i < side);
    // Offset of column j: sum_{k<j} (side - k) = j*side - j(j-1)/2
    j * side - (j * j - j) / 2 + (i - j)
}

pub fn svec_to_mat(side: usize, v: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(side, side);
    let mut idx = 0;
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for j in 0..side {
        for i in j..side {
            if i == j {
                m[(i, j)] = v[idx];
            } else {
                let val = v[idx] * inv_sqrt2;
                m[(i, j)] = val;
                m[(j, i)] = val;
            }
            idx += 1;
        }
    }
    m
}

pub fn mat_to_svec(m: &DMatrix<f64>) -> Vec<f64> {
    let side = m.nrows();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut v = Vec::with_capacity(svec_len(side));
    for j in 0..side {
        for i in j..side {
            if i == j {
                v.push(m[(i, j)]);
            } else {
                v.push(0.5 * (m[(i, j)] + m[(j, i)]) * sqrt2);
            }
        }
    }
    v
}

/// Sparse equality-constrained conic problem.
#[derive(Debug, Clone, Default)]
pub struct ConicProblem {
    pub blocks: Vec<ConeBlock>,
    /// Rows of A as sorted (column, value) pairs.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl ConicProblem {
    pub fn num_cols(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Column offset of each block.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for b in &self.blocks {
            offs.push(acc);
            acc += b.dim();
        }
        offs
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        let n = self.num_cols();
        if self.c.len() != n {
            return Err(ConicError::BadStructure(format!(
                "c has length {}, expected {}",
                self.c.len(),
                n
            )));
        }
        if self.b.len() != self.rows.len() {
            return Err(ConicError::BadStructure(format!(
                "b has length {}, expected {} rows",
                self.b.len(),
                self.rows.len()
            )));
        }
        for (k, row) in self.rows.iter().enumerate() {
            for &(col, val) in row {
                if col >= n {
                    return Err(ConicError::BadStructure(format!(
                        "row {k} references column {col} out of {n}"
                    )));
                }
                if !val.is_finite() {
                    return Err(ConicError::BadStructure(format!("row {k} has non-finite entry")));
                }
            }
        }
        Ok(())
    }

    /// Sparse text dump (block descriptors, triplets, b, c) for cross-checking
    /// against external solvers.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(s, "blocks {}", self.blocks.len()).unwrap();
        for b in &self.blocks {
            match b {
                ConeBlock::Free(n) => writeln!(s, "free {n}").unwrap(),
                ConeBlock::Nonneg(n) => writeln!(s, "nonneg {n}").unwrap(),
                ConeBlock::Psd(side) => writeln!(s, "psd {side}").unwrap(),
            }
        }
        let nnz: usize = self.rows.iter().map(|r| r.len()).sum();
        writeln!(s, "A {} {} {}", self.num_rows(), self.num_cols(), nnz).unwrap();
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                writeln!(s, "{i} {j} {v:.17e}").unwrap();
            }
        }
        writeln!(s, "b").unwrap();
        for v in &self.b {
            writeln!(s, "{v:.17e}").unwrap();
        }
        writeln!(s, "c").unwrap();
        for v in &self.c {
            writeln!(s, "{v:.17e}").unwrap();
        }
        s
    }
}

/// Solver tolerances and iteration cap.
#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iter: usize,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { feas_tol: 1e-8, gap_tol: 1e-8, max_iter: 200, verbose: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Primal infeasible; `y` holds a dual improving ray.
    Infeasible,
    /// Dual infeasible / primal unbounded; `x` holds an improving ray.
    Unbounded,
    MaxIterations,
    NumericalError,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub iterations: usize,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Solves the problem; pure function of its inputs.
pub fn solve(problem: &ConicProblem, settings: &SolverSettings) -> Result<ConicSolution, ConicError> {
    problem.validate()?;
    solver::solve(problem, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn psd_entry_cols(side: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for j in 0..side {
            for i in j..side {
                v.push((i, j));
            }
        }
        v
    }

    #[test]
    fn svec_roundtrip_preserves_inner_products() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, -1.0, 0.5, 3.0, 0.25, -1.0, 0.25, 1.0]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, -0.5, 0.0, -0.5, 2.0, 1.5, 0.0, 1.5, -1.0]);
        let va = mat_to_svec(&a);
        let vb = mat_to_svec(&b);
        let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        let frob = (a.transpose() * &b).trace();
        assert!((dot - frob).abs() < 1e-12);
        assert!((svec_to_mat(3, &va) - a).amax() < 1e-14);
        let cols = psd_entry_cols(3);
        assert_eq!(cols.len(), svec_len(3));
        for (k, (i, j)) in cols.iter().enumerate() {
            assert_eq!(svec_index(3, *i, *j), k);
        }
    }

    #[test]
    fn trace_minimization_with_unit_diagonal() {
        // min tr(X) s.t. diag(X) = 1, X psd 2x2  ->  objective 2, X = I.
        let problem = ConicProblem {
            blocks: vec![ConeBlock::Psd(2)],
            rows: vec![vec![(svec_index(2, 0, 0), 1.0)], vec![(svec_index(2, 1, 1), 1.0)]],
            b: vec![1.0, 1.0],
            c: vec![1.0, 0.0, 1.0],
        };
        let sol = solve(&problem, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective - 2.0).abs() < 1e-6);
        let x = svec_to_mat(2, &sol.x);
        assert!((x[(0, 0)] - 1.0).abs() < 1e-6);
        assert!((x[(1, 1)] - 1.0).abs() < 1e-6);
        assert!(x[(0, 1)].abs() < 1e-5);
    }

    #[test]
    fn obviously_infeasible_lp() {
        // x >= 0 and x = -1.
        let problem = ConicProblem {
            blocks: vec![ConeBlock::Nonneg(1)],
            rows: vec![vec![(0, 1.0)]],
            b: vec![-1.0],
            c: vec![0.0],
        };
        let sol = solve(&problem, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn off_diagonal_minimization_matches_eigenvalue_oracle() {
        // min X12 s.t. X11 = X22 = 1, X psd. Oracle: sweep X12 over [-1, 1]
        // and keep the smallest value with min eigenvalue >= 0.
        let mut best = f64::INFINITY;
        for k in 0..=2000 {
            let x12 = -1.0 + 2.0 * (k as f64) / 2000.0;
            let m = DMatrix::from_row_slice(2, 2, &[1.0, x12, x12, 1.0]);
            if crate::linalg::min_eigenvalue(&m) >= -1e-12 {
                best = best.min(x12);
            }
        }
        assert!((best - (-1.0)).abs() < 1e-3);

        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        let problem = ConicProblem {
            blocks: vec![ConeBlock::Psd(2)],
            rows: vec![vec![(svec_index(2, 0, 0), 1.0)], vec![(svec_index(2, 1, 1), 1.0)]],
            b: vec![1.0, 1.0],
            // c picks X12: svec coordinate is sqrt(2) X12.
            c: vec![0.0, inv_sqrt2, 0.0],
        };
        let sol = solve(&problem, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective - best).abs() < 1e-6, "objective {} vs oracle {}", sol.objective, best);
        let x = svec_to_mat(2, &sol.x);
        assert!((x[(0, 1)] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn free_variables_and_mixed_cones() {
        // min f s.t. f - x = 0, x >= 0, f + y11 = 3 with Y psd 1x1.
        // Optimal: f = x = 0, y11 = 3 -> objective 0.
        let problem = ConicProblem {
            blocks: vec![ConeBlock::Free(1), ConeBlock::Nonneg(1), ConeBlock::Psd(1)],
            rows: vec![vec![(0, 1.0), (1, -1.0)], vec![(0, 1.0), (2, 1.0)]],
            b: vec![0.0, 3.0],
            c: vec![1.0, 0.0, 0.0],
        };
        let sol = solve(&problem, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.objective.abs() < 1e-6);
        assert!((sol.x[2] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn random_primal_dual_feasible_sdps_reach_optimality() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let blocks = vec![ConeBlock::Free(2), ConeBlock::Nonneg(3), ConeBlock::Psd(3)];
            let problem = {
                let n: usize = blocks.iter().map(|b| b.dim()).sum();
                let m = 6;
                let mut rows = vec![Vec::new(); m];
                for (i, row) in rows.iter_mut().enumerate() {
                    for j in 0..n {
                        if rng.gen_bool(0.5) || (i + j) % n == 0 {
                            row.push((j, rng.gen_range(-1.0..1.0)));
                        }
                    }
                }
                // Interior primal point: free arbitrary, cone parts = I + noise.
                let mut x0 = vec![0.0; n];
                x0[0] = rng.gen_range(-1.0..1.0);
                x0[1] = rng.gen_range(-1.0..1.0);
                for v in x0.iter_mut().take(5).skip(2) {
                    *v = rng.gen_range(0.5..2.0);
                }
                let g = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.3..0.3));
                let spd = &g * g.transpose() + DMatrix::identity(3, 3);
                x0[5..11].copy_from_slice(&mat_to_svec(&spd));
                let b: Vec<f64> = rows
                    .iter()
                    .map(|row| row.iter().map(|&(j, v)| v * x0[j]).sum())
                    .collect();
                // Interior dual point: c = A'y0 + z0 with z0 interior (0 on free).
                let y0: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut c = vec![0.0; n];
                for (i, row) in rows.iter().enumerate() {
                    for &(j, v) in row {
                        c[j] += v * y0[i];
                    }
                }
                for cv in c.iter_mut().take(5).skip(2) {
                    *cv += rng.gen_range(0.5..1.5);
                }
                let gz = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.3..0.3));
                let zpd = &gz * gz.transpose() + DMatrix::identity(3, 3);
                let zv = mat_to_svec(&zpd);
                for k in 0..6 {
                    c[5 + k] += zv[k];
                }
                ConicProblem { blocks, rows, b, c }
            };
            let sol = solve(&problem, &SolverSettings::default()).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal, "trial {trial}");
            assert!(sol.primal_residual < 1e-7, "trial {trial}: pres {}", sol.primal_residual);
            assert!(sol.dual_residual < 1e-5, "trial {trial}: dres {}", sol.dual_residual);
            assert!(sol.gap < 1e-6, "trial {trial}: gap {}", sol.gap);
            // Weak duality: primal objective >= dual objective (minimization).
            let by: f64 = problem.b.iter().zip(&sol.y).map(|(a, b)| a * b).sum();
            assert!(sol.objective >= by - 1e-6, "weak duality violated");
            // Nonneg block nonnegative, PSD block eigenvalues >= -1e-7.
            for k in 2..5 {
                assert!(sol.x[k] >= -1e-9);
            }
            let xm = svec_to_mat(3, &sol.x[5..11]);
            assert!(crate::linalg::min_eigenvalue(&xm) >= -1e-7);
        }
    }

    #[test]
    fn solver_is_deterministic() {
        let problem = ConicProblem {
            blocks: vec![ConeBlock::Free(1), ConeBlock::Psd(2)],
            rows: vec![
                vec![(0, 1.0), (1, 1.0)],
                vec![(2, std::f64::consts::SQRT_2), (3, 0.5)],
                vec![(3, 1.0)],
            ],
            b: vec![1.0, 0.3, 2.0],
            c: vec![0.2, 1.0, 0.1, 1.0],
        };
        let a = solve(&problem, &SolverSettings::default()).unwrap();
        let b = solve(&problem, &SolverSettings::default()).unwrap();
        assert_eq!(a.iterations, b.iterations);
        assert!(a.x.iter().zip(&b.x).all(|(u, v)| u.to_bits() == v.to_bits()));
        assert!(a.y.iter().zip(&b.y).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn dump_is_parseable_text() {
        let problem = ConicProblem {
            blocks: vec![ConeBlock::Free(1), ConeBlock::Psd(2)],
            rows: vec![vec![(0, 1.0), (1, 2.0)]],
            b: vec![1.0],
            c: vec![0.0; 4],
        };
        let d = problem.dump();
        assert!(d.contains("free 1"));
        assert!(d.contains("psd 2"));
        assert!(d.contains("A 1 4 2"));
    }
}
