//! Homogeneous self-dual interior-point solver.
//!
//! Pipeline: Ruiz equilibration, elimination of rows supported only on free
//! columns, connected-component detection over shared cone blocks (the Newton
//! normal matrix is block diagonal per component, coupled only through free
//! columns, which are handled by a dense Schur complement), then a Mehrotra
//! predictor-corrector on the homogeneous embedding with NT scaling.

use nalgebra::{DMatrix, DVector};

use super::cones::{ConeSpec, HDense, Scaling};
use super::{ConeBlock, ConicError, ConicProblem, ConicSolution, SolveStatus, SolverSettings};

#[derive(Debug, Clone, Copy, PartialEq)]
enum ColKind {
    Free(usize),
    Cone(usize),
    Eliminated,
    FixedZero,
}

struct Elim {
    orig_row: usize,
    pivot_gcol: usize,
    pivot_coeff: f64,
    /// Work-row entries (global cols) excluding the pivot, at elimination time.
    entries: Vec<(usize, f64)>,
    rhs: f64,
}

struct Component {
    rows: Vec<usize>,
    blocks: Vec<usize>,
    /// row global index -> local index
    row_local: std::collections::HashMap<usize, usize>,
}

pub(super) fn solve(problem: &ConicProblem, settings: &SolverSettings) -> Result<ConicSolution, ConicError> {
    let n = problem.num_cols();
    let m = problem.num_rows();

    if n == 0 {
        let feasible = problem.b.iter().all(|v| v.abs() <= settings.feas_tol);
        return Ok(ConicSolution {
            status: if feasible { SolveStatus::Optimal } else { SolveStatus::Infeasible },
            x: vec![],
            y: vec![0.0; m],
            z: vec![],
            objective: 0.0,
            primal_residual: problem.b.iter().fold(0.0f64, |a, v| a.max(v.abs())),
            dual_residual: 0.0,
            gap: 0.0,
            iterations: 0,
        });
    }

    // ---- scaling (Ruiz equilibration; PSD blocks scaled uniformly) ----
    let offsets = problem.block_offsets();
    let mut col_block = vec![0usize; n];
    for (bi, blk) in problem.blocks.iter().enumerate() {
        for k in 0..blk.dim() {
            col_block[offsets[bi] + k] = bi;
        }
    }
    let mut row_scale = vec![1.0f64; m];
    let mut col_scale = vec![1.0f64; n];
    let mut work_rows: Vec<Vec<(usize, f64)>> = problem.rows.clone();
    for _pass in 0..6 {
        let mut row_max = vec![0.0f64; m];
        let mut col_max = vec![0.0f64; n];
        for (i, row) in work_rows.iter().enumerate() {
            for &(j, v) in row {
                row_max[i] = row_max[i].max(v.abs());
                col_max[j] = col_max[j].max(v.abs());
            }
        }
        // Uniform scale within non-free blocks keeps the cone invariant.
        let mut block_max = vec![0.0f64; problem.blocks.len()];
        for j in 0..n {
            let bi = col_block[j];
            block_max[bi] = block_max[bi].max(col_max[j]);
        }
        let mut done = true;
        for i in 0..m {
            if row_max[i] > 0.0 {
                let s = 1.0 / row_max[i].sqrt();
                if (s - 1.0).abs() > 1e-3 {
                    done = false;
                }
                row_scale[i] *= s;
                for e in work_rows[i].iter_mut() {
                    e.1 *= s;
                }
            }
        }
        for (i, row) in work_rows.iter_mut().enumerate() {
            let _ = i;
            for e in row.iter_mut() {
                let scale_src = match problem.blocks[col_block[e.0]] {
                    ConeBlock::Free(_) | ConeBlock::Nonneg(_) => col_max[e.0],
                    ConeBlock::Psd(_) => block_max[col_block[e.0]],
                };
                if scale_src > 0.0 {
                    e.1 /= scale_src.sqrt();
                }
            }
        }
        for j in 0..n {
            let scale_src = match problem.blocks[col_block[j]] {
                ConeBlock::Free(_) | ConeBlock::Nonneg(_) => col_max[j],
                ConeBlock::Psd(_) => block_max[col_block[j]],
            };
            if scale_src > 0.0 {
                col_scale[j] /= scale_src.sqrt();
            }
        }
        if done {
            break;
        }
    }
    let mut b_s: Vec<f64> = problem.b.iter().zip(&row_scale).map(|(v, s)| v * s).collect();
    let c_s: Vec<f64> = problem.c.iter().zip(&col_scale).map(|(v, s)| v * s).collect();

    // Snapshot for eliminated-row dual recovery.
    let orig_rows_s = work_rows.clone();
    let orig_b_s = b_s.clone();

    // ---- column classification ----
    let mut col_kind = vec![ColKind::FixedZero; n];
    let mut free_global: Vec<usize> = Vec::new();
    let mut cone_specs: Vec<ConeSpec> = Vec::new();
    let mut cone_global: Vec<usize> = Vec::new(); // cone internal idx -> global col
    {
        let mut cone_off = 0usize;
        for (bi, blk) in problem.blocks.iter().enumerate() {
            match blk {
                ConeBlock::Free(len) => {
                    for k in 0..*len {
                        col_kind[offsets[bi] + k] = ColKind::Free(free_global.len());
                        free_global.push(offsets[bi] + k);
                    }
                }
                ConeBlock::Nonneg(len) => {
                    cone_specs.push(ConeSpec::Nonneg { offset: cone_off, len: *len });
                    for k in 0..*len {
                        col_kind[offsets[bi] + k] = ColKind::Cone(cone_off + k);
                        cone_global.push(offsets[bi] + k);
                    }
                    cone_off += len;
                }
                ConeBlock::Psd(side) => {
                    let d = super::svec_len(*side);
                    cone_specs.push(ConeSpec::Psd { offset: cone_off, side: *side });
                    for k in 0..d {
                        col_kind[offsets[bi] + k] = ColKind::Cone(cone_off + k);
                        cone_global.push(offsets[bi] + k);
                    }
                    cone_off += d;
                }
            }
        }
    }
    let nc = cone_global.len();

    // ---- eliminate rows supported only on free columns ----
    let mut elims: Vec<Elim> = Vec::new();
    let mut row_alive = vec![true; m];
    let mut c_work = c_s.clone();
    let mut obj_offset = 0.0f64;
    let is_free = |ck: &ColKind| matches!(ck, ColKind::Free(_));
    loop {
        let mut progressed = false;
        for r in 0..m {
            if !row_alive[r] {
                continue;
            }
            let only_free = work_rows[r]
                .iter()
                .all(|&(j, v)| v == 0.0 || is_free(&col_kind[j]) || matches!(col_kind[j], ColKind::Eliminated));
            if !only_free {
                continue;
            }
            // Keep only live entries.
            let live: Vec<(usize, f64)> = work_rows[r]
                .iter()
                .filter(|&&(j, v)| v.abs() > 1e-14 && is_free(&col_kind[j]))
                .cloned()
                .collect();
            if live.is_empty() {
                if b_s[r].abs() > settings.feas_tol.max(1e-9) {
                    if settings.verbose {
                        eprintln!(
                            "presolve: row {r} reduced to 0 = {:.3e} (original entries {:?})",
                            b_s[r],
                            problem.rows[r]
                        );
                    }
                    return Ok(infeasible_from_presolve(problem, m));
                }
                row_alive[r] = false;
                progressed = true;
                continue;
            }
            // Pivot on the largest entry.
            let &(pj, pv) = live.iter().max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap()).unwrap();
            let entries: Vec<(usize, f64)> = work_rows[r]
                .iter()
                .filter(|&&(j, v)| j != pj && v.abs() > 1e-14 && !matches!(col_kind[j], ColKind::Eliminated))
                .cloned()
                .collect();
            let rhs = b_s[r];
            // Substitute x_pj into every other live row.
            for r2 in 0..m {
                if r2 == r || !row_alive[r2] {
                    continue;
                }
                let a2 = work_rows[r2].iter().find(|&&(j, _)| j == pj).map(|&(_, v)| v).unwrap_or(0.0);
                if a2 == 0.0 {
                    continue;
                }
                let factor = a2 / pv;
                let mut merged: std::collections::BTreeMap<usize, f64> = work_rows[r2]
                    .iter()
                    .filter(|&&(j, _)| j != pj)
                    .cloned()
                    .collect();
                for &(j, v) in &entries {
                    *merged.entry(j).or_insert(0.0) -= factor * v;
                }
                merged.retain(|_, v| v.abs() > 1e-14);
                work_rows[r2] = merged.into_iter().collect();
                b_s[r2] -= factor * rhs;
            }
            // Substitute into the objective.
            let cp = c_work[pj];
            if cp != 0.0 {
                obj_offset += cp * rhs / pv;
                for &(j, v) in &entries {
                    c_work[j] -= cp * v / pv;
                }
                c_work[pj] = 0.0;
            }
            col_kind[pj] = ColKind::Eliminated;
            row_alive[r] = false;
            elims.push(Elim { orig_row: r, pivot_gcol: pj, pivot_coeff: pv, entries, rhs });
            progressed = true;
        }
        if !progressed {
            break;
        }
    }

    // Remaining free columns, dropping those that appear in no live row.
    let mut free_used = vec![false; n];
    for (r, row) in work_rows.iter().enumerate() {
        if !row_alive[r] {
            continue;
        }
        for &(j, v) in row {
            if v != 0.0 && is_free(&col_kind[j]) {
                free_used[j] = true;
            }
        }
    }
    let mut free_cols: Vec<usize> = Vec::new();
    for j in 0..n {
        if is_free(&col_kind[j]) {
            if free_used[j] {
                col_kind[j] = ColKind::Free(free_cols.len());
                free_cols.push(j);
            } else {
                if c_work[j].abs() > 1e-12 {
                    // Unconstrained free variable with nonzero cost.
                    return Ok(simple_status(problem, SolveStatus::Unbounded, m));
                }
                col_kind[j] = ColKind::FixedZero;
            }
        }
    }
    let nf = free_cols.len();

    // Live rows, compacted.
    let live_rows: Vec<usize> = (0..m).filter(|&r| row_alive[r]).collect();
    let mr = live_rows.len();

    // Split rows into free and cone parts with internal indices.
    let mut rows_free: Vec<Vec<(usize, f64)>> = Vec::with_capacity(mr);
    let mut rows_cone: Vec<Vec<(usize, f64)>> = Vec::with_capacity(mr);
    let mut b_r = Vec::with_capacity(mr);
    for &r in &live_rows {
        let mut rf = Vec::new();
        let mut rc = Vec::new();
        for &(j, v) in &work_rows[r] {
            if v == 0.0 {
                continue;
            }
            match col_kind[j] {
                ColKind::Free(fi) => rf.push((fi, v)),
                ColKind::Cone(ci) => rc.push((ci, v)),
                _ => {}
            }
        }
        rows_free.push(rf);
        rows_cone.push(rc);
        b_r.push(b_s[r]);
    }
    let c_f: Vec<f64> = free_cols.iter().map(|&j| c_work[j]).collect();
    let c_c: Vec<f64> = cone_global.iter().map(|&j| c_work[j]).collect();

    if nc == 0 {
        return Ok(solve_pure_free(
            problem, settings, &rows_free, &b_r, &c_f, &free_cols, &live_rows, &elims, &orig_rows_s, &orig_b_s,
            &c_s, &col_kind, &row_scale, &col_scale, obj_offset, m, n,
        ));
    }

    // ---- row components over shared cone blocks ----
    let col_to_block: Vec<usize> = {
        let mut map = vec![usize::MAX; nc];
        for (bi, spec) in cone_specs.iter().enumerate() {
            for k in 0..spec.dim() {
                map[spec.offset() + k] = bi;
            }
        }
        map
    };
    let mut uf: Vec<usize> = (0..mr).collect();
    fn find(uf: &mut Vec<usize>, i: usize) -> usize {
        let mut r = i;
        while uf[r] != r {
            r = uf[r];
        }
        let mut c = i;
        while uf[c] != c {
            let next = uf[c];
            uf[c] = r;
            c = next;
        }
        r
    }
    let mut block_first_row = vec![usize::MAX; cone_specs.len()];
    for (ri, rc) in rows_cone.iter().enumerate() {
        for &(ci, _) in rc {
            let bi = col_to_block[ci];
            if block_first_row[bi] == usize::MAX {
                block_first_row[bi] = ri;
            } else {
                let a = find(&mut uf, block_first_row[bi]);
                let b = find(&mut uf, ri);
                if a != b {
                    uf[a] = b;
                }
            }
        }
    }
    let mut comp_of_root: std::collections::HashMap<usize, usize> = Default::default();
    let mut components: Vec<Component> = Vec::new();
    for ri in 0..mr {
        let root = find(&mut uf, ri);
        let ci = *comp_of_root.entry(root).or_insert_with(|| {
            components.push(Component { rows: vec![], blocks: vec![], row_local: Default::default() });
            components.len() - 1
        });
        let local = components[ci].rows.len();
        components[ci].rows.push(ri);
        components[ci].row_local.insert(ri, local);
    }
    for (bi, &fr) in block_first_row.iter().enumerate() {
        if fr != usize::MAX {
            let root = find(&mut uf, fr);
            let ci = comp_of_root[&root];
            components[ci].blocks.push(bi);
        }
    }
    // Blocks touched by no row still need scaling state; give each its own pseudo component.
    for (bi, &fr) in block_first_row.iter().enumerate() {
        if fr == usize::MAX {
            components.push(Component { rows: vec![], blocks: vec![bi], row_local: Default::default() });
        }
    }

    // Per block: list of (row index, local coord, value).
    let mut block_rows: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); cone_specs.len()];
    for (ri, rc) in rows_cone.iter().enumerate() {
        for &(ci, v) in rc {
            let bi = col_to_block[ci];
            block_rows[bi].push((ri, ci - cone_specs[bi].offset(), v));
        }
    }

    // ---- interior-point iteration ----
    let nu: usize = cone_specs.iter().map(|s| s.barrier_degree()).sum();
    let mut x_f = vec![0.0f64; nf];
    let mut x_c = identity_vec(&cone_specs, nc);
    let mut z_c = identity_vec(&cone_specs, nc);
    let mut y = vec![0.0f64; mr];
    let mut tau = 1.0f64;
    let mut kappa = 1.0f64;

    let norm_b = norm2(&b_r).max(1.0);
    let norm_c = norm2(&c_f).max(norm2(&c_c)).max(1.0);

    let mut best: Option<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64)> = None;
    let mut stalls = 0usize;
    let mut iterations = 0usize;
    let mut final_status = SolveStatus::MaxIterations;
    let mut pres_hist: Vec<f64> = Vec::new();

    for iter in 0..settings.max_iter {
        iterations = iter + 1;
        // Residuals.
        let ax = mat_vec(&rows_free, &rows_cone, &x_f, &x_c, mr);
        let rp: Vec<f64> = (0..mr).map(|i| ax[i] - b_r[i] * tau).collect();
        let aty_f = at_vec_free(&rows_free, &y, nf);
        let aty_c = at_vec_cone(&rows_cone, &y, nc);
        let rd_f: Vec<f64> = (0..nf).map(|j| aty_f[j] - c_f[j] * tau).collect();
        let rd_c: Vec<f64> = (0..nc).map(|j| aty_c[j] + z_c[j] - c_c[j] * tau).collect();
        let cx = dot(&c_f, &x_f) + dot(&c_c, &x_c);
        let by = dot(&b_r, &y);
        let rg = cx - by + kappa;
        let xz = dot(&x_c, &z_c);
        let mu = (xz + tau * kappa) / (nu as f64 + 1.0);

        // Backward-error style normalization: the achievable residual floor
        // scales with the (de-homogenized) iterate norms.
        let x_norm = (norm2(&x_f).powi(2) + norm2(&x_c).powi(2)).sqrt();
        let yz_norm = (norm2(&y).powi(2) + norm2(&z_c).powi(2)).sqrt();
        let pres = norm2(&rp) / (tau * norm_b + x_norm);
        let dresf = norm2(&rd_f);
        let dresc = norm2(&rd_c);
        let dres = (dresf * dresf + dresc * dresc).sqrt() / (tau * norm_c + yz_norm);
        let pobj = cx / tau;
        let dobj = by / tau;
        let relgap = (pobj - dobj).abs() / (1.0f64).max(pobj.abs()).max(dobj.abs());

        if settings.verbose {
            eprintln!(
                "iter {iter:3}  pres {pres:9.2e}  dres {dres:9.2e}  gap {relgap:9.2e}  tau {tau:9.2e}  kappa {kappa:9.2e}  mu {mu:9.2e}"
            );
        }

        let phi = pres.max(dres).max(relgap);
        if best.as_ref().map_or(true, |b| phi < b.0) {
            best = Some((phi, x_f.clone(), x_c.clone(), y.clone(), z_c.clone(), tau));
        }

        if pres <= settings.feas_tol && dres <= settings.gap_tol.max(settings.feas_tol) && relgap <= settings.gap_tol {
            final_status = SolveStatus::Optimal;
            best = Some((phi, x_f.clone(), x_c.clone(), y.clone(), z_c.clone(), tau));
            break;
        }

        // Degenerate problems plateau in the primal residual at roughly
        // sqrt(machine eps) while the gap keeps contracting; once the
        // complementarity is far past the target, polish the linear
        // residuals at frozen complementarity, then classify and stop.
        pres_hist.push(pres);
        let plateaued = pres_hist.len() >= 5 && {
            let n = pres_hist.len();
            pres_hist[n - 1] > 0.5 * pres_hist[n - 5]
        };
        if (plateaued && dres <= settings.gap_tol && relgap <= settings.gap_tol) || mu < 1e-17 {
            let polished = polish(
                &rows_free, &rows_cone, &cone_specs, &b_r, &c_f, &c_c, &block_rows, &components,
                &mut x_f, &mut x_c, &mut y, &mut z_c, &mut tau, &mut kappa, mr, nf, nc, settings,
            );
            let pres_p = polished.unwrap_or(pres);
            let phi_p = pres_p.max(dres).max(relgap);
            if best.as_ref().map_or(true, |b| phi_p < b.0) {
                best = Some((phi_p, x_f.clone(), x_c.clone(), y.clone(), z_c.clone(), tau));
            }
            final_status = if pres_p <= settings.feas_tol {
                SolveStatus::Optimal
            } else {
                SolveStatus::MaxIterations
            };
            break;
        }

        // Infeasibility certificates. The homogenization variable must have
        // collapsed relative to kappa, otherwise a wandering early iterate
        // can masquerade as a certificate.
        let aty_norm = (norm2(&aty_f).powi(2) + {
            let v: Vec<f64> = (0..nc).map(|j| aty_c[j] + z_c[j]).collect();
            norm2(&v).powi(2)
        })
        .sqrt();
        if tau < 0.1 * kappa {
            let cert_tol = settings.feas_tol.min(1e-7);
            if by > 0.0 && aty_norm / by <= cert_tol * norm_c {
                final_status = SolveStatus::Infeasible;
                best = Some((phi, x_f.clone(), x_c.clone(), y.clone(), z_c.clone(), tau));
                break;
            }
            if cx < 0.0 && norm2(&ax) / (-cx) <= cert_tol * norm_b {
                final_status = SolveStatus::Unbounded;
                best = Some((phi, x_f.clone(), x_c.clone(), y.clone(), z_c.clone(), tau));
                break;
            }
        }

        // NT scalings.
        let scalings: Vec<Scaling> = {
            let mut v = Vec::with_capacity(cone_specs.len());
            for spec in &cone_specs {
                let o = spec.offset();
                let d = spec.dim();
                match Scaling::compute(spec, &x_c[o..o + d], &z_c[o..o + d]) {
                    Ok(s) => v.push(s),
                    Err(_) => {
                        return finish(
                            problem, settings, SolveStatus::NumericalError, best, &cone_specs, &free_cols,
                            &cone_global, &live_rows, &elims, &orig_rows_s, &orig_b_s, &c_s, &col_kind,
                            &row_scale, &col_scale, obj_offset, m, n, iterations,
                        );
                    }
                }
            }
            v
        };

        // Newton normal matrices per component + Schur complement over free cols.
        let factors = match assemble_and_factor(&components, &cone_specs, &scalings, &block_rows, &rows_free, nf) {
            Ok(f) => f,
            Err(_) => {
                return finish(
                    problem, settings, SolveStatus::NumericalError, best, &cone_specs, &free_cols, &cone_global,
                    &live_rows, &elims, &orig_rows_s, &orig_b_s, &c_s, &col_kind, &row_scale, &col_scale,
                    obj_offset, m, n, iterations,
                );
            }
        };

        // Precompute H c_c and v1 = b + A_c H c_c.
        let hc = apply_h_all(&cone_specs, &scalings, &c_c);
        let v1: Vec<f64> = {
            let ahc = mat_vec_cone_only(&rows_cone, &hc, mr);
            (0..mr).map(|i| b_r[i] + ahc[i]).collect()
        };
        let (dy_b, dxf_b) = factors.kkt_solve(&v1, &c_f);

        let lambda_sq = concat_blocks(&cone_specs, &scalings, |s| s.lambda_sq());

        // Predictor (affine) direction.
        let u_comp_aff: Vec<f64> = lambda_sq.iter().map(|v| -v).collect();
        let aff = newton_direction(
            &rows_free, &rows_cone, &cone_specs, &scalings, &factors, &dy_b, &dxf_b, &v1, &b_r, &c_f, &c_c,
            &hc, neg(&rp), neg(&rd_f), neg(&rd_c), -rg, &u_comp_aff, -tau * kappa, tau, kappa, mr, nf, nc,
        );

        // Step to boundary for the affine direction.
        let alpha_aff = step_length(&cone_specs, &scalings, &aff, tau, kappa, 1.0);
        let mu_aff = {
            let xa: Vec<f64> = (0..nc).map(|i| x_c[i] + alpha_aff * aff.dx_c[i]).collect();
            let za: Vec<f64> = (0..nc).map(|i| z_c[i] + alpha_aff * aff.dz_c[i]).collect();
            (dot(&xa, &za) + (tau + alpha_aff * aff.dtau) * (kappa + alpha_aff * aff.dkappa))
                / (nu as f64 + 1.0)
        };
        let sigma = ((mu_aff / mu).max(0.0)).powi(3).min(1.0);

        // Combined direction with Mehrotra correction.
        let corr = jordan_corr(&cone_specs, &scalings, &aff);
        let ident = identity_vec(&cone_specs, nc);
        let u_comp: Vec<f64> = (0..nc)
            .map(|i| -lambda_sq[i] - corr[i] + sigma * mu * ident[i])
            .collect();
        let one_minus_sigma = 1.0 - sigma;
        let comb = newton_direction(
            &rows_free, &rows_cone, &cone_specs, &scalings, &factors, &dy_b, &dxf_b, &v1, &b_r, &c_f, &c_c,
            &hc, scale(&rp, -one_minus_sigma), scale(&rd_f, -one_minus_sigma), scale(&rd_c, -one_minus_sigma),
            -one_minus_sigma * rg, &u_comp, -tau * kappa - aff.dtau * aff.dkappa + sigma * mu, tau, kappa,
            mr, nf, nc,
        );

        let alpha = step_length(&cone_specs, &scalings, &comb, tau, kappa, 0.99).min(1.0);
        if alpha < 1e-8 || !alpha.is_finite() {
            stalls += 1;
            if stalls >= 2 {
                break;
            }
        } else {
            stalls = 0;
        }

        for i in 0..nf {
            x_f[i] += alpha * comb.dx_f[i];
        }
        for i in 0..nc {
            x_c[i] += alpha * comb.dx_c[i];
            z_c[i] += alpha * comb.dz_c[i];
        }
        for i in 0..mr {
            y[i] += alpha * comb.dy[i];
        }
        tau += alpha * comb.dtau;
        kappa += alpha * comb.dkappa;
        if !tau.is_finite() || tau <= 0.0 || !kappa.is_finite() {
            final_status = SolveStatus::NumericalError;
            break;
        }
    }

    finish(
        problem, settings, final_status, best, &cone_specs, &free_cols, &cone_global, &live_rows, &elims,
        &orig_rows_s, &orig_b_s, &c_s, &col_kind, &row_scale, &col_scale, obj_offset, m, n, iterations,
    )
}

struct Direction {
    dx_f: Vec<f64>,
    dx_c: Vec<f64>,
    dy: Vec<f64>,
    dz_c: Vec<f64>,
    dtau: f64,
    dkappa: f64,
}

/// Feasibility polish at the plateau: Newton steps targeting only the linear
/// residuals (zero complementarity right-hand side) with near-full steps.
/// Returns the achieved primal residual measure.
#[allow(clippy::too_many_arguments)]
fn polish(
    rows_free: &[Vec<(usize, f64)>],
    rows_cone: &[Vec<(usize, f64)>],
    cone_specs: &[ConeSpec],
    b_r: &[f64],
    c_f: &[f64],
    c_c: &[f64],
    block_rows: &[Vec<(usize, usize, f64)>],
    components: &[Component],
    x_f: &mut Vec<f64>,
    x_c: &mut Vec<f64>,
    y: &mut Vec<f64>,
    z_c: &mut Vec<f64>,
    tau: &mut f64,
    kappa: &mut f64,
    mr: usize,
    nf: usize,
    nc: usize,
    settings: &SolverSettings,
) -> Option<f64> {
    let norm_b = norm2(b_r).max(1.0);
    let mut best_pres = f64::INFINITY;
    let mut snapshot = (x_f.clone(), x_c.clone(), y.clone(), z_c.clone(), *tau, *kappa);
    for _ in 0..8 {
        let scalings: Vec<Scaling> = {
            let mut v = Vec::with_capacity(cone_specs.len());
            for spec in cone_specs {
                let o = spec.offset();
                let d = spec.dim();
                match Scaling::compute(spec, &x_c[o..o + d], &z_c[o..o + d]) {
                    Ok(s) => v.push(s),
                    Err(_) => break,
                }
            }
            if v.len() != cone_specs.len() {
                break;
            }
            v
        };
        let ax = mat_vec(rows_free, rows_cone, x_f, x_c, mr);
        let rp: Vec<f64> = (0..mr).map(|i| ax[i] - b_r[i] * *tau).collect();
        let aty_f = at_vec_free(rows_free, y, nf);
        let aty_c = at_vec_cone(rows_cone, y, nc);
        let rd_f: Vec<f64> = (0..nf).map(|j| aty_f[j] - c_f[j] * *tau).collect();
        let rd_c: Vec<f64> = (0..nc).map(|j| aty_c[j] + z_c[j] - c_c[j] * *tau).collect();
        let cx = dot(c_f, x_f) + dot(c_c, x_c);
        let by = dot(b_r, y);
        let rg = cx - by + *kappa;
        let x_norm = (norm2(x_f).powi(2) + norm2(x_c).powi(2)).sqrt();
        let pres = norm2(&rp) / (*tau * norm_b + x_norm);
        if pres < best_pres {
            best_pres = pres;
            snapshot = (x_f.clone(), x_c.clone(), y.clone(), z_c.clone(), *tau, *kappa);
        }
        if pres <= settings.feas_tol * 0.5 {
            return Some(pres);
        }
        let Ok(factors) =
            assemble_and_factor(components, cone_specs, &scalings, block_rows, rows_free, nf)
        else {
            break;
        };
        let hc = apply_h_all(cone_specs, &scalings, c_c);
        let v1: Vec<f64> = {
            let ahc = mat_vec_cone_only(rows_cone, &hc, mr);
            (0..mr).map(|i| b_r[i] + ahc[i]).collect()
        };
        let (dy_b, dxf_b) = factors.kkt_solve(&v1, c_f);
        let zeros = vec![0.0; nc];
        let dir = newton_direction(
            rows_free, rows_cone, cone_specs, &scalings, &factors, &dy_b, &dxf_b, &v1, b_r, c_f, c_c,
            &hc, neg(&rp), neg(&rd_f), neg(&rd_c), -rg, &zeros, 0.0, *tau, *kappa, mr, nf, nc,
        );
        let alpha = step_length(cone_specs, &scalings, &dir, *tau, *kappa, 0.999).min(1.0);
        if !alpha.is_finite() || alpha < 1e-10 {
            break;
        }
        for i in 0..nf {
            x_f[i] += alpha * dir.dx_f[i];
        }
        for i in 0..nc {
            x_c[i] += alpha * dir.dx_c[i];
            z_c[i] += alpha * dir.dz_c[i];
        }
        for i in 0..mr {
            y[i] += alpha * dir.dy[i];
        }
        *tau += alpha * dir.dtau;
        *kappa += alpha * dir.dkappa;
        if !tau.is_finite() || *tau <= 0.0 {
            break;
        }
    }
    *x_f = snapshot.0;
    *x_c = snapshot.1;
    *y = snapshot.2;
    *z_c = snapshot.3;
    *tau = snapshot.4;
    *kappa = snapshot.5;
    Some(best_pres)
}

struct Factors {
    /// Per component: raw M, Cholesky factor, local A_f (rows of component), M^-1 A_f.
    comps: Vec<CompFactor>,
    s_chol: DMatrix<f64>,
    nf: usize,
    m_rows: usize,
}

struct CompFactor {
    rows: Vec<usize>,
    /// Free columns with support in this component.
    cols: Vec<usize>,
    m_raw: DMatrix<f64>,
    chol: DMatrix<f64>,
    af_local: DMatrix<f64>,
    minv_af: DMatrix<f64>,
}

impl Factors {
    fn kkt_solve_once(&self, r_y: &[f64], r_f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nf = self.nf;
        let mut t_all = vec![0.0f64; r_y.len()];
        let mut g = DVector::from_column_slice(r_f).scale(-1.0);
        for cf in &self.comps {
            if cf.rows.is_empty() {
                continue;
            }
            let mut rhs = DMatrix::from_fn(cf.rows.len(), 1, |i, _| r_y[cf.rows[i]]);
            crate::linalg::cholesky_solve_in_place(&cf.chol, &mut rhs);
            for (li, &ri) in cf.rows.iter().enumerate() {
                t_all[ri] = rhs[(li, 0)];
            }
            if !cf.cols.is_empty() {
                let local = cf.af_local.transpose() * rhs.column(0);
                for (lj, &j) in cf.cols.iter().enumerate() {
                    g[j] += local[lj];
                }
            }
        }
        let dx_f = if nf > 0 {
            let mut sol = DMatrix::from_column_slice(nf, 1, g.as_slice());
            crate::linalg::cholesky_solve_in_place(&self.s_chol, &mut sol);
            sol.column(0).iter().copied().collect::<Vec<f64>>()
        } else {
            vec![]
        };
        let mut dy = t_all;
        for cf in &self.comps {
            if cf.rows.is_empty() || cf.cols.is_empty() {
                continue;
            }
            let dxf_loc = DVector::from_fn(cf.cols.len(), |j, _| dx_f[cf.cols[j]]);
            let corr = &cf.minv_af * &dxf_loc;
            for (li, &ri) in cf.rows.iter().enumerate() {
                dy[ri] -= corr[li];
            }
        }
        (dy, dx_f)
    }

    /// KKT residual for [M A_f; A_f' 0] [dy; dx_f] = [r_y; r_f].
    fn kkt_residual(
        &self,
        dy: &[f64],
        dx_f: &[f64],
        r_y: &[f64],
        r_f: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut res_y = r_y.to_vec();
        let mut res_f = r_f.to_vec();
        for cf in &self.comps {
            if cf.rows.is_empty() {
                continue;
            }
            let dy_loc = DVector::from_fn(cf.rows.len(), |i, _| dy[cf.rows[i]]);
            let mdy = &cf.m_raw * &dy_loc;
            for (li, &ri) in cf.rows.iter().enumerate() {
                res_y[ri] -= mdy[li];
            }
            if !cf.cols.is_empty() {
                let dxf_loc = DVector::from_fn(cf.cols.len(), |j, _| dx_f[cf.cols[j]]);
                let af_dx = &cf.af_local * &dxf_loc;
                for (li, &ri) in cf.rows.iter().enumerate() {
                    res_y[ri] -= af_dx[li];
                }
                let atdy = cf.af_local.transpose() * &dy_loc;
                for (lj, &j) in cf.cols.iter().enumerate() {
                    res_f[j] -= atdy[lj];
                }
            }
        }
        (res_y, res_f)
    }

    /// Solves the KKT system with iterative refinement; the normal matrix
    /// turns severely ill-conditioned near convergence, and the refinement
    /// passes keep the embedded residuals shrinking with mu.
    fn kkt_solve(&self, r_y: &[f64], r_f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mut dy, mut dx_f) = self.kkt_solve_once(r_y, r_f);
        let rhs_scale =
            r_y.iter().chain(r_f.iter()).fold(1.0f64, |a, v| a.max(v.abs()));
        for _ in 0..2 {
            let (res_y, res_f) = self.kkt_residual(&dy, &dx_f, r_y, r_f);
            let nrm = res_y.iter().chain(res_f.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
            if nrm < 1e-13 * rhs_scale {
                break;
            }
            let (cy, cf) = self.kkt_solve_once(&res_y, &res_f);
            for i in 0..self.m_rows {
                dy[i] += cy[i];
            }
            for j in 0..self.nf {
                dx_f[j] += cf[j];
            }
        }
        (dy, dx_f)
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble_and_factor(
    components: &[Component],
    cone_specs: &[ConeSpec],
    scalings: &[Scaling],
    block_rows: &[Vec<(usize, usize, f64)>],
    rows_free: &[Vec<(usize, f64)>],
    nf: usize,
) -> Result<Factors, ConicError> {
    let mut comps = Vec::with_capacity(components.len());
    let mut s_mat = DMatrix::<f64>::zeros(nf.max(1), nf.max(1));
    for comp in components {
        if comp.rows.is_empty() {
            continue;
        }
        let mc = comp.rows.len();
        let mut m_raw = DMatrix::<f64>::zeros(mc, mc);
        for &bi in &comp.blocks {
            let spec = &cone_specs[bi];
            let entries = &block_rows[bi];
            match scalings[bi].h_dense() {
                HDense::Diag(w2) => {
                    for &(r1, c1, v1) in entries {
                        let l1 = comp.row_local[&r1];
                        for &(r2, c2, v2) in entries {
                            if c1 == c2 {
                                let l2 = comp.row_local[&r2];
                                m_raw[(l1, l2)] += v1 * w2[c1] * v2;
                            }
                        }
                    }
                }
                HDense::Dense(h) => {
                    for &(r1, c1, v1) in entries {
                        let l1 = comp.row_local[&r1];
                        for &(r2, c2, v2) in entries {
                            let l2 = comp.row_local[&r2];
                            m_raw[(l1, l2)] += v1 * h[(c1, c2)] * v2;
                        }
                    }
                }
            }
            let _ = spec;
        }
        // Regularize and factor, retrying with a larger jitter if needed.
        let scale_diag = (0..mc).map(|i| m_raw[(i, i)]).fold(0.0f64, f64::max).max(1.0);
        let mut jitter = 1e-13 * scale_diag;
        let chol = loop {
            let mut work = m_raw.clone();
            for i in 0..mc {
                work[(i, i)] += jitter;
            }
            match crate::linalg::cholesky_in_place(&mut work, 0.0) {
                Ok(()) => break work,
                Err(_) => {
                    jitter *= 100.0;
                    if jitter > 1e-2 * scale_diag {
                        return Err(ConicError::Numerical("normal matrix factorization failed".into()));
                    }
                }
            }
        };
        // Restrict the Schur work to the free columns this component touches.
        let mut cols: Vec<usize> = Vec::new();
        if nf > 0 {
            let mut seen = vec![false; nf];
            for &ri in &comp.rows {
                for &(fi, _) in &rows_free[ri] {
                    if !seen[fi] {
                        seen[fi] = true;
                        cols.push(fi);
                    }
                }
            }
            cols.sort_unstable();
        }
        let af_local = {
            let mut local = DMatrix::<f64>::zeros(mc, cols.len());
            let col_pos: std::collections::HashMap<usize, usize> =
                cols.iter().enumerate().map(|(lj, &j)| (j, lj)).collect();
            for (li, &ri) in comp.rows.iter().enumerate() {
                for &(fi, v) in &rows_free[ri] {
                    local[(li, col_pos[&fi])] = v;
                }
            }
            local
        };
        let minv_af = {
            let mut work = af_local.clone();
            crate::linalg::cholesky_solve_in_place(&chol, &mut work);
            work
        };
        if !cols.is_empty() {
            let s_local = af_local.transpose() * &minv_af;
            for (li, &i) in cols.iter().enumerate() {
                for (lj, &j) in cols.iter().enumerate() {
                    s_mat[(i, j)] += s_local[(li, lj)];
                }
            }
        }
        comps.push(CompFactor { rows: comp.rows.clone(), cols, m_raw, chol, af_local, minv_af });
    }
    let s_chol = if nf > 0 {
        let sd = (0..nf).map(|i| s_mat[(i, i)]).fold(0.0f64, f64::max).max(1.0);
        let mut jitter = 1e-13 * sd;
        loop {
            let mut work = s_mat.view((0, 0), (nf, nf)).clone_owned();
            for i in 0..nf {
                work[(i, i)] += jitter;
            }
            match crate::linalg::cholesky_in_place(&mut work, 0.0) {
                Ok(()) => break work,
                Err(_) => {
                    jitter *= 100.0;
                    if jitter > 1e-2 * sd {
                        return Err(ConicError::Numerical("schur factorization failed".into()));
                    }
                }
            }
        }
    } else {
        DMatrix::zeros(0, 0)
    };
    Ok(Factors { comps, s_chol, nf, m_rows: rows_free.len() })
}

#[allow(clippy::too_many_arguments)]
fn newton_direction_once(
    rows_free: &[Vec<(usize, f64)>],
    rows_cone: &[Vec<(usize, f64)>],
    cone_specs: &[ConeSpec],
    scalings: &[Scaling],
    factors: &Factors,
    dy_b: &[f64],
    dxf_b: &[f64],
    v1: &[f64],
    b_r: &[f64],
    c_f: &[f64],
    c_c: &[f64],
    hc: &[f64],
    u_p: &[f64],
    u_df: &[f64],
    u_dc: &[f64],
    u_g: f64,
    u_comp: &[f64],
    u_tk: f64,
    tau: f64,
    kappa: f64,
    mr: usize,
    nf: usize,
    nc: usize,
) -> Direction {
    let _ = rows_free;
    // d_s = lambda \ u_comp; w = W' d_s - H u_dc
    let d_s = jordan_solve_all(cone_specs, scalings, u_comp);
    let wt_ds = apply_wt_all(cone_specs, scalings, &d_s);
    let h_udc = apply_h_all(cone_specs, scalings, u_dc);
    let w_vec: Vec<f64> = (0..nc).map(|i| wt_ds[i] - h_udc[i]).collect();
    let a_w = mat_vec_cone_only(rows_cone, &w_vec, mr);
    let rhs_y: Vec<f64> = (0..mr).map(|i| u_p[i] - a_w[i]).collect();
    let (dy_a, dxf_a) = factors.kkt_solve(&rhs_y, u_df);

    // dtau from the gap row.
    let v1_minus_b: Vec<f64> = (0..mr).map(|i| v1[i] - b_r[i]).collect();
    let c_hc = dot(c_c, hc);
    let k0 =
        dot(c_f, &dxf_a) + dot(c_c, &w_vec) + dot(&v1_minus_b, &dy_a) - dot(b_r, &dy_a) + u_tk / tau;
    let k1 = dot(c_f, dxf_b) + dot(&v1_minus_b, dy_b) - c_hc - dot(b_r, dy_b) - kappa / tau;
    let dtau = if k1.abs() > 1e-300 { (u_g - k0) / k1 } else { 0.0 };

    let dy: Vec<f64> = (0..mr).map(|i| dy_a[i] + dtau * dy_b[i]).collect();
    let dx_f: Vec<f64> = (0..nf).map(|i| dxf_a[i] + dtau * dxf_b[i]).collect();
    let aty = at_vec_cone(rows_cone, &dy, nc);
    let dz_c: Vec<f64> = (0..nc).map(|i| u_dc[i] - aty[i] + c_c[i] * dtau).collect();
    let h_dz = apply_h_all(cone_specs, scalings, &dz_c);
    let dx_c: Vec<f64> = (0..nc).map(|i| wt_ds[i] - h_dz[i]).collect();
    let dkappa = (u_tk - kappa * dtau) / tau;
    Direction { dx_f, dx_c, dy, dz_c, dtau, dkappa }
}

/// Newton direction with one full-system refinement pass: near convergence
/// the scaling operators are severely ill-conditioned, and the correction
/// recovers the residual digits lost to cancellation in the elimination.
#[allow(clippy::too_many_arguments)]
fn newton_direction(
    rows_free: &[Vec<(usize, f64)>],
    rows_cone: &[Vec<(usize, f64)>],
    cone_specs: &[ConeSpec],
    scalings: &[Scaling],
    factors: &Factors,
    dy_b: &[f64],
    dxf_b: &[f64],
    v1: &[f64],
    b_r: &[f64],
    c_f: &[f64],
    c_c: &[f64],
    hc: &[f64],
    u_p: Vec<f64>,
    u_df: Vec<f64>,
    u_dc: Vec<f64>,
    u_g: f64,
    u_comp: &[f64],
    u_tk: f64,
    tau: f64,
    kappa: f64,
    mr: usize,
    nf: usize,
    nc: usize,
) -> Direction {
    let mut dir = newton_direction_once(
        rows_free, rows_cone, cone_specs, scalings, factors, dy_b, dxf_b, v1, b_r, c_f, c_c, hc, &u_p,
        &u_df, &u_dc, u_g, u_comp, u_tk, tau, kappa, mr, nf, nc,
    );
    for _ in 0..2 {
        // Residuals of every Newton equation at the current direction.
        let ax = mat_vec(rows_free, rows_cone, &dir.dx_f, &dir.dx_c, mr);
        let res_p: Vec<f64> = (0..mr).map(|i| u_p[i] - (ax[i] - b_r[i] * dir.dtau)).collect();
        let atyf = at_vec_free(rows_free, &dir.dy, nf);
        let res_df: Vec<f64> = (0..nf).map(|j| u_df[j] - (atyf[j] - c_f[j] * dir.dtau)).collect();
        let atyc = at_vec_cone(rows_cone, &dir.dy, nc);
        let res_dc: Vec<f64> =
            (0..nc).map(|j| u_dc[j] - (atyc[j] + dir.dz_c[j] - c_c[j] * dir.dtau)).collect();
        let res_g = u_g
            - (dot(c_f, &dir.dx_f) + dot(c_c, &dir.dx_c) - dot(b_r, &dir.dy) + dir.dkappa);
        // Complementarity: lambda o (W^-T dx + W dz) = u_comp.
        let mut comp = vec![0.0; nc];
        for (spec, s) in cone_specs.iter().zip(scalings) {
            let o = spec.offset();
            let d = spec.dim();
            let px = s.apply_w_inv_t(&dir.dx_c[o..o + d]);
            let pz = s.apply_w(&dir.dz_c[o..o + d]);
            let sum: Vec<f64> = (0..d).map(|i| px[i] + pz[i]).collect();
            let lam = s.lambda_svec();
            let prod = s.jordan_prod(&lam, &sum);
            comp[o..o + d].copy_from_slice(&prod);
        }
        let res_comp: Vec<f64> = (0..nc).map(|i| u_comp[i] - comp[i]).collect();
        let res_tk = u_tk - (tau * dir.dkappa + kappa * dir.dtau);

        let rhs_scale = u_p
            .iter()
            .chain(u_df.iter())
            .chain(u_dc.iter())
            .chain(u_comp.iter())
            .fold(1.0f64.max(u_g.abs()).max(u_tk.abs()), |a, v| a.max(v.abs()));
        let worst = res_p
            .iter()
            .chain(res_df.iter())
            .chain(res_dc.iter())
            .chain(res_comp.iter())
            .fold(res_g.abs().max(res_tk.abs()), |a, v| a.max(v.abs()));
        if worst < 1e-13 * rhs_scale {
            break;
        }
        let corr = newton_direction_once(
            rows_free, rows_cone, cone_specs, scalings, factors, dy_b, dxf_b, v1, b_r, c_f, c_c, hc,
            &res_p, &res_df, &res_dc, res_g, &res_comp, res_tk, tau, kappa, mr, nf, nc,
        );
        for i in 0..nf {
            dir.dx_f[i] += corr.dx_f[i];
        }
        for i in 0..nc {
            dir.dx_c[i] += corr.dx_c[i];
            dir.dz_c[i] += corr.dz_c[i];
        }
        for i in 0..mr {
            dir.dy[i] += corr.dy[i];
        }
        dir.dtau += corr.dtau;
        dir.dkappa += corr.dkappa;
    }
    dir
}

fn step_length(
    cone_specs: &[ConeSpec],
    scalings: &[Scaling],
    dir: &Direction,
    tau: f64,
    kappa: f64,
    damping: f64,
) -> f64 {
    let mut alpha = f64::INFINITY;
    for (spec, s) in cone_specs.iter().zip(scalings) {
        let o = spec.offset();
        let d = spec.dim();
        let px = s.apply_w_inv_t(&dir.dx_c[o..o + d]);
        let pz = s.apply_w(&dir.dz_c[o..o + d]);
        alpha = alpha.min(s.step_to_boundary(&px));
        alpha = alpha.min(s.step_to_boundary(&pz));
    }
    if dir.dtau < 0.0 {
        alpha = alpha.min(-tau / dir.dtau);
    }
    if dir.dkappa < 0.0 {
        alpha = alpha.min(-kappa / dir.dkappa);
    }
    (damping * alpha).min(1.0)
}

// ---- small vector helpers ----

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn neg(a: &[f64]) -> Vec<f64> {
    a.iter().map(|v| -v).collect()
}

fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|v| v * s).collect()
}

fn mat_vec(
    rows_free: &[Vec<(usize, f64)>],
    rows_cone: &[Vec<(usize, f64)>],
    x_f: &[f64],
    x_c: &[f64],
    mr: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; mr];
    for i in 0..mr {
        let mut acc = 0.0;
        for &(j, v) in &rows_free[i] {
            acc += v * x_f[j];
        }
        for &(j, v) in &rows_cone[i] {
            acc += v * x_c[j];
        }
        out[i] = acc;
    }
    out
}

fn mat_vec_cone_only(rows_cone: &[Vec<(usize, f64)>], x_c: &[f64], mr: usize) -> Vec<f64> {
    let mut out = vec![0.0; mr];
    for i in 0..mr {
        out[i] = rows_cone[i].iter().map(|&(j, v)| v * x_c[j]).sum();
    }
    out
}

fn at_vec_free(rows_free: &[Vec<(usize, f64)>], y: &[f64], nf: usize) -> Vec<f64> {
    let mut out = vec![0.0; nf];
    for (i, row) in rows_free.iter().enumerate() {
        for &(j, v) in row {
            out[j] += v * y[i];
        }
    }
    out
}

fn at_vec_cone(rows_cone: &[Vec<(usize, f64)>], y: &[f64], nc: usize) -> Vec<f64> {
    let mut out = vec![0.0; nc];
    for (i, row) in rows_cone.iter().enumerate() {
        for &(j, v) in row {
            out[j] += v * y[i];
        }
    }
    out
}

fn identity_vec(cone_specs: &[ConeSpec], nc: usize) -> Vec<f64> {
    let mut e = vec![0.0; nc];
    for spec in cone_specs {
        match *spec {
            ConeSpec::Nonneg { offset, len } => {
                for i in 0..len {
                    e[offset + i] = 1.0;
                }
            }
            ConeSpec::Psd { offset, side } => {
                let mut idx = 0;
                for j in 0..side {
                    for i in j..side {
                        if i == j {
                            e[offset + idx] = 1.0;
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    e
}

fn concat_blocks(
    cone_specs: &[ConeSpec],
    scalings: &[Scaling],
    f: impl Fn(&Scaling) -> Vec<f64>,
) -> Vec<f64> {
    let nc: usize = cone_specs.iter().map(|s| s.dim()).sum();
    let mut out = vec![0.0; nc];
    for (spec, s) in cone_specs.iter().zip(scalings) {
        let v = f(s);
        out[spec.offset()..spec.offset() + spec.dim()].copy_from_slice(&v);
    }
    out
}

fn apply_blockwise(
    cone_specs: &[ConeSpec],
    scalings: &[Scaling],
    x: &[f64],
    f: impl Fn(&Scaling, &[f64]) -> Vec<f64>,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (spec, s) in cone_specs.iter().zip(scalings) {
        let o = spec.offset();
        let d = spec.dim();
        let v = f(s, &x[o..o + d]);
        out[o..o + d].copy_from_slice(&v);
    }
    out
}

fn apply_h_all(cone_specs: &[ConeSpec], scalings: &[Scaling], x: &[f64]) -> Vec<f64> {
    apply_blockwise(cone_specs, scalings, x, |s, v| s.apply_h(v))
}

fn apply_wt_all(cone_specs: &[ConeSpec], scalings: &[Scaling], x: &[f64]) -> Vec<f64> {
    apply_blockwise(cone_specs, scalings, x, |s, v| s.apply_wt(v))
}

fn jordan_solve_all(cone_specs: &[ConeSpec], scalings: &[Scaling], x: &[f64]) -> Vec<f64> {
    apply_blockwise(cone_specs, scalings, x, |s, v| s.jordan_solve_lambda(v))
}

fn jordan_corr(cone_specs: &[ConeSpec], scalings: &[Scaling], aff: &Direction) -> Vec<f64> {
    let nc: usize = cone_specs.iter().map(|s| s.dim()).sum();
    let mut out = vec![0.0; nc];
    for (spec, s) in cone_specs.iter().zip(scalings) {
        let o = spec.offset();
        let d = spec.dim();
        let px = s.apply_w_inv_t(&aff.dx_c[o..o + d]);
        let pz = s.apply_w(&aff.dz_c[o..o + d]);
        let prod = s.jordan_prod(&px, &pz);
        out[o..o + d].copy_from_slice(&prod);
    }
    out
}

// ---- postsolve ----

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &ConicProblem,
    settings: &SolverSettings,
    status: SolveStatus,
    best: Option<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64)>,
    cone_specs: &[ConeSpec],
    free_cols: &[usize],
    cone_global: &[usize],
    live_rows: &[usize],
    elims: &[Elim],
    orig_rows_s: &[Vec<(usize, f64)>],
    orig_b_s: &[f64],
    c_s: &[f64],
    col_kind: &[ColKind],
    row_scale: &[f64],
    col_scale: &[f64],
    obj_offset: f64,
    m: usize,
    n: usize,
    iterations: usize,
) -> Result<ConicSolution, ConicError> {
    let _ = (cone_specs, obj_offset);
    let Some((_, x_f, x_c, y_r, z_c, tau)) = best else {
        return Err(ConicError::Numerical("no iterate produced".into()));
    };
    let div = match status {
        SolveStatus::Infeasible | SolveStatus::Unbounded => 1.0,
        _ => tau,
    };

    // Scaled full-length vectors.
    let mut x_full = vec![0.0f64; n];
    for (fi, &j) in free_cols.iter().enumerate() {
        x_full[j] = x_f[fi] / div;
    }
    for (ci, &j) in cone_global.iter().enumerate() {
        x_full[j] = x_c[ci] / div;
    }
    let mut y_full = vec![0.0f64; m];
    for (ri, &r) in live_rows.iter().enumerate() {
        y_full[r] = y_r[ri] / div;
    }
    let mut z_full = vec![0.0f64; n];
    for (ci, &j) in cone_global.iter().enumerate() {
        z_full[j] = z_c[ci] / div;
    }

    // Back-substitute eliminated free variables (reverse order).
    for e in elims.iter().rev() {
        let mut acc = e.rhs;
        for &(j, v) in &e.entries {
            acc -= v * x_full[j];
        }
        x_full[e.pivot_gcol] = acc / e.pivot_coeff;
    }
    // Recover duals of eliminated rows from stationarity on pivot columns.
    if !elims.is_empty() {
        let me = elims.len();
        let mut emat = DMatrix::<f64>::zeros(me, me);
        let mut erhs = DVector::<f64>::zeros(me);
        for (k, e) in elims.iter().enumerate() {
            let p = e.pivot_gcol;
            let mut rhs = c_s[p];
            for (r, row) in orig_rows_s.iter().enumerate() {
                let a_rp = row.iter().find(|&&(j, _)| j == p).map(|&(_, v)| v).unwrap_or(0.0);
                if a_rp == 0.0 {
                    continue;
                }
                if let Some(j2) = elims.iter().position(|e2| e2.orig_row == r) {
                    emat[(k, j2)] = a_rp;
                } else {
                    rhs -= a_rp * y_full[r];
                }
            }
            erhs[k] = rhs;
        }
        if let Some(sol) = emat.lu().solve(&erhs) {
            for (k, e) in elims.iter().enumerate() {
                y_full[e.orig_row] = sol[k];
            }
        }
    }
    let _ = orig_b_s;

    // Unscale.
    let mut x = vec![0.0f64; n];
    let mut z = vec![0.0f64; n];
    for j in 0..n {
        x[j] = x_full[j] * col_scale[j];
        z[j] = z_full[j] / col_scale[j];
        if matches!(col_kind[j], ColKind::FixedZero) {
            x[j] = 0.0;
        }
    }
    let mut y = vec![0.0f64; m];
    for r in 0..m {
        y[r] = y_full[r] * row_scale[r];
    }

    // Residuals against the original data.
    let mut ax = vec![0.0f64; m];
    let mut aty = vec![0.0f64; n];
    for (i, row) in problem.rows.iter().enumerate() {
        for &(j, v) in row {
            ax[i] += v * x[j];
            aty[j] += v * y[i];
        }
    }
    let objective = dot(&problem.c, &x);
    let by = dot(&problem.b, &y);
    let pres_abs: f64 = (0..m).map(|i| (ax[i] - problem.b[i]).powi(2)).sum::<f64>().sqrt();
    let dres_abs: f64 =
        (0..n).map(|j| (aty[j] + z[j] - problem.c[j]).powi(2)).sum::<f64>().sqrt();
    let norm_b = norm2(&problem.b).max(1.0);
    let norm_c = norm2(&problem.c).max(1.0);
    let gap = (objective - by).abs() / (1.0f64).max(objective.abs()).max(by.abs());

    let mut status = status;
    let x_norm = norm2(&x);
    let yz_norm = (norm2(&y).powi(2) + norm2(&z).powi(2)).sqrt();
    let pres_back = pres_abs / (norm_b + x_norm);
    let dres_back = dres_abs / (norm_c + yz_norm);
    if status == SolveStatus::Optimal
        && !(pres_back <= settings.feas_tol * 100.0 && dres_back <= 1e-5)
    {
        // Unscaling degraded the solution more than expected.
        status = SolveStatus::MaxIterations;
    }
    // The residuals on the original data are the arbiter: a plateaued solve
    // that lands within tolerance after unscaling is a solution.
    if status == SolveStatus::MaxIterations
        && pres_back <= settings.feas_tol
        && dres_back <= settings.feas_tol.max(settings.gap_tol)
        && gap <= settings.gap_tol * 10.0
    {
        status = SolveStatus::Optimal;
    }
    if status == SolveStatus::Infeasible && by.abs() > 1e-300 {
        // Normalize the improving ray to b'y = 1.
        let s = 1.0 / by;
        for v in y.iter_mut() {
            *v *= s;
        }
        for v in z.iter_mut() {
            *v *= s;
        }
    }

    Ok(ConicSolution {
        status,
        x,
        y,
        z,
        objective,
        primal_residual: pres_abs / norm_b,
        dual_residual: dres_abs / norm_c,
        gap,
        iterations,
    })
}

fn infeasible_from_presolve(problem: &ConicProblem, m: usize) -> ConicSolution {
    ConicSolution {
        status: SolveStatus::Infeasible,
        x: vec![0.0; problem.num_cols()],
        y: vec![0.0; m],
        z: vec![0.0; problem.num_cols()],
        objective: 0.0,
        primal_residual: f64::INFINITY,
        dual_residual: 0.0,
        gap: 0.0,
        iterations: 0,
    }
}

fn simple_status(problem: &ConicProblem, status: SolveStatus, m: usize) -> ConicSolution {
    ConicSolution {
        status,
        x: vec![0.0; problem.num_cols()],
        y: vec![0.0; m],
        z: vec![0.0; problem.num_cols()],
        objective: 0.0,
        primal_residual: 0.0,
        dual_residual: 0.0,
        gap: 0.0,
        iterations: 0,
    }
}

/// All cone columns were eliminated or absent: equality-constrained linear
/// program over free variables only.
#[allow(clippy::too_many_arguments)]
fn solve_pure_free(
    problem: &ConicProblem,
    settings: &SolverSettings,
    rows_free: &[Vec<(usize, f64)>],
    b_r: &[f64],
    c_f: &[f64],
    free_cols: &[usize],
    live_rows: &[usize],
    elims: &[Elim],
    orig_rows_s: &[Vec<(usize, f64)>],
    orig_b_s: &[f64],
    c_s: &[f64],
    col_kind: &[ColKind],
    row_scale: &[f64],
    col_scale: &[f64],
    obj_offset: f64,
    m: usize,
    n: usize,
) -> ConicSolution {
    let nf = free_cols.len();
    let mr = rows_free.len();
    let mut a = DMatrix::<f64>::zeros(mr.max(1), nf.max(1));
    for (i, row) in rows_free.iter().enumerate() {
        for &(j, v) in row {
            a[(i, j)] = v;
        }
    }
    let svd = a.clone().svd(true, true);
    let bv = DVector::from_column_slice(b_r);
    let x = if mr > 0 && nf > 0 {
        svd.solve(&bv, 1e-12).unwrap_or_else(|_| DVector::zeros(nf))
    } else {
        DVector::zeros(nf)
    };
    let resid = if mr > 0 { (&a * &x - &bv).amax() } else { 0.0 };
    let status = if resid > settings.feas_tol.max(1e-7) {
        SolveStatus::Infeasible
    } else {
        // Unbounded if c has a component in the null space of A.
        let cfv = DVector::from_column_slice(c_f);
        let mut unbounded = false;
        if nf > 0 {
            let at_svd = a.transpose().svd(true, true);
            let proj = at_svd.solve(&cfv, 1e-10).map(|yv| a.transpose() * yv);
            match proj {
                Ok(p) => {
                    if (p - &cfv).amax() > 1e-7 * (1.0 + cfv.amax()) {
                        unbounded = true;
                    }
                }
                Err(_) => unbounded = true,
            }
        }
        if unbounded {
            SolveStatus::Unbounded
        } else {
            SolveStatus::Optimal
        }
    };
    let best = Some((
        0.0,
        x.iter().copied().collect::<Vec<f64>>(),
        vec![],
        vec![0.0; mr],
        vec![],
        1.0,
    ));
    match finish(
        problem, settings, status, best, &[], free_cols, &[], live_rows, elims, orig_rows_s, orig_b_s, c_s,
        col_kind, row_scale, col_scale, obj_offset, m, n, 0,
    ) {
        Ok(mut sol) => {
            if status == SolveStatus::Optimal {
                sol.status = SolveStatus::Optimal;
            }
            sol
        }
        Err(_) => simple_status(problem, SolveStatus::NumericalError, m),
    }
}
