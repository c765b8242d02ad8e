//! Alternating-direction solution of the bilinear SOS synthesis programs.
//!
//! The synthesis programs are bilinear in two decision groups: the storage
//! function `V` on one side and the controller plus the multipliers that
//! multiply `V` on the other. Fixing either group yields a convex SOS
//! program. Two procedures operate on that split:
//!
//! - feasible-point initialization: both steps minimize a slack added to the
//!   decrease (and jump) constraints until it reaches zero;
//! - the main alternation: the controller step shrinks the level `gamma`
//!   (by bisection, since `gamma` multiplies decision multipliers), the
//!   `V`-step reshapes `V` under a level-set-growth constraint so the next
//!   controller step stays feasible.

use std::time::Instant;

use crate::conic::{self, SolverSettings};
use crate::poly::Poly;
use crate::sosprog::{Certificates, SosError, SosProgram};

/// Decision group fixed during a V-step: the controller and every multiplier
/// that multiplies `V` in the program.
#[derive(Debug, Clone)]
pub struct KappaGroup {
    pub kappa: Vec<Poly>,
    pub l: Poly,
    /// Multiplier of `V(T_s, e) - gamma` in the jump constraint, when present.
    pub s_jump: Option<Poly>,
    /// Multipliers of `V - gamma` in the per-channel input bounds.
    pub s_upper: Vec<Poly>,
    pub s_lower: Vec<Poly>,
}

/// A bilinear SOS synthesis problem, abstracted over which program (time
/// invariant or time varying) is being alternated.
pub trait BilinearSosProblem {
    /// Program deciding the controller group at fixed `V` and `gamma`;
    /// `relax` adds the initialization slack (decision named `lambda`,
    /// minimized).
    fn kappa_step(&self, v: &Poly, gamma: f64, relax: bool) -> Result<SosProgram, SosError>;

    /// Program deciding `V` at a fixed controller group and `gamma`;
    /// `levelset` enforces containment of the new level set in `v_prev`'s.
    fn v_step(
        &self,
        group: &KappaGroup,
        gamma: f64,
        v_prev: &Poly,
        levelset: bool,
        relax: bool,
    ) -> Result<SosProgram, SosError>;

    /// Pulls the controller group out of a kappa-step solution.
    fn extract_group(&self, certs: &Certificates) -> Result<KappaGroup, SosError>;
}

#[derive(Debug, thiserror::Error)]
pub enum AlternationError {
    #[error("initialization failed: slack stayed positive (trace: {trace:?})")]
    InitFailure { trace: Vec<f64>, report: AlternationReport },
    #[error("no feasible controller step at the initial level")]
    NoFeasibleStart,
    #[error(transparent)]
    Template(#[from] SosError),
    #[error(transparent)]
    Conic(#[from] conic::ConicError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Kappa,
    V,
    Probe,
}

/// One solver invocation in the iteration log.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iteration: usize,
    pub kind: StepKind,
    pub gamma: f64,
    pub lambda: Option<f64>,
    pub feasible: bool,
    pub status: String,
    pub max_residual: f64,
    pub min_gram_eig: f64,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AlternationReport {
    pub records: Vec<IterRecord>,
    pub termination: String,
}

impl AlternationReport {
    /// CSV log: iteration, step, gamma, lambda, residual, min gram eig,
    /// solve time.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,step,gamma,lambda,feasible,max_residual,min_gram_eig,solve_ms\n");
        for r in &self.records {
            let kind = match r.kind {
                StepKind::Kappa => "kappa",
                StepKind::V => "v",
                StepKind::Probe => "probe",
            };
            s.push_str(&format!(
                "{},{},{:.12e},{},{},{:.3e},{:.3e},{:.1}\n",
                r.iteration,
                kind,
                r.gamma,
                r.lambda.map_or(String::new(), |l| format!("{l:.12e}")),
                r.feasible,
                r.max_residual,
                r.min_gram_eig,
                r.solve_ms
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct InitOptions {
    pub gamma_bar: f64,
    pub max_iters: usize,
    /// Accept once lambda falls to or below this (0 per the construction).
    pub lambda_tol: f64,
    pub solver: SolverSettings,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self { gamma_bar: 1.0, max_iters: 8, lambda_tol: 0.0, solver: SolverSettings::default() }
    }
}

pub struct InitResult {
    pub v0: Poly,
    pub group: KappaGroup,
    pub lambda_trace: Vec<f64>,
    pub report: AlternationReport,
}

/// Acceptance gate on a recovered solution: the SOS identities must
/// reassemble within tolerance (relative to the constraint coefficient
/// scale) and every Gram block must be (numerically) PSD.
const REVERIFY_RESIDUAL: f64 = 1e-4;
const REVERIFY_MIN_EIG: f64 = -1e-7;

struct SolveOutcome {
    certs: Option<Certificates>,
    status: String,
    max_residual: f64,
    min_gram_eig: f64,
    solve_ms: f64,
}

fn solve_step(program: &SosProgram, solver: &SolverSettings) -> Result<SolveOutcome, AlternationError> {
    let start = Instant::now();
    let compiled = program.compile()?;
    let sol = conic::solve(&compiled.problem, solver)?;
    let solve_ms = start.elapsed().as_secs_f64() * 1e3;
    // Iteration-capped solves still carry usable primal certificates; the
    // reverification below is the actual quality gate.
    let usable = sol.is_optimal() || sol.status == conic::SolveStatus::MaxIterations;
    if !usable {
        return Ok(SolveOutcome {
            certs: None,
            status: format!("{:?} pres {:.1e} dres {:.1e} gap {:.1e}", sol.status, sol.primal_residual, sol.dual_residual, sol.gap),
            max_residual: f64::NAN,
            min_gram_eig: f64::NAN,
            solve_ms,
        });
    }
    let certs = compiled.map.recover_lenient(program, &sol)?;
    let ok = certs.max_residual <= REVERIFY_RESIDUAL && certs.min_gram_eig >= REVERIFY_MIN_EIG;
    Ok(SolveOutcome {
        max_residual: certs.max_residual,
        min_gram_eig: certs.min_gram_eig,
        status: if ok { "optimal".into() } else { format!("reverify-reject resid {:.1e} eig {:.1e}", certs.max_residual, certs.min_gram_eig) },
        certs: if ok { Some(certs) } else { None },
        solve_ms,
    })
}

fn lambda_of(certs: &Certificates) -> Option<f64> {
    certs.decision("lambda").map(|p| p.coeff(&crate::poly::Monomial::one()))
}

/// Computes a feasible starting storage function from a seed `v_bar` by
/// alternately minimizing the constraint slack until it is nonpositive.
pub fn initialize_v0(
    problem: &dyn BilinearSosProblem,
    v_bar: &Poly,
    opts: &InitOptions,
) -> Result<InitResult, AlternationError> {
    let mut report = AlternationReport::default();
    let mut v_pre = v_bar.clone();
    let mut lambda_trace = Vec::new();
    let mut best_group: Option<KappaGroup>;

    for iter in 0..opts.max_iters {
        // kappa-step: minimize lambda at fixed V.
        let prog = problem.kappa_step(&v_pre, opts.gamma_bar, true)?;
        let out = solve_step(&prog, &opts.solver)?;
        let lambda = out.certs.as_ref().and_then(lambda_of);
        report.records.push(IterRecord {
            iteration: iter,
            kind: StepKind::Kappa,
            gamma: opts.gamma_bar,
            lambda,
            feasible: out.certs.is_some(),
            status: out.status.clone(),
            max_residual: out.max_residual,
            min_gram_eig: out.min_gram_eig,
            solve_ms: out.solve_ms,
        });
        let Some(certs) = out.certs else {
            report.termination = "initialization kappa-step failed to solve".into();
            return Err(AlternationError::InitFailure { trace: lambda_trace, report });
        };
        let lambda = lambda.unwrap_or(f64::INFINITY);
        lambda_trace.push(lambda);
        let group = problem.extract_group(&certs)?;
        if lambda <= opts.lambda_tol {
            report.termination = "slack nonpositive after kappa-step".into();
            return Ok(InitResult { v0: v_pre, group, lambda_trace, report });
        }
        best_group = Some(group);

        // V-step: minimize lambda at the fixed controller group.
        let group_ref = best_group.as_ref().unwrap();
        let prog = problem.v_step(group_ref, opts.gamma_bar, &v_pre, false, true)?;
        let out = solve_step(&prog, &opts.solver)?;
        let lambda_v = out.certs.as_ref().and_then(lambda_of);
        report.records.push(IterRecord {
            iteration: iter,
            kind: StepKind::V,
            gamma: opts.gamma_bar,
            lambda: lambda_v,
            feasible: out.certs.is_some(),
            status: out.status.clone(),
            max_residual: out.max_residual,
            min_gram_eig: out.min_gram_eig,
            solve_ms: out.solve_ms,
            });
        let Some(certs_v) = out.certs else {
            report.termination = "initialization V-step failed to solve".into();
            return Err(AlternationError::InitFailure { trace: lambda_trace, report });
        };
        let v_new = certs_v
            .decision("V")
            .cloned()
            .ok_or_else(|| SosError::Structural("V decision missing from V-step".into()))?;
        let lambda_v = lambda_v.unwrap_or(f64::INFINITY);
        lambda_trace.push(lambda_v);
        v_pre = v_new;
        if lambda_v <= opts.lambda_tol {
            report.termination = "slack nonpositive after V-step".into();
            let group = best_group.take().unwrap();
            return Ok(InitResult { v0: v_pre, group, lambda_trace, report });
        }
        // Stagnation: require meaningful decay across a full sweep.
        if lambda_trace.len() >= 4 {
            let n = lambda_trace.len();
            if lambda_trace[n - 1] > 0.95 * lambda_trace[n - 3] {
                report.termination = "slack stagnated above zero".into();
                return Err(AlternationError::InitFailure { trace: lambda_trace, report });
            }
        }
    }
    Err(AlternationError::InitFailure { trace: lambda_trace, report })
}

#[derive(Debug, Clone)]
pub struct AlternationOptions {
    pub n_iter: usize,
    /// Early stop when the relative gamma improvement over two iterations
    /// falls below this.
    pub rel_tol: f64,
    /// Bisection probes per kappa-step.
    pub bisect_iters: usize,
    pub solver: SolverSettings,
}

impl Default for AlternationOptions {
    fn default() -> Self {
        Self { n_iter: 10, rel_tol: 1e-3, bisect_iters: 5, solver: SolverSettings::default() }
    }
}

pub struct AlternationResult {
    pub v: Poly,
    pub gamma: f64,
    pub group: KappaGroup,
    pub certs: Certificates,
    pub report: AlternationReport,
}

/// Alternating direction method: each kappa-step minimizes `gamma` at fixed
/// `V` (bisection over feasibility programs); each V-step reshapes `V` under
/// the level-set-growth constraint. Returns the best certified iterate.
pub fn alternate(
    problem: &dyn BilinearSosProblem,
    v0: &Poly,
    gamma0: f64,
    opts: &AlternationOptions,
) -> Result<AlternationResult, AlternationError> {
    let mut report = AlternationReport::default();
    let mut v = v0.clone();
    let mut gamma = gamma0;
    let mut best: Option<(Poly, f64, KappaGroup, Certificates)> = None;
    let mut prev_gammas: Vec<f64> = vec![gamma0];

    let iters = opts.n_iter.max(1);
    'outer: for iter in 0..iters {
        // ---- kappa/gamma-step: bisection on gamma at fixed V ----
        let mut hi = gamma;
        let mut feasible_at_hi: Option<Certificates>;
        {
            let prog = problem.kappa_step(&v, hi, false)?;
            let out = solve_step(&prog, &opts.solver)?;
            report.records.push(IterRecord {
                iteration: iter,
                kind: StepKind::Kappa,
                gamma: hi,
                lambda: None,
                feasible: out.certs.is_some(),
                status: out.status.clone(),
                max_residual: out.max_residual,
                min_gram_eig: out.min_gram_eig,
                solve_ms: out.solve_ms,
                });
            feasible_at_hi = out.certs;
        }
        if feasible_at_hi.is_none() {
            // The previous iterate should have remained feasible; treat as a
            // solver hiccup and return the best iterate so far.
            report.termination = format!("kappa-step infeasible at gamma {hi:.6e}; keeping best iterate");
            break 'outer;
        }
        let mut lo = 0.0f64;
        for _probe in 0..opts.bisect_iters {
            if (hi - lo) <= 0.02 * hi.max(1e-12) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let prog = problem.kappa_step(&v, mid, false)?;
            let out = solve_step(&prog, &opts.solver)?;
            report.records.push(IterRecord {
                iteration: iter,
                kind: StepKind::Probe,
                gamma: mid,
                lambda: None,
                feasible: out.certs.is_some(),
                status: out.status.clone(),
                max_residual: out.max_residual,
                min_gram_eig: out.min_gram_eig,
                solve_ms: out.solve_ms,
                });
            match out.certs {
                Some(certs) => {
                    hi = mid;
                    feasible_at_hi = Some(certs);
                }
                None => lo = mid,
            }
        }
        gamma = hi;
        let certs = feasible_at_hi.expect("bisection keeps the last feasible certificate");
        let group = problem.extract_group(&certs)?;
        best = Some((v.clone(), gamma, group, certs));
        prev_gammas.push(gamma);

        // Early stop on stagnating gamma.
        let n = prev_gammas.len();
        if n >= 3 {
            let old = prev_gammas[n - 3];
            if old > 0.0 && (old - gamma) / old < opts.rel_tol {
                report.termination = "gamma improvement below tolerance".into();
                break 'outer;
            }
        }
        if iter + 1 == iters {
            report.termination = "iteration cap reached".into();
            break 'outer;
        }

        // ---- V-step at fixed group ----
        let group_ref = &best.as_ref().unwrap().2;
        let prog = problem.v_step(group_ref, gamma, &v, true, false)?;
        let out = solve_step(&prog, &opts.solver)?;
        report.records.push(IterRecord {
            iteration: iter,
            kind: StepKind::V,
            gamma,
            lambda: None,
            feasible: out.certs.is_some(),
            status: out.status.clone(),
            max_residual: out.max_residual,
            min_gram_eig: out.min_gram_eig,
            solve_ms: out.solve_ms,
        });
        match out.certs {
            Some(certs_v) => {
                if let Some(v_new) = certs_v.decision("V") {
                    v = v_new.clone();
                } else {
                    report.termination = "V decision missing; keeping best iterate".into();
                    break 'outer;
                }
            }
            None => {
                report.termination = "V-step infeasible; keeping best iterate".into();
                break 'outer;
            }
        }
    }

    if report.termination.is_empty() {
        report.termination = "iteration cap reached".into();
    }
    match best {
        Some((v, gamma, group, certs)) => Ok(AlternationResult { v, gamma, group, certs, report }),
        None => Err(AlternationError::NoFeasibleStart),
    }
}
