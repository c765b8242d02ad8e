//! Model pairs and symbolic error-system derivation.
//!
//! A tracker (high-fidelity) and planner (low-fidelity) model are related by
//! a comparison map `pi` lifting planner state/input to tracker state space
//! and a weighting matrix `phi`, defining the tracking error
//! `e = phi(x, xh, uh) (x - pi(xh, uh))` with declared inverse
//! `x = nu(e, xh, uh)`. From these the continuous error dynamics
//! `edot = f_e + g_e u` and the sampling-instant jump function `h` are derived
//! symbolically.
//!
//! Two builtin pairs are provided: a double/single integrator pair and a
//! dynamic-bicycle/Dubins pair whose rotation weighting and tire terms are
//! polynomialized by least-squares fits (trig in the heading error, reciprocal
//! speed over the planner's speed range).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{Monomial, Poly, PolyError, VarRegistry, Variable};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("comparison maps failed inverse verification: max residual {0:.3e}")]
    InverseCheck(f64),
    #[error("{0}")]
    Structural(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Named variables shared by every symbolic object in one pipeline.
#[derive(Debug, Clone)]
pub struct SysVars {
    pub reg: Arc<VarRegistry>,
    pub t: Variable,
    pub e: Vec<Variable>,
    pub x: Vec<Variable>,
    pub xh: Vec<Variable>,
    pub uh: Vec<Variable>,
    pub du: Vec<Variable>,
}

impl SysVars {
    pub fn new(n_x: usize, n_xh: usize, n_uh: usize) -> Self {
        let reg = VarRegistry::new();
        let t = reg.register("t").unwrap();
        let e = (0..n_x).map(|i| reg.register(&format!("e{}", i + 1)).unwrap()).collect();
        let x = (0..n_x).map(|i| reg.register(&format!("x{}", i + 1)).unwrap()).collect();
        let xh = (0..n_xh).map(|i| reg.register(&format!("xh{}", i + 1)).unwrap()).collect();
        let uh = (0..n_uh).map(|i| reg.register(&format!("uh{}", i + 1)).unwrap()).collect();
        let du = (0..n_uh).map(|i| reg.register(&format!("du{}", i + 1)).unwrap()).collect();
        Self { reg, t, e, x, xh, uh, du }
    }

    pub fn n_x(&self) -> usize {
        self.x.len()
    }

    /// Dense value buffer covering the whole registry.
    pub fn buffer(&self) -> Vec<f64> {
        vec![0.0; self.reg.len()]
    }

    pub fn fill(&self, buf: &mut [f64], vars: &[Variable], values: &[f64]) {
        for (v, val) in vars.iter().zip(values) {
            buf[v.index()] = *val;
        }
    }
}

/// Tracker drift/input dynamics: polynomial, or the exact bicycle model kept
/// in closed form for simulation.
#[derive(Debug, Clone)]
pub enum Dynamics {
    Poly { f: Vec<Poly>, g: Vec<Vec<Poly>> },
    Bicycle(VehicleParams),
}

/// High-fidelity tracking model.
#[derive(Debug, Clone)]
pub struct TrackerModel {
    pub n_x: usize,
    pub n_u: usize,
    pub dynamics: Dynamics,
    /// State constraints as polynomials in x, each `p(x) <= 0`.
    pub state_ineqs: Vec<Poly>,
    /// Input hypercube, one (lo, hi) per channel.
    pub u_box: Vec<(f64, f64)>,
}

impl TrackerModel {
    /// Exact right-hand side of the tracking model.
    pub fn rhs(&self, vars: &SysVars, x: &[f64], u: &[f64]) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::Poly { f, g } => {
                let mut buf = vars.buffer();
                vars.fill(&mut buf, &vars.x, x);
                let mut out: Vec<f64> = f.iter().map(|p| p.eval_slice(&buf)).collect();
                for (i, row) in g.iter().enumerate() {
                    for (c, p) in row.iter().enumerate() {
                        out[i] += p.eval_slice(&buf) * u[c];
                    }
                }
                out
            }
            Dynamics::Bicycle(p) => p.rhs(x, u),
        }
    }
}

/// Low-fidelity planning model.
#[derive(Debug, Clone)]
pub struct PlannerModel {
    pub n_x: usize,
    pub n_u: usize,
    pub dynamics: PlannerDynamics,
    pub xh_box: Option<Vec<(f64, f64)>>,
    pub uh_box: Vec<(f64, f64)>,
    pub du_box: Vec<(f64, f64)>,
    pub t_s: f64,
}

#[derive(Debug, Clone)]
pub enum PlannerDynamics {
    Poly { f: Vec<Poly> },
    Dubins,
}

impl PlannerModel {
    pub fn rhs(&self, vars: &SysVars, xh: &[f64], uh: &[f64]) -> Vec<f64> {
        match &self.dynamics {
            PlannerDynamics::Poly { f } => {
                let mut buf = vars.buffer();
                vars.fill(&mut buf, &vars.xh, xh);
                vars.fill(&mut buf, &vars.uh, uh);
                f.iter().map(|p| p.eval_slice(&buf)).collect()
            }
            PlannerDynamics::Dubins => {
                vec![uh[1] * xh[2].cos(), uh[1] * xh[2].sin(), uh[0]]
            }
        }
    }

    /// Advances the true planner ODE by `dt` under a held input. Dubins uses
    /// the closed-form arc/segment solution.
    pub fn exact_step(&self, vars: &SysVars, xh: &[f64], uh: &[f64], dt: f64) -> Vec<f64> {
        match &self.dynamics {
            PlannerDynamics::Dubins => {
                let (px, py, th) = (xh[0], xh[1], xh[2]);
                let (w, v) = (uh[0], uh[1]);
                if w.abs() < 1e-10 {
                    vec![px + v * dt * th.cos(), py + v * dt * th.sin(), th + w * dt]
                } else {
                    let th1 = th + w * dt;
                    vec![
                        px + v / w * (th1.sin() - th.sin()),
                        py - v / w * (th1.cos() - th.cos()),
                        th1,
                    ]
                }
            }
            PlannerDynamics::Poly { .. } => {
                // RK4 with fixed substeps; exact for the (affine) builtins.
                let mut state = xh.to_vec();
                let steps = 20;
                let h = dt / steps as f64;
                for _ in 0..steps {
                    let k1 = self.rhs(vars, &state, uh);
                    let s2: Vec<f64> = state.iter().zip(&k1).map(|(s, k)| s + 0.5 * h * k).collect();
                    let k2 = self.rhs(vars, &s2, uh);
                    let s3: Vec<f64> = state.iter().zip(&k2).map(|(s, k)| s + 0.5 * h * k).collect();
                    let k3 = self.rhs(vars, &s3, uh);
                    let s4: Vec<f64> = state.iter().zip(&k3).map(|(s, k)| s + h * k).collect();
                    let k4 = self.rhs(vars, &s4, uh);
                    for i in 0..state.len() {
                        state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                }
                state
            }
        }
    }
}

/// Error weighting: polynomial matrix with declared polynomial inverse, or
/// the exact planar rotation `phi = diag(R^-1(xh3), I)` used by the vehicle.
#[derive(Debug, Clone)]
pub enum PhiForm {
    Poly { phi: Vec<Vec<Poly>>, nu: Vec<Poly> },
    HeadingRotation,
}

#[derive(Debug, Clone)]
pub struct ComparisonMaps {
    /// pi(xh, uh), lifting to tracker state space.
    pub pi: Vec<Poly>,
    pub form: PhiForm,
}

impl ComparisonMaps {
    pub fn identity_phi(vars: &SysVars, pi: Vec<Poly>) -> Self {
        let n = vars.n_x();
        let mut phi = vec![vec![Poly::zero(&vars.reg); n]; n];
        for (i, row) in phi.iter_mut().enumerate() {
            row[i] = Poly::constant(&vars.reg, 1.0);
        }
        // nu = e + pi
        let nu = (0..n)
            .map(|i| Poly::var(&vars.reg, vars.e[i]).checked_add(&pi[i]).unwrap())
            .collect();
        Self { pi, form: PhiForm::Poly { phi, nu } }
    }

    /// e = phi(x, xh, uh) (x - pi(xh, uh)), numerically exact.
    pub fn error_of(&self, vars: &SysVars, x: &[f64], xh: &[f64], uh: &[f64]) -> Vec<f64> {
        let mut buf = vars.buffer();
        vars.fill(&mut buf, &vars.x, x);
        vars.fill(&mut buf, &vars.xh, xh);
        vars.fill(&mut buf, &vars.uh, uh);
        let diff: Vec<f64> = (0..x.len()).map(|i| x[i] - self.pi[i].eval_slice(&buf)).collect();
        match &self.form {
            PhiForm::Poly { phi, .. } => (0..x.len())
                .map(|i| (0..x.len()).map(|j| phi[i][j].eval_slice(&buf) * diff[j]).sum())
                .collect(),
            PhiForm::HeadingRotation => {
                let th = xh[2];
                let (s, c) = th.sin_cos();
                let mut e = diff;
                let (d0, d1) = (e[0], e[1]);
                // R(-th) [d0; d1]
                e[0] = c * d0 + s * d1;
                e[1] = -s * d0 + c * d1;
                e
            }
        }
    }

    /// x = nu(e, xh, uh), numerically exact.
    pub fn nu_of(&self, vars: &SysVars, e: &[f64], xh: &[f64], uh: &[f64]) -> Vec<f64> {
        let mut buf = vars.buffer();
        vars.fill(&mut buf, &vars.e, e);
        vars.fill(&mut buf, &vars.xh, xh);
        vars.fill(&mut buf, &vars.uh, uh);
        match &self.form {
            PhiForm::Poly { nu, .. } => nu.iter().map(|p| p.eval_slice(&buf)).collect(),
            PhiForm::HeadingRotation => {
                let th = xh[2];
                let (s, c) = th.sin_cos();
                let mut x: Vec<f64> = (0..e.len()).map(|i| self.pi[i].eval_slice(&buf)).collect();
                x[0] += c * e[0] - s * e[1];
                x[1] += s * e[0] + c * e[1];
                for i in 2..e.len() {
                    x[i] += e[i];
                }
                x
            }
        }
    }
}

/// Fit diagnostics for the polynomialized trig/reciprocal terms.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ApproxReport {
    pub sin_max_err: f64,
    pub cos_max_err: f64,
    pub inv_speed_max_err: f64,
    pub e3_range: f64,
    pub speed_range: (f64, f64),
}

/// Derived tracking-error system: polynomial error dynamics, jump function,
/// constraint sets, and the source models.
#[derive(Debug, Clone)]
pub struct ErrorSystem {
    pub vars: SysVars,
    pub tracker: TrackerModel,
    pub planner: PlannerModel,
    pub maps: ComparisonMaps,
    /// Drift of the error dynamics, in (e, xh, uh).
    pub f_e: Vec<Poly>,
    /// Input matrix of the error dynamics, n_x rows by n_u columns.
    pub g_e: Vec<Vec<Poly>>,
    /// Jump function h(e, xh, uh, du).
    pub jump: Vec<Poly>,
    /// Initial error set {p0(e) <= 0}.
    pub e0: Poly,
    pub approx: Option<ApproxReport>,
}

impl ErrorSystem {
    pub fn n_e(&self) -> usize {
        self.vars.n_x()
    }

    /// edot = f_e + g_e u at a numeric point (polynomialized dynamics).
    pub fn error_rhs(&self, e: &[f64], xh: &[f64], uh: &[f64], u: &[f64]) -> Vec<f64> {
        let mut buf = self.vars.buffer();
        self.vars.fill(&mut buf, &self.vars.e, e);
        self.vars.fill(&mut buf, &self.vars.xh, xh);
        self.vars.fill(&mut buf, &self.vars.uh, uh);
        let mut out: Vec<f64> = self.f_e.iter().map(|p| p.eval_slice(&buf)).collect();
        for (i, row) in self.g_e.iter().enumerate() {
            for (c, p) in row.iter().enumerate() {
                out[i] += p.eval_slice(&buf) * u[c];
            }
        }
        out
    }

    /// Exact error dynamics (true trig) where available; identical to the
    /// polynomial form for polynomial trackers.
    pub fn true_error_rhs(&self, e: &[f64], xh: &[f64], uh: &[f64], u: &[f64]) -> Vec<f64> {
        match &self.tracker.dynamics {
            Dynamics::Poly { .. } => self.error_rhs(e, xh, uh, u),
            Dynamics::Bicycle(p) => vehicle_true_error_rhs(p, e, uh, u),
        }
    }

    pub fn jump_eval(&self, e: &[f64], xh: &[f64], uh: &[f64], du: &[f64]) -> Vec<f64> {
        let mut buf = self.vars.buffer();
        self.vars.fill(&mut buf, &self.vars.e, e);
        self.vars.fill(&mut buf, &self.vars.xh, xh);
        self.vars.fill(&mut buf, &self.vars.uh, uh);
        self.vars.fill(&mut buf, &self.vars.du, du);
        self.jump.iter().map(|p| p.eval_slice(&buf)).collect()
    }
}

/// Derives `f_e`, `g_e` of the error dynamics
/// `edot = f_e(e,xh,uh) + g_e(e,xh,uh) u` with `x` eliminated through `nu`,
/// plus the jump function; requires polynomial dynamics and maps.
pub fn derive_error_system(
    vars: SysVars,
    tracker: TrackerModel,
    planner: PlannerModel,
    maps: ComparisonMaps,
    e0: Poly,
) -> Result<ErrorSystem, ModelError> {
    let n = vars.n_x();
    let (f, g) = match &tracker.dynamics {
        Dynamics::Poly { f, g } => (f.clone(), g.clone()),
        Dynamics::Bicycle(_) => {
            return Err(ModelError::Structural(
                "bicycle tracker requires the dedicated vehicle error-system constructor".into(),
            ))
        }
    };
    let f_hat = match &planner.dynamics {
        PlannerDynamics::Poly { f } => f.clone(),
        PlannerDynamics::Dubins => {
            return Err(ModelError::Structural(
                "Dubins planner requires the dedicated vehicle error-system constructor".into(),
            ))
        }
    };
    let PhiForm::Poly { phi, nu } = &maps.form else {
        return Err(ModelError::Structural(
            "rotation-form phi requires the dedicated vehicle error-system constructor".into(),
        ));
    };
    if f.len() != n || phi.len() != n || maps.pi.len() != n || nu.len() != n {
        return Err(ModelError::Dimension("tracker/map dimensions disagree".into()));
    }

    // Verify the declared inverse: phi(nu, xh, uh) (nu - pi) - e == 0.
    let nu_bind: BTreeMap<Variable, Poly> =
        vars.x.iter().cloned().zip(nu.iter().cloned()).collect();
    let mut max_resid = 0.0f64;
    for i in 0..n {
        let mut acc = Poly::zero(&vars.reg);
        for j in 0..n {
            let phi_ij = phi[i][j].substitute(&nu_bind);
            let diff = nu[j].sub(&maps.pi[j]);
            acc = acc.checked_add(&phi_ij.checked_mul(&diff)?)?;
        }
        let resid = acc.sub(&Poly::var(&vars.reg, vars.e[i]));
        max_resid = max_resid.max(resid.max_abs_coeff());
    }
    if max_resid > 1e-8 {
        return Err(ModelError::InverseCheck(max_resid));
    }

    // d/dt phi along the flow contributes drift terms (via f and f_hat) to
    // f_e and input terms (via g) to g_e.
    let mut f_e = Vec::with_capacity(n);
    let mut g_e = vec![vec![Poly::zero(&vars.reg); tracker.n_u]; n];
    for i in 0..n {
        let mut fe_i = Poly::zero(&vars.reg);
        for j in 0..n {
            let diff_j = Poly::var(&vars.reg, vars.x[j]).sub(&maps.pi[j]);
            let mut phidot = Poly::zero(&vars.reg);
            for k in 0..n {
                phidot =
                    phidot.checked_add(&phi[i][j].differentiate(vars.x[k]).checked_mul(&f[k])?)?;
            }
            for (k, fh) in f_hat.iter().enumerate() {
                phidot =
                    phidot.checked_add(&phi[i][j].differentiate(vars.xh[k]).checked_mul(fh)?)?;
            }
            fe_i = fe_i.checked_add(&phidot.checked_mul(&diff_j)?)?;
            // phi (f - dpi/dxh f_hat)
            let mut inner = f[j].clone();
            for (k, fh) in f_hat.iter().enumerate() {
                inner = inner.sub(&maps.pi[j].differentiate(vars.xh[k]).checked_mul(fh)?);
            }
            fe_i = fe_i.checked_add(&phi[i][j].checked_mul(&inner)?)?;
            // Input columns: (dphi/dx_k g_kc)(x_j - pi_j) + phi_ij g_jc.
            for c in 0..tracker.n_u {
                let mut gcol = Poly::zero(&vars.reg);
                for k in 0..n {
                    gcol = gcol
                        .checked_add(&phi[i][j].differentiate(vars.x[k]).checked_mul(&g[k][c])?)?;
                }
                let term =
                    gcol.checked_mul(&diff_j)?.checked_add(&phi[i][j].checked_mul(&g[j][c])?)?;
                g_e[i][c] = g_e[i][c].checked_add(&term.substitute(&nu_bind))?;
            }
        }
        f_e.push(fe_i.substitute(&nu_bind));
    }

    let jump = derive_jump(&vars, &maps)?;
    Ok(ErrorSystem { vars, tracker, planner, maps, f_e, g_e, jump, e0, approx: None })
}

/// Jump function h(e, xh, uh, du): the error immediately after the planner
/// input steps by `du`, with the tracker state held fixed.
pub fn derive_jump(vars: &SysVars, maps: &ComparisonMaps) -> Result<Vec<Poly>, ModelError> {
    let n = vars.n_x();
    let PhiForm::Poly { phi, nu } = &maps.form else {
        // Rotation phi with pi = [xh; uh; 0]: the rotation block multiplies
        // zero rows of the input shift, so h = e - [0,0,0, du1, du2, 0].
        let mut h = Vec::with_capacity(n);
        for i in 0..n {
            let mut hi = Poly::var(&vars.reg, vars.e[i]);
            if i >= 3 && i - 3 < vars.du.len() {
                hi = hi.sub(&Poly::var(&vars.reg, vars.du[i - 3]));
            }
            h.push(hi);
        }
        return Ok(h);
    };
    // uh -> uh + du in phi and pi; x -> nu(e, xh, uh) afterwards.
    let shift: BTreeMap<Variable, Poly> = vars
        .uh
        .iter()
        .zip(&vars.du)
        .map(|(u, d)| {
            (*u, Poly::var(&vars.reg, *u).checked_add(&Poly::var(&vars.reg, *d)).unwrap())
        })
        .collect();
    let nu_bind: BTreeMap<Variable, Poly> =
        vars.x.iter().cloned().zip(nu.iter().cloned()).collect();
    let mut h = Vec::with_capacity(n);
    for i in 0..n {
        let mut hi = Poly::zero(&vars.reg);
        for j in 0..n {
            let phi_shift = phi[i][j].substitute(&shift).substitute(&nu_bind);
            let xj = nu[j].clone();
            let pij = maps.pi[j].substitute(&shift);
            hi = hi.checked_add(&phi_shift.checked_mul(&xj.sub(&pij))?)?;
        }
        h.push(hi);
    }
    Ok(h)
}

// ---- polynomial fitting ----

/// Least-squares polynomial fit on a 1001-point uniform grid; returns
/// power-basis coefficients (constant first) and the max absolute error.
pub fn fit_on_grid(range: (f64, f64), degree: usize, f: impl Fn(f64) -> f64) -> (Vec<f64>, f64) {
    let npts = 1001;
    let (a, b) = range;
    if (b - a).abs() < 1e-15 {
        let mut coeffs = vec![0.0; degree + 1];
        coeffs[0] = f(a);
        return (coeffs, 0.0);
    }
    let xs: Vec<f64> = (0..npts).map(|i| a + (b - a) * i as f64 / (npts - 1) as f64).collect();
    let mut vand = nalgebra::DMatrix::<f64>::zeros(npts, degree + 1);
    for (i, &x) in xs.iter().enumerate() {
        let mut p = 1.0;
        for j in 0..=degree {
            vand[(i, j)] = p;
            p *= x;
        }
    }
    let ys = nalgebra::DVector::from_iterator(npts, xs.iter().map(|&x| f(x)));
    let coeffs = vand.svd(true, true).solve(&ys, 1e-14).expect("least-squares fit");
    let mut max_err = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let mut acc = 0.0;
        let mut p = 1.0;
        for j in 0..=degree {
            acc += coeffs[j] * p;
            p *= x;
        }
        max_err = max_err.max((acc - ys[i]).abs());
    }
    (coeffs.iter().copied().collect(), max_err)
}

/// Builds a polynomial in `expr` from power-basis coefficients.
fn poly_in(expr: &Poly, coeffs: &[f64]) -> Poly {
    let reg = expr.registry().clone();
    let mut acc = Poly::zero(&reg);
    let mut pow = Poly::constant(&reg, 1.0);
    for &c in coeffs {
        acc = acc.checked_add(&pow.scale(c)).unwrap();
        pow = pow.checked_mul(expr).unwrap();
    }
    acc
}

/// Least-squares sin/cos approximations over a range.
pub struct TrigApprox {
    pub sin: Poly,
    pub cos: Poly,
    pub sin_max_err: f64,
    pub cos_max_err: f64,
}

pub fn approx_trig(var_poly: &Poly, range: (f64, f64), degree: usize) -> TrigApprox {
    let (sc, se) = fit_on_grid(range, degree, f64::sin);
    let (cc, ce) = fit_on_grid(range, degree, f64::cos);
    TrigApprox {
        sin: poly_in(var_poly, &sc),
        cos: poly_in(var_poly, &cc),
        sin_max_err: se,
        cos_max_err: ce,
    }
}

// ---- builtin: double/single integrator pair ----

/// Double/single integrator pair configuration (planner input is the
/// reference velocity, applied zero-order hold).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub t_s: f64,
    pub uh_limit: f64,
    pub du_limit: f64,
    pub u_limit: f64,
    pub e0_radius_sq: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { t_s: 0.1, uh_limit: 1.0, du_limit: 0.05, u_limit: 50.0, e0_radius_sq: 0.01 }
    }
}

/// Double-integrator tracker with a single-integrator planner;
/// `pi(xh, uh) = [xh; uh]`, `phi = I`.
pub fn builtin_integrator_pair(cfg: &IntegratorConfig) -> Result<ErrorSystem, ModelError> {
    let vars = SysVars::new(2, 1, 1);
    let reg = &vars.reg;
    let f = vec![Poly::var(reg, vars.x[1]), Poly::zero(reg)];
    let g = vec![vec![Poly::zero(reg)], vec![Poly::constant(reg, 1.0)]];
    let tracker = TrackerModel {
        n_x: 2,
        n_u: 1,
        dynamics: Dynamics::Poly { f, g },
        state_ineqs: vec![],
        u_box: vec![(-cfg.u_limit, cfg.u_limit)],
    };
    let planner = PlannerModel {
        n_x: 1,
        n_u: 1,
        dynamics: PlannerDynamics::Poly { f: vec![Poly::var(reg, vars.uh[0])] },
        xh_box: None,
        uh_box: vec![(-cfg.uh_limit, cfg.uh_limit)],
        du_box: vec![(-cfg.du_limit, cfg.du_limit)],
        t_s: cfg.t_s,
    };
    let pi = vec![Poly::var(reg, vars.xh[0]), Poly::var(reg, vars.uh[0])];
    let maps = ComparisonMaps::identity_phi(&vars, pi);
    let e0 = ball_poly(&vars, cfg.e0_radius_sq);
    derive_error_system(vars, tracker, planner, maps, e0)
}

fn ball_poly(vars: &SysVars, radius_sq: f64) -> Poly {
    let mut p = Poly::constant(&vars.reg, -radius_sq);
    for v in &vars.e {
        p = p.checked_add(&Poly::from_terms(&vars.reg, [(Monomial::var_pow(*v, 2), 1.0)])).unwrap();
    }
    p
}

// ---- builtin: dynamic bicycle / Dubins pair ----

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub mass: f64,
    pub i_z: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub c_alpha_f: f64,
    pub c_alpha_r: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1.67e3,
            i_z: 2.1e3,
            l_f: 0.99,
            l_r: 1.7,
            c_alpha_f: -6.1595e4,
            c_alpha_r: -5.2095e4,
        }
    }
}

impl VehicleParams {
    /// Exact bicycle dynamics: states (px, py, heading, yaw rate, long. speed,
    /// lat. speed), inputs (front steering angle, longitudinal acceleration).
    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let alpha_f = (x[5] + self.l_f * x[3]) / x[4] - u[0];
        let alpha_r = (x[5] - self.l_r * x[3]) / x[4];
        let fcf = self.c_alpha_f * alpha_f;
        let fcr = self.c_alpha_r * alpha_r;
        vec![
            x[4] * x[2].cos() - x[5] * x[2].sin(),
            x[4] * x[2].sin() + x[5] * x[2].cos(),
            x[3],
            2.0 / self.i_z * (self.l_f * fcf - self.l_r * fcr),
            x[3] * x[5] + u[1],
            -x[3] * x[4] + 2.0 / self.mass * (fcf + fcr),
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleConfig {
    pub params: VehicleParams,
    pub t_s: f64,
    /// Planner input box: (angular velocity, speed).
    pub uh_box: Vec<(f64, f64)>,
    pub du_box: Vec<(f64, f64)>,
    /// Tracker input box: (steering, longitudinal acceleration).
    pub u_box: Vec<(f64, f64)>,
    /// Heading-error range for the trig fits.
    pub e3_range: f64,
    pub sin_degree: usize,
    pub cos_degree: usize,
    /// Speed range covered by the reciprocal fit (planner speeds plus error
    /// margin) and its degree.
    pub speed_range: (f64, f64),
    pub inv_degree: usize,
    pub e0_radius_sq: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        let pi = std::f64::consts::PI;
        Self {
            params: VehicleParams::default(),
            t_s: 0.1,
            uh_box: vec![(-pi / 8.0, pi / 8.0), (2.0, 4.0)],
            du_box: vec![(-pi / 50.0, pi / 50.0), (-0.075, 0.075)],
            u_box: vec![(-1.2, 1.2), (-6.0, 6.0)],
            e3_range: 1.05,
            // Degree 2 keeps the closed-loop decrease expression at degree 4,
            // which is what degree-2 storage/multiplier parameterizations can
            // certify; the fit error is reported and audited in simulation.
            sin_degree: 2,
            cos_degree: 2,
            speed_range: (1.5, 4.5),
            inv_degree: 2,
            e0_radius_sq: 0.01,
        }
    }
}

/// Bicycle tracker with Dubins planner, `pi(xh, uh) = [xh; uh; 0]` and
/// `phi = diag(R^-1(xh3), I_4)`. The rotation turns heading trig into trig in
/// `e3`, which is then fit with polynomials on the certified range; the
/// slip-angle `1/x5` terms are fit over the planner speed range widened by
/// the expected speed error.
pub fn builtin_vehicle_pair(cfg: &VehicleConfig) -> Result<ErrorSystem, ModelError> {
    let vars = SysVars::new(6, 3, 2);
    let reg = &vars.reg;
    let p = cfg.params;
    let e = |i: usize| Poly::var(reg, vars.e[i]);
    let uh = |i: usize| Poly::var(reg, vars.uh[i]);

    let e3 = e(2);
    let (sin_c, sin_err) = fit_on_grid((-cfg.e3_range, cfg.e3_range), cfg.sin_degree, f64::sin);
    let (cos_c, cos_err) = fit_on_grid((-cfg.e3_range, cfg.e3_range), cfg.cos_degree, f64::cos);
    let sin_e3 = poly_in(&e3, &sin_c);
    let cos_e3 = poly_in(&e3, &cos_c);

    // 1/x5 with x5 = e5 + uh2.
    let speed = e(4).checked_add(&uh(1))?;
    let (inv_c, inv_err) = fit_on_grid(cfg.speed_range, cfg.inv_degree, |s| 1.0 / s);
    let inv_speed = poly_in(&speed, &inv_c);

    // Body-frame states in error coordinates: x4 = e4+uh1, x5 = e5+uh2, x6 = e6.
    let x4 = e(3).checked_add(&uh(0))?;
    let x5 = speed.clone();
    let x6 = e(5);

    // Slip angles with the steering input split into g_e.
    let alpha_f0 = x6.checked_add(&x4.scale(p.l_f))?.checked_mul(&inv_speed)?;
    let alpha_r = x6.sub(&x4.scale(p.l_r)).checked_mul(&inv_speed)?;

    let fe1 = uh(0)
        .checked_mul(&e(1))?
        .sub(&uh(1))
        .checked_add(&cos_e3.checked_mul(&x5)?)?
        .sub(&sin_e3.checked_mul(&x6)?);
    let fe2 = uh(0)
        .checked_mul(&e(0))?
        .scale(-1.0)
        .checked_add(&sin_e3.checked_mul(&x5)?)?
        .checked_add(&cos_e3.checked_mul(&x6)?)?;
    let fe3 = e(3);
    let fe4 = alpha_f0
        .scale(2.0 / p.i_z * p.l_f * p.c_alpha_f)
        .checked_add(&alpha_r.scale(-2.0 / p.i_z * p.l_r * p.c_alpha_r))?;
    let fe5 = x4.checked_mul(&x6)?;
    let fe6 = x4
        .checked_mul(&x5)?
        .scale(-1.0)
        .checked_add(&alpha_f0.scale(2.0 / p.mass * p.c_alpha_f))?
        .checked_add(&alpha_r.scale(2.0 / p.mass * p.c_alpha_r))?;
    let f_e = vec![fe1, fe2, fe3, fe4, fe5, fe6];

    let zero = Poly::zero(reg);
    let g_e = vec![
        vec![zero.clone(), zero.clone()],
        vec![zero.clone(), zero.clone()],
        vec![zero.clone(), zero.clone()],
        vec![Poly::constant(reg, -2.0 / p.i_z * p.l_f * p.c_alpha_f), zero.clone()],
        vec![zero.clone(), Poly::constant(reg, 1.0)],
        vec![Poly::constant(reg, -2.0 / p.mass * p.c_alpha_f), zero.clone()],
    ];

    let tracker = TrackerModel {
        n_x: 6,
        n_u: 2,
        dynamics: Dynamics::Bicycle(p),
        state_ineqs: vec![],
        u_box: cfg.u_box.clone(),
    };
    let planner = PlannerModel {
        n_x: 3,
        n_u: 2,
        dynamics: PlannerDynamics::Dubins,
        xh_box: None,
        uh_box: cfg.uh_box.clone(),
        du_box: cfg.du_box.clone(),
        t_s: cfg.t_s,
    };
    let pi_map = vec![
        Poly::var(reg, vars.xh[0]),
        Poly::var(reg, vars.xh[1]),
        Poly::var(reg, vars.xh[2]),
        uh(0),
        uh(1),
        Poly::zero(reg),
    ];
    let maps = ComparisonMaps { pi: pi_map, form: PhiForm::HeadingRotation };
    let jump = derive_jump(&vars, &maps)?;
    let e0 = ball_poly(&vars, cfg.e0_radius_sq);
    Ok(ErrorSystem {
        vars,
        tracker,
        planner,
        maps,
        f_e,
        g_e,
        jump,
        e0,
        approx: Some(ApproxReport {
            sin_max_err: sin_err,
            cos_max_err: cos_err,
            inv_speed_max_err: inv_err,
            e3_range: cfg.e3_range,
            speed_range: cfg.speed_range,
        }),
    })
}

/// Exact (true-trig) error dynamics of the vehicle pair, used to audit the
/// polynomial approximation.
fn vehicle_true_error_rhs(p: &VehicleParams, e: &[f64], uh: &[f64], u: &[f64]) -> Vec<f64> {
    let x4 = e[3] + uh[0];
    let x5 = e[4] + uh[1];
    let x6 = e[5];
    let alpha_f = (x6 + p.l_f * x4) / x5 - u[0];
    let alpha_r = (x6 - p.l_r * x4) / x5;
    let fcf = p.c_alpha_f * alpha_f;
    let fcr = p.c_alpha_r * alpha_r;
    let (s3, c3) = e[2].sin_cos();
    vec![
        uh[0] * e[1] - uh[1] + c3 * x5 - s3 * x6,
        -uh[0] * e[0] + s3 * x5 + c3 * x6,
        e[3],
        2.0 / p.i_z * (p.l_f * fcf - p.l_r * fcr),
        x4 * x6 + u[1],
        -x4 * x5 + 2.0 / p.mass * (fcf + fcr),
    ]
}

// ---- JSON-definable custom pairs ----

/// Term-list polynomial: coefficient plus variable-name exponents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyData {
    pub terms: Vec<TermData>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermData {
    pub coeff: f64,
    #[serde(default)]
    pub monomial: BTreeMap<String, u16>,
}

impl PolyData {
    pub fn from_poly(p: &Poly) -> Self {
        let reg = p.registry();
        let terms = p
            .terms()
            .map(|(m, c)| {
                let mut monomial = BTreeMap::new();
                for v in m.support() {
                    monomial.insert(reg.name(v), m.exp(v));
                }
                TermData { coeff: c, monomial }
            })
            .collect();
        Self { terms }
    }

    pub fn to_poly(&self, reg: &Arc<VarRegistry>) -> Result<Poly, ModelError> {
        let mut terms = Vec::new();
        for t in &self.terms {
            let mut m = Monomial::one();
            for (name, &exp) in &t.monomial {
                let v = reg
                    .lookup(name)
                    .ok_or_else(|| ModelError::Structural(format!("unknown variable `{name}`")))?;
                m = m.mul(&Monomial::var_pow(v, exp));
            }
            terms.push((m, t.coeff));
        }
        Ok(Poly::from_terms(reg, terms))
    }
}

/// Inline model-pair definition mirroring the builtin structure. Dynamics are
/// written over variables `x1..`, `xh1..`, `uh1..`; error variables `e1..`
/// are available to `nu`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomPairConfig {
    pub tracker_states: usize,
    pub tracker_inputs: usize,
    pub tracker_f: Vec<PolyData>,
    pub tracker_g: Vec<Vec<PolyData>>,
    pub tracker_u_box: Vec<(f64, f64)>,
    #[serde(default)]
    pub tracker_state_ineqs: Vec<PolyData>,
    pub planner_states: usize,
    pub planner_inputs: usize,
    pub planner_f: Vec<PolyData>,
    #[serde(default)]
    pub planner_x_box: Option<Vec<(f64, f64)>>,
    pub planner_u_box: Vec<(f64, f64)>,
    pub planner_du_box: Vec<(f64, f64)>,
    pub t_s: f64,
    /// pi(xh, uh) rows, one per tracker state.
    pub pi: Vec<PolyData>,
    /// Optional phi rows (defaults to identity); entries in (x, xh, uh).
    #[serde(default)]
    pub phi: Option<Vec<Vec<PolyData>>>,
    /// Declared inverse nu in (e, xh, uh); required when phi is given.
    #[serde(default)]
    pub nu: Option<Vec<PolyData>>,
    #[serde(default = "default_e0_radius")]
    pub e0_radius_sq: f64,
}

fn default_e0_radius() -> f64 {
    0.01
}

pub fn build_custom_pair(cfg: &CustomPairConfig) -> Result<ErrorSystem, ModelError> {
    if cfg.t_s <= 0.0 {
        return Err(ModelError::Structural("sampling time must be positive".into()));
    }
    let vars = SysVars::new(cfg.tracker_states, cfg.planner_states, cfg.planner_inputs);
    let reg = &vars.reg;
    let f: Vec<Poly> = cfg.tracker_f.iter().map(|p| p.to_poly(reg)).collect::<Result<_, _>>()?;
    let g: Vec<Vec<Poly>> = cfg
        .tracker_g
        .iter()
        .map(|row| row.iter().map(|p| p.to_poly(reg)).collect::<Result<_, _>>())
        .collect::<Result<_, _>>()?;
    if f.len() != cfg.tracker_states || g.len() != cfg.tracker_states {
        return Err(ModelError::Dimension("tracker dynamics rows".into()));
    }
    let tracker = TrackerModel {
        n_x: cfg.tracker_states,
        n_u: cfg.tracker_inputs,
        dynamics: Dynamics::Poly { f, g },
        state_ineqs: cfg
            .tracker_state_ineqs
            .iter()
            .map(|p| p.to_poly(reg))
            .collect::<Result<_, _>>()?,
        u_box: cfg.tracker_u_box.clone(),
    };
    let planner = PlannerModel {
        n_x: cfg.planner_states,
        n_u: cfg.planner_inputs,
        dynamics: PlannerDynamics::Poly {
            f: cfg.planner_f.iter().map(|p| p.to_poly(reg)).collect::<Result<_, _>>()?,
        },
        xh_box: cfg.planner_x_box.clone(),
        uh_box: cfg.planner_u_box.clone(),
        du_box: cfg.planner_du_box.clone(),
        t_s: cfg.t_s,
    };
    let pi: Vec<Poly> = cfg.pi.iter().map(|p| p.to_poly(reg)).collect::<Result<_, _>>()?;
    let maps = match (&cfg.phi, &cfg.nu) {
        (None, None) => ComparisonMaps::identity_phi(&vars, pi),
        (Some(phi), Some(nu)) => ComparisonMaps {
            pi,
            form: PhiForm::Poly {
                phi: phi
                    .iter()
                    .map(|row| row.iter().map(|p| p.to_poly(reg)).collect::<Result<_, _>>())
                    .collect::<Result<_, _>>()?,
                nu: nu.iter().map(|p| p.to_poly(reg)).collect::<Result<_, _>>()?,
            },
        },
        _ => {
            return Err(ModelError::Structural(
                "phi and nu must be provided together (or both omitted for identity)".into(),
            ))
        }
    };
    let e0 = ball_poly(&vars, cfg.e0_radius_sq);
    derive_error_system(vars, tracker, planner, maps, e0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrator_pair_matches_example_dynamics() {
        let sys = builtin_integrator_pair(&IntegratorConfig::default()).unwrap();
        assert_eq!(sys.tracker.n_x, 2);
        assert_eq!(sys.tracker.n_u, 1);
        assert_eq!(sys.planner.n_x, 1);
        assert_eq!(sys.planner.n_u, 1);
        // f_e = [e2; 0], g_e = [0; 1]
        let e2 = Poly::var(&sys.vars.reg, sys.vars.e[1]);
        assert_eq!(sys.f_e[0], e2);
        assert!(sys.f_e[1].is_zero());
        assert!(sys.g_e[0][0].is_zero());
        assert_eq!(sys.g_e[1][0], Poly::constant(&sys.vars.reg, 1.0));
        // pi = [xh; uh]
        assert_eq!(sys.maps.pi[0], Poly::var(&sys.vars.reg, sys.vars.xh[0]));
        assert_eq!(sys.maps.pi[1], Poly::var(&sys.vars.reg, sys.vars.uh[0]));
    }

    #[test]
    fn integrator_jump_subtracts_input_step() {
        let sys = builtin_integrator_pair(&IntegratorConfig::default()).unwrap();
        // h = e - [0; du]
        let e1 = Poly::var(&sys.vars.reg, sys.vars.e[0]);
        let want1 =
            Poly::var(&sys.vars.reg, sys.vars.e[1]).sub(&Poly::var(&sys.vars.reg, sys.vars.du[0]));
        assert_eq!(sys.jump[0], e1);
        assert_eq!(sys.jump[1], want1);
        // du = 0 -> h = e.
        let h = sys.jump_eval(&[0.3, -0.7], &[0.0], &[0.2], &[0.0]);
        assert!((h[0] - 0.3).abs() < 1e-12 && (h[1] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn identical_models_give_pure_feedback_error_flow() {
        // Tracker mirrors the planner drift through pi = xh: the derived
        // error drift depends on e alone.
        let vars = SysVars::new(1, 1, 0);
        let reg = &vars.reg;
        let tracker = TrackerModel {
            n_x: 1,
            n_u: 1,
            dynamics: Dynamics::Poly {
                f: vec![Poly::var(reg, vars.x[0]).scale(-1.0)],
                g: vec![vec![Poly::constant(reg, 1.0)]],
            },
            state_ineqs: vec![],
            u_box: vec![(-1.0, 1.0)],
        };
        let planner = PlannerModel {
            n_x: 1,
            n_u: 0,
            dynamics: PlannerDynamics::Poly { f: vec![Poly::var(reg, vars.xh[0]).scale(-1.0)] },
            xh_box: None,
            uh_box: vec![],
            du_box: vec![],
            t_s: 0.1,
        };
        let pi = vec![Poly::var(reg, vars.xh[0])];
        let maps = ComparisonMaps::identity_phi(&vars, pi);
        let e0 = ball_poly(&vars, 0.01);
        let sys = derive_error_system(vars, tracker, planner, maps, e0).unwrap();
        let want = Poly::var(&sys.vars.reg, sys.vars.e[0]).scale(-1.0);
        assert_eq!(sys.f_e[0], want);
        // At e = 0 the error flow vanishes.
        assert!(sys.error_rhs(&[0.0], &[1.0], &[], &[0.0])[0].abs() < 1e-12);
    }

    #[test]
    fn inverse_check_rejects_wrong_nu() {
        let vars = SysVars::new(1, 1, 0);
        let reg = &vars.reg;
        let tracker = TrackerModel {
            n_x: 1,
            n_u: 1,
            dynamics: Dynamics::Poly {
                f: vec![Poly::zero(reg)],
                g: vec![vec![Poly::constant(reg, 1.0)]],
            },
            state_ineqs: vec![],
            u_box: vec![(-1.0, 1.0)],
        };
        let planner = PlannerModel {
            n_x: 1,
            n_u: 0,
            dynamics: PlannerDynamics::Poly { f: vec![Poly::zero(reg)] },
            xh_box: None,
            uh_box: vec![],
            du_box: vec![],
            t_s: 0.1,
        };
        let pi = vec![Poly::var(reg, vars.xh[0])];
        let mut maps = ComparisonMaps::identity_phi(&vars, pi);
        if let PhiForm::Poly { nu, .. } = &mut maps.form {
            nu[0] = nu[0].scale(2.0);
        }
        let e0 = ball_poly(&vars, 0.01);
        let err = derive_error_system(vars, tracker, planner, maps, e0);
        assert!(matches!(err, Err(ModelError::InverseCheck(_))));
    }

    #[test]
    fn trig_fit_errors_within_spec() {
        let reg = VarRegistry::new();
        let x = reg.register("x").unwrap();
        let xp = Poly::var(&reg, x);
        let (_, cos_err) = fit_on_grid((-1.05, 1.05), 2, f64::cos);
        assert!(cos_err <= 0.02, "cos degree-2 max err {cos_err}");
        let (_, sin_err) = fit_on_grid((-1.05, 1.05), 3, f64::sin);
        assert!(sin_err <= 0.01, "sin degree-3 max err {sin_err}");
        // Degenerate range pins the exact point value.
        let t = approx_trig(&xp, (0.0, 0.0), 3);
        assert!(t.sin.is_zero());
        assert!((t.cos.coeff(&Monomial::one()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vehicle_error_dynamics_structure() {
        let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
        // Row 5 contains (e4 + uh1) e6: check both cross terms.
        let m = Monomial::var(sys.vars.e[3]).mul(&Monomial::var(sys.vars.e[5]));
        assert!((sys.f_e[4].coeff(&m) - 1.0).abs() < 1e-12, "e4*e6 in row 5");
        let m2 = Monomial::var(sys.vars.uh[0]).mul(&Monomial::var(sys.vars.e[5]));
        assert!((sys.f_e[4].coeff(&m2) - 1.0).abs() < 1e-12, "uh1*e6 in row 5");
        // g_e row 5 is [0, 1]; row 4 couples steering only.
        assert!(sys.g_e[4][0].is_zero());
        assert_eq!(sys.g_e[4][1], Poly::constant(&sys.vars.reg, 1.0));
        assert!(sys.g_e[3][1].is_zero());
        assert!(!sys.g_e[3][0].is_zero());

        // Jump: rows 1-3 and 6 unchanged, e4+ = e4 - du1, e5+ = e5 - du2.
        let e = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        let h = sys.jump_eval(&e, &[0.0, 0.0, 0.0], &[0.1, 3.0], &[0.01, -0.02]);
        assert!((h[0] - 0.1).abs() < 1e-12);
        assert!((h[1] + 0.2).abs() < 1e-12);
        assert!((h[2] - 0.3).abs() < 1e-12);
        assert!((h[3] - (0.4 - 0.01)).abs() < 1e-12);
        assert!((h[4] - (0.5 + 0.02)).abs() < 1e-12);
        assert!((h[5] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn vehicle_polynomial_rhs_tracks_true_rhs() {
        let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
        let rep = sys.approx.clone().unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = match sys.tracker.dynamics {
            Dynamics::Bicycle(p) => p,
            _ => unreachable!(),
        };
        // Trig errors enter rows 1-2 scaled by body velocities; the
        // reciprocal error feeds rows 4 and 6 through the tire stiffness.
        let tire_scale = 2.0 / p.i_z.min(p.mass / (p.l_f + p.l_r))
            * (p.l_f * p.c_alpha_f.abs() + p.l_r * p.c_alpha_r.abs());
        let budget =
            (rep.sin_max_err + rep.cos_max_err) * 6.0 + rep.inv_speed_max_err * tire_scale * 2.0 + 1e-9;
        for _ in 0..2000 {
            let e: Vec<f64> = vec![
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ];
            let uh = vec![rng.gen_range(-0.39..0.39), rng.gen_range(2.0..4.0)];
            let u = vec![rng.gen_range(-0.5..0.5), rng.gen_range(-2.0..2.0)];
            let approx = sys.error_rhs(&e, &[0.0; 3], &uh, &u);
            let exact = sys.true_error_rhs(&e, &[0.0; 3], &uh, &u);
            for i in 0..6 {
                assert!(
                    (approx[i] - exact[i]).abs() <= budget,
                    "row {i}: {} vs {} (budget {budget})",
                    approx[i],
                    exact[i]
                );
            }
        }
    }

    #[test]
    fn error_definition_consistent_with_nu() {
        let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10_000 {
            let e: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xh =
                vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0)];
            let uh = vec![rng.gen_range(-0.39..0.39), rng.gen_range(2.0..4.0)];
            let x = sys.maps.nu_of(&sys.vars, &e, &xh, &uh);
            let back = sys.maps.error_of(&sys.vars, &x, &xh, &uh);
            for i in 0..6 {
                assert!((back[i] - e[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn coupled_simulation_cross_check_integrator() {
        // d/dt of phi (x - pi) along trajectories matches f_e + g_e u within
        // sampling periods (RK4 reference; polynomial models are exact).
        let sys = builtin_integrator_pair(&IntegratorConfig::default()).unwrap();
        let mut x = vec![0.4, -0.1];
        let mut xh = vec![0.0];
        let uh = vec![0.5];
        let kappa = |e: &[f64]| vec![-e[0] - 2.0 * e[1]];
        let h = 1e-3;
        for _ in 0..200 {
            let e_now = sys.maps.error_of(&sys.vars, &x, &xh, &uh);
            let u = kappa(&e_now);
            let predicted = sys.error_rhs(&e_now, &xh, &uh, &u);
            let step = |x: &Vec<f64>, xh: &Vec<f64>| {
                let e = sys.maps.error_of(&sys.vars, x, xh, &uh);
                let u = kappa(&e);
                (sys.tracker.rhs(&sys.vars, x, &u), sys.planner.rhs(&sys.vars, xh, &uh))
            };
            let (k1x, k1h) = step(&x, &xh);
            let ax: Vec<f64> = x.iter().zip(&k1x).map(|(a, k)| a + 0.5 * h * k).collect();
            let ah: Vec<f64> = xh.iter().zip(&k1h).map(|(a, k)| a + 0.5 * h * k).collect();
            let (k2x, k2h) = step(&ax, &ah);
            let bx: Vec<f64> = x.iter().zip(&k2x).map(|(a, k)| a + 0.5 * h * k).collect();
            let bh: Vec<f64> = xh.iter().zip(&k2h).map(|(a, k)| a + 0.5 * h * k).collect();
            let (k3x, k3h) = step(&bx, &bh);
            let cx: Vec<f64> = x.iter().zip(&k3x).map(|(a, k)| a + h * k).collect();
            let ch: Vec<f64> = xh.iter().zip(&k3h).map(|(a, k)| a + h * k).collect();
            let (k4x, k4h) = step(&cx, &ch);
            let x_next: Vec<f64> = (0..2)
                .map(|i| x[i] + h / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i]))
                .collect();
            let xh_next: Vec<f64> = (0..1)
                .map(|i| xh[i] + h / 6.0 * (k1h[i] + 2.0 * k2h[i] + 2.0 * k3h[i] + k4h[i]))
                .collect();
            let e_next = sys.maps.error_of(&sys.vars, &x_next, &xh_next, &uh);
            let fd: Vec<f64> = (0..2).map(|i| (e_next[i] - e_now[i]) / h).collect();
            for i in 0..2 {
                let scale = predicted[i].abs().max(1.0);
                assert!(
                    (fd[i] - predicted[i]).abs() / scale < 1e-3,
                    "row {i}: fd {} vs {}",
                    fd[i],
                    predicted[i]
                );
            }
            x = x_next;
            xh = xh_next;
        }
    }

    #[test]
    fn custom_pair_roundtrip() {
        // Scalar pair: tracker xdot = -x + u, planner pinned at zero.
        let cfg = CustomPairConfig {
            tracker_states: 1,
            tracker_inputs: 1,
            tracker_f: vec![PolyData {
                terms: vec![TermData { coeff: -1.0, monomial: [("x1".to_string(), 1)].into() }],
            }],
            tracker_g: vec![vec![PolyData {
                terms: vec![TermData { coeff: 1.0, monomial: BTreeMap::new() }],
            }]],
            tracker_u_box: vec![(-1.0, 1.0)],
            tracker_state_ineqs: vec![],
            planner_states: 1,
            planner_inputs: 0,
            planner_f: vec![PolyData { terms: vec![] }],
            planner_x_box: None,
            planner_u_box: vec![],
            planner_du_box: vec![],
            t_s: 0.1,
            pi: vec![PolyData { terms: vec![] }],
            phi: None,
            nu: None,
            e0_radius_sq: 0.25,
        };
        let sys = build_custom_pair(&cfg).unwrap();
        // pi = 0 so x = e: f_e = -e, g_e = 1.
        let want = Poly::var(&sys.vars.reg, sys.vars.e[0]).scale(-1.0);
        assert_eq!(sys.f_e[0], want);
        assert_eq!(sys.g_e[0][0], Poly::constant(&sys.vars.reg, 1.0));
    }
}
