//! End-to-end synthesis pipelines: time-invariant and time-varying funnel
//! synthesis, TEB extraction, safety checking, and the shrink-and-retry
//! outer loop.
//!
//! The storage function `V` and controller `kappa` are found by alternating
//! convex SOS programs (see [`crate::bilinear`]); this module owns the two
//! program templates, the LQR/Lyapunov seeding of `V`, and everything that
//! consumes a certified funnel.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilinear::{
    alternate, initialize_v0, AlternationError, AlternationOptions, AlternationReport,
    BilinearSosProblem, InitOptions, KappaGroup,
};
use crate::conic::SolverSettings;
use crate::linalg;
use crate::models::{ErrorSystem, PhiForm};
use crate::poly::{Monomial, MonomialBasis, Poly, Variable};
use crate::sosprog::{AffForm, Certificates, LinPoly, SosError, SosProgram};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("initialization failed to reach a nonpositive slack; trace {trace:?}")]
    InitFailure { trace: Vec<f64> },
    #[error("alternation failed: {0}")]
    AlternationFailure(String),
    #[error("TEB extraction failed: {0}")]
    TebFailure(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Conic(#[from] crate::conic::ConicError),
}

/// Time dependence of the storage function basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VTimeBasis {
    /// Total degree 2 in (t, e) jointly.
    JointQuadratic,
    /// Quadratic in e with coefficients affine in t (degree up to 3).
    AffineInT,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SeedKind {
    /// Riccati solution of the linearized error dynamics with identity
    /// weights.
    Lqr,
    /// Explicit linear feedback gains; the seed solves the shifted Lyapunov
    /// equation P A_cl + A_cl' P = -alpha P - I for the closed loop.
    Gains(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub kappa_degree: u32,
    pub kappa_on_uh: bool,
    pub kappa_on_t: bool,
    pub l_degree: u32,
    pub mult_degree: u32,
    pub eps: f64,
    pub v_time: VTimeBasis,
    /// Within-sample decay rate used for the seed's time slope.
    pub alpha: f64,
    /// Initial level; widened automatically to cover the jump requirement
    /// and the initial set.
    pub gamma_init: Option<f64>,
    pub seed: SeedKind,
    /// Diagonal LQR state weights for the seed (defaults to ones).
    pub seed_q: Option<Vec<f64>>,
    /// Diagonal LQR input weights for the seed (defaults to ones).
    pub seed_r: Option<Vec<f64>>,
    /// Target per-coordinate funnel extents for the seed; floors the
    /// quadratic form so directions the LQR prices cheaply stay inside the
    /// region where the polynomial model is meaningful.
    pub seed_extents: Option<Vec<f64>>,
    pub init_max_iters: usize,
    pub n_iter: usize,
    pub bisect_iters: usize,
    pub rel_tol: f64,
    pub feas_tol: f64,
    pub gap_tol: f64,
    /// Tolerances for the final certificate re-solve.
    pub final_feas_tol: f64,
    pub final_gap_tol: f64,
    pub max_solver_iters: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            kappa_degree: 2,
            kappa_on_uh: false,
            kappa_on_t: false,
            l_degree: 2,
            mult_degree: 2,
            eps: 1e-6,
            v_time: VTimeBasis::JointQuadratic,
            alpha: 0.1,
            gamma_init: None,
            seed: SeedKind::Lqr,
            seed_q: None,
            seed_r: None,
            seed_extents: None,
            init_max_iters: 8,
            n_iter: 10,
            bisect_iters: 5,
            rel_tol: 1e-3,
            // SOS feasibility problems sit on degenerate faces; interior
            // point methods plateau near sqrt(eps) in backward error there.
            // Iteration steps run loose for speed; the final certificate is
            // re-solved tight and gated by reverification.
            feas_tol: 1e-5,
            gap_tol: 1e-5,
            final_feas_tol: 1e-6,
            final_gap_tol: 1e-7,
            max_solver_iters: 200,
        }
    }
}

impl SynthOptions {
    fn solver(&self) -> SolverSettings {
        SolverSettings {
            feas_tol: self.feas_tol,
            gap_tol: self.gap_tol,
            max_iter: self.max_solver_iters,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertDigest {
    pub max_residual: f64,
    pub min_gram_eig: f64,
    pub constraints: Vec<String>,
}

/// A certified funnel: storage function, level, sampling time, and the
/// synthesized tracking controller.
#[derive(Debug, Clone)]
pub struct Funnel {
    pub v: Poly,
    pub gamma: f64,
    pub t_s: f64,
    pub kappa: Vec<Poly>,
    pub time_varying: bool,
    pub digest: CertDigest,
}

impl Funnel {
    pub fn v_at(&self, sys: &ErrorSystem, t: f64, e: &[f64]) -> f64 {
        let mut buf = sys.vars.buffer();
        buf[sys.vars.t.index()] = t;
        sys.vars.fill(&mut buf, &sys.vars.e, e);
        self.v.eval_slice(&buf)
    }

    pub fn kappa_at(&self, sys: &ErrorSystem, t: f64, e: &[f64], xh: &[f64], uh: &[f64]) -> Vec<f64> {
        let mut buf = sys.vars.buffer();
        buf[sys.vars.t.index()] = t;
        sys.vars.fill(&mut buf, &sys.vars.e, e);
        sys.vars.fill(&mut buf, &sys.vars.xh, xh);
        sys.vars.fill(&mut buf, &sys.vars.uh, uh);
        self.kappa.iter().map(|k| k.eval_slice(&buf)).collect()
    }

    /// Scales a direction onto the funnel boundary: returns `s` with
    /// `V(t, s d) = gamma` (bisection; assumes V increases along `d`).
    pub fn boundary_scale(&self, sys: &ErrorSystem, t: f64, dir: &[f64]) -> Option<f64> {
        let eval = |s: f64| {
            let e: Vec<f64> = dir.iter().map(|d| d * s).collect();
            self.v_at(sys, t, &e)
        };
        let mut hi = 1.0;
        let mut grow = 0;
        while eval(hi) < self.gamma {
            hi *= 2.0;
            grow += 1;
            if grow > 60 {
                return None;
            }
        }
        let mut lo = 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if eval(mid) < self.gamma {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

// ---- shared template internals ----

struct Template<'a> {
    sys: &'a ErrorSystem,
    opts: &'a SynthOptions,
    time_varying: bool,
    kappa_vars: Vec<Variable>,
    l_vars: Vec<Variable>,
    mult_vars: Vec<Variable>,
    jump_vars: Vec<Variable>,
    /// -t (T_s - t) <= 0 on [0, T_s].
    p_time: Option<Poly>,
    /// Per-channel planner-input set polynomials (p <= 0 inside).
    uh_sets: Vec<Poly>,
    xh_sets: Vec<Poly>,
    du_sets: Vec<Poly>,
    /// Jump image with degenerate input-step channels substituted out.
    jump_polys: Vec<Poly>,
    eps_ee: Poly,
    v_basis: MonomialBasis,
}

fn box_poly(reg: &std::sync::Arc<crate::poly::VarRegistry>, v: Variable, lo: f64, hi: f64) -> Poly {
    // (v - lo)(v - hi) <= 0 inside the interval.
    let vp = Poly::var(reg, v);
    vp.checked_add(&Poly::constant(reg, -lo))
        .unwrap()
        .checked_mul(&vp.checked_add(&Poly::constant(reg, -hi)).unwrap())
        .unwrap()
}

impl<'a> Template<'a> {
    fn new(sys: &'a ErrorSystem, opts: &'a SynthOptions, time_varying: bool) -> Self {
        let vars = &sys.vars;
        let reg = &vars.reg;

        // Which ambient variables actually drive the error dynamics.
        let mut uses_uh = vec![false; vars.uh.len()];
        let mut uses_xh = vec![false; vars.xh.len()];
        let mut mark = |p: &Poly| {
            for v in p.support() {
                if let Some(k) = vars.uh.iter().position(|u| *u == v) {
                    uses_uh[k] = true;
                }
                if let Some(k) = vars.xh.iter().position(|u| *u == v) {
                    uses_xh[k] = true;
                }
            }
        };
        for p in &sys.f_e {
            mark(p);
        }
        for row in &sys.g_e {
            for p in row {
                mark(p);
            }
        }
        let any_uh = uses_uh.iter().any(|&b| b);
        let any_xh = uses_xh.iter().any(|&b| b);

        let mut kappa_vars: Vec<Variable> = vars.e.clone();
        if opts.kappa_on_t && time_varying {
            kappa_vars.insert(0, vars.t);
        }
        if opts.kappa_on_uh && any_uh {
            kappa_vars.extend(vars.uh.iter().cloned());
        }
        let mut mult_vars: Vec<Variable> = vars.e.clone();
        if time_varying {
            mult_vars.insert(0, vars.t);
        }
        if any_uh {
            mult_vars.extend(vars.uh.iter().cloned());
        }
        if any_xh {
            mult_vars.extend(vars.xh.iter().cloned());
        }
        let l_vars = mult_vars.clone();

        let p_time = time_varying.then(|| {
            let t = Poly::var(reg, vars.t);
            // t^2 - T_s t = -t (T_s - t)
            t.checked_mul(&t).unwrap().sub(&t.scale(sys.planner.t_s))
        });

        let mut uh_sets = Vec::new();
        if any_uh {
            for (k, &(lo, hi)) in sys.planner.uh_box.iter().enumerate() {
                if hi - lo > 1e-12 && uses_uh[k] {
                    uh_sets.push(box_poly(reg, vars.uh[k], lo, hi));
                }
            }
        }
        let mut xh_sets = Vec::new();
        if any_xh {
            if let Some(xb) = &sys.planner.xh_box {
                for (k, &(lo, hi)) in xb.iter().enumerate() {
                    if hi - lo > 1e-12 && uses_xh[k] {
                        xh_sets.push(box_poly(reg, vars.xh[k], lo, hi));
                    }
                }
            }
        }

        // Jump image: degenerate step channels are pinned at their value.
        let mut du_deg_bind: BTreeMap<Variable, Poly> = BTreeMap::new();
        let mut du_sets = Vec::new();
        for (k, &(lo, hi)) in sys.planner.du_box.iter().enumerate() {
            if hi - lo <= 1e-12 {
                du_deg_bind.insert(vars.du[k], Poly::constant(reg, 0.5 * (lo + hi)));
            } else {
                du_sets.push(box_poly(reg, vars.du[k], lo, hi));
            }
        }
        let jump_polys: Vec<Poly> =
            sys.jump.iter().map(|p| p.substitute(&du_deg_bind)).collect();
        let mut jump_vars: Vec<Variable> = vars.e.clone();
        for (k, &(lo, hi)) in sys.planner.du_box.iter().enumerate() {
            if hi - lo > 1e-12 {
                jump_vars.push(vars.du[k]);
            }
        }

        let mut eps_ee = Poly::zero(reg);
        for v in &vars.e {
            eps_ee = eps_ee
                .checked_add(&Poly::from_terms(reg, [(Monomial::var_pow(*v, 2), opts.eps)]))
                .unwrap();
        }

        let v_basis = if time_varying {
            match opts.v_time {
                VTimeBasis::JointQuadratic => {
                    let mut vs = vec![vars.t];
                    vs.extend(vars.e.iter().cloned());
                    MonomialBasis::total_degree(&vs, 2)
                }
                VTimeBasis::AffineInT => {
                    let mut vs = vec![vars.t];
                    vs.extend(vars.e.iter().cloned());
                    let t = vars.t;
                    let e_vars = vars.e.clone();
                    MonomialBasis::filtered(&vs, 3, move |m| {
                        m.exp(t) <= 1
                            && e_vars.iter().map(|v| m.exp(*v) as u32).sum::<u32>() <= 2
                    })
                }
            }
        } else {
            MonomialBasis::total_degree(&vars.e, 2)
        };

        Self {
            sys,
            opts,
            time_varying,
            kappa_vars,
            l_vars,
            mult_vars,
            jump_vars,
            p_time,
            uh_sets,
            xh_sets,
            du_sets,
            jump_polys,
            eps_ee,
            v_basis,
        }
    }

    fn t_bind(&self, value: f64) -> BTreeMap<Variable, Poly> {
        let mut b = BTreeMap::new();
        if self.time_varying {
            b.insert(self.sys.vars.t, Poly::constant(&self.sys.vars.reg, value));
        }
        b
    }

    fn jump_bind(&self) -> BTreeMap<Variable, Poly> {
        self.sys
            .vars
            .e
            .iter()
            .cloned()
            .zip(self.jump_polys.iter().cloned())
            .collect()
    }

    fn add_domain_multipliers(&self, prog: &mut SosProgram, ci: usize, tag: &str) {
        for (k, p) in self.uh_sets.iter().enumerate() {
            prog.add_sos_multiplier(ci, &format!("s_uh{k}_{tag}"), &self.mult_vars, self.opts.mult_degree, p);
        }
        for (k, p) in self.xh_sets.iter().enumerate() {
            prog.add_sos_multiplier(ci, &format!("s_xh{k}_{tag}"), &self.mult_vars, self.opts.mult_degree, p);
        }
        if let Some(pt) = &self.p_time {
            prog.add_sos_multiplier(ci, &format!("s_time_{tag}"), &self.mult_vars, self.opts.mult_degree, pt);
        }
    }

    /// Closed-loop drift f_e + g_e kappa for a fixed controller.
    fn closed_drift(&self, kappa: &[Poly]) -> Vec<Poly> {
        let mut out = Vec::with_capacity(self.sys.f_e.len());
        for (i, f) in self.sys.f_e.iter().enumerate() {
            let mut acc = f.clone();
            for (c, k) in kappa.iter().enumerate() {
                acc = acc.checked_add(&self.sys.g_e[i][c].checked_mul(k).unwrap()).unwrap();
            }
            out.push(acc);
        }
        out
    }
}

impl Template<'_> {
    /// Constraint selection mask for debugging: bit 0 containment, bit 1
    /// decrease, bit 2 jump, bit 3 input bounds.
    fn kappa_step_masked(
        &self,
        v: &Poly,
        gamma: f64,
        relax: bool,
        mask: u8,
    ) -> Result<SosProgram, SosError> {
        let sys = self.sys;
        let vars = &sys.vars;
        let reg = &vars.reg;
        let mut prog = SosProgram::new(reg);

        let kappa_decs: Vec<_> = (0..sys.tracker.n_u)
            .map(|c| prog.declare_poly(&format!("kappa{c}"), &self.kappa_vars, self.opts.kappa_degree, false))
            .collect::<Result<_, _>>()?;
        let l_dec = prog.declare_poly("l", &self.l_vars, self.opts.l_degree, false)?;
        let lambda = if relax { Some(prog.declare_scalar("lambda")?) } else { None };

        let v0 = v.substitute(&self.t_bind(0.0));
        let v_minus_gamma = v.checked_add(&Poly::constant(reg, -gamma)).unwrap();

        // Initial containment: gamma - V(0, e) + s0 p0 in SOS.
        if mask & 1 != 0 {
            let expr = LinPoly::from_poly(&v0.neg().checked_add(&Poly::constant(reg, gamma)).unwrap());
            let ci = prog.assert_sos("init_containment", expr);
            prog.add_sos_multiplier(ci, "s0", &vars.e, self.opts.mult_degree, &sys.e0);
        }

        // Decrease: -(dV/dt + dV/de (f_e + g_e kappa)) - eps e'e + l (V - gamma)
        //           [+ lambda] + domain multipliers in SOS.
        if mask & 2 != 0 {
            let mut expr = if self.time_varying {
                LinPoly::from_poly(&v.differentiate(vars.t).neg())
            } else {
                LinPoly::zero(reg)
            };
            for i in 0..sys.n_e() {
                let dv = v.differentiate(vars.e[i]);
                expr = expr.add_poly(&dv.checked_mul(&sys.f_e[i]).unwrap().neg());
                for (c, kd) in kappa_decs.iter().enumerate() {
                    let coeff = dv.checked_mul(&sys.g_e[i][c]).unwrap().neg();
                    expr = expr.add(&prog.poly_of(kd).mul_poly(&coeff));
                }
            }
            expr = expr.add_poly(&self.eps_ee.neg());
            expr = expr.add(&prog.poly_of(&l_dec).mul_poly(&v_minus_gamma));
            if let Some(h) = lambda {
                expr = expr.add_form(&Monomial::one(), &AffForm::handle(h));
            }
            let ci = prog.assert_sos("decrease", expr);
            self.add_domain_multipliers(&mut prog, ci, "dec");
        }

        // Jump closure (time-varying only):
        // gamma - V(0, h(e, du)) + s_jump (V(T_s, e) - gamma) + s_du p_du in SOS.
        if self.time_varying && mask & 4 != 0 {
            let v0h = v0.substitute(&self.jump_bind());
            let v_ts = v.substitute(&self.t_bind(sys.planner.t_s));
            let v_ts_mg = v_ts.checked_add(&Poly::constant(reg, -gamma)).unwrap();
            let mut expr =
                LinPoly::from_poly(&v0h.neg().checked_add(&Poly::constant(reg, gamma)).unwrap());
            if let Some(h) = lambda {
                expr = expr.add_form(&Monomial::one(), &AffForm::handle(h));
            }
            let ci = prog.assert_sos("jump", expr);
            prog.add_sos_multiplier(ci, "s_jump", &self.jump_vars, self.opts.mult_degree, &v_ts_mg);
            for (k, p) in self.du_sets.iter().enumerate() {
                prog.add_sos_multiplier(ci, &format!("s_du{k}"), &self.jump_vars, self.opts.mult_degree, p);
            }
        }

        // Input bounds per channel.
        for (c, kd) in kappa_decs.iter().enumerate() {
            if mask & 8 == 0 {
                break;
            }
            let (lo, hi) = sys.tracker.u_box[c];
            let kp = prog.poly_of(kd);
            let upper = LinPoly::from_poly(&Poly::constant(reg, hi)).sub(&kp);
            let ci = prog.assert_sos(&format!("input_upper{c}"), upper);
            prog.add_sos_multiplier(ci, &format!("s_upper{c}"), &self.mult_vars, self.opts.mult_degree, &v_minus_gamma);
            self.add_domain_multipliers(&mut prog, ci, &format!("up{c}"));

            let lower = kp.add_poly(&Poly::constant(reg, -lo));
            let ci = prog.assert_sos(&format!("input_lower{c}"), lower);
            prog.add_sos_multiplier(ci, &format!("s_lower{c}"), &self.mult_vars, self.opts.mult_degree, &v_minus_gamma);
            self.add_domain_multipliers(&mut prog, ci, &format!("lo{c}"));
        }

        if let Some(h) = lambda {
            prog.minimize(AffForm::handle(h));
        }
        Ok(prog)
    }
}

impl Template<'_> {
    fn v_step_masked(
        &self,
        group: &KappaGroup,
        gamma: f64,
        v_prev: &Poly,
        levelset: bool,
        relax: bool,
        mask: u8,
    ) -> Result<SosProgram, SosError> {
        let sys = self.sys;
        let vars = &sys.vars;
        let reg = &vars.reg;
        let mut prog = SosProgram::new(reg);
        let v_dec = prog.declare_poly_with_basis("V", self.v_basis.clone())?;
        let v_lin = prog.poly_of(&v_dec);
        let lambda = if relax { Some(prog.declare_scalar("lambda")?) } else { None };

        let v0_lin = v_lin.substitute(&self.t_bind(0.0));

        // Initial containment.
        if mask & 1 != 0 {
            let expr = v0_lin.scale(-1.0).add_scalar(gamma);
            let ci = prog.assert_sos("init_containment", expr);
            prog.add_sos_multiplier(ci, "s0", &vars.e, self.opts.mult_degree, &sys.e0);
        }

        // Decrease with the controller group fixed.
        if mask & 2 != 0 {
            let closed = self.closed_drift(&group.kappa);
            let mut expr = if self.time_varying {
                v_lin.differentiate(vars.t).scale(-1.0)
            } else {
                LinPoly::zero(reg)
            };
            for i in 0..sys.n_e() {
                expr = expr.add(&v_lin.differentiate(vars.e[i]).mul_poly(&closed[i]).scale(-1.0));
            }
            expr = expr.add_poly(&self.eps_ee.neg());
            expr = expr.add(&v_lin.add_scalar(-gamma).mul_poly(&group.l));
            if let Some(h) = lambda {
                expr = expr.add_form(&Monomial::one(), &AffForm::handle(h));
            }
            let ci = prog.assert_sos("decrease", expr);
            self.add_domain_multipliers(&mut prog, ci, "dec");
        }

        // Jump closure with the fixed jump multiplier.
        if self.time_varying && mask & 4 != 0 {
            let s_jump = group
                .s_jump
                .as_ref()
                .ok_or_else(|| SosError::Structural("missing fixed jump multiplier".into()))?;
            let mut bind = self.jump_bind();
            bind.extend(self.t_bind(0.0));
            let v0h = v_lin.substitute(&bind);
            let v_ts_mg = v_lin.substitute(&self.t_bind(sys.planner.t_s)).add_scalar(-gamma);
            let mut expr = v0h.scale(-1.0).add_scalar(gamma).add(&v_ts_mg.mul_poly(s_jump));
            if let Some(h) = lambda {
                expr = expr.add_form(&Monomial::one(), &AffForm::handle(h));
            }
            let ci = prog.assert_sos("jump", expr);
            for (k, p) in self.du_sets.iter().enumerate() {
                prog.add_sos_multiplier(ci, &format!("s_du{k}"), &self.jump_vars, self.opts.mult_degree, p);
            }
        }

        // Input bounds with fixed kappa and fixed (V - gamma) multipliers.
        for c in 0..sys.tracker.n_u {
            if mask & 8 == 0 {
                break;
            }
            let (lo, hi) = sys.tracker.u_box[c];
            let v_mg = v_lin.add_scalar(-gamma);
            let upper = LinPoly::from_poly(
                &group.kappa[c].neg().checked_add(&Poly::constant(reg, hi)).unwrap(),
            )
            .add(&v_mg.mul_poly(&group.s_upper[c]));
            let ci = prog.assert_sos(&format!("input_upper{c}"), upper);
            self.add_domain_multipliers(&mut prog, ci, &format!("up{c}"));

            let lower = LinPoly::from_poly(
                &group.kappa[c].checked_add(&Poly::constant(reg, -lo)).unwrap(),
            )
            .add(&v_mg.mul_poly(&group.s_lower[c]));
            let ci = prog.assert_sos(&format!("input_lower{c}"), lower);
            self.add_domain_multipliers(&mut prog, ci, &format!("lo{c}"));
        }

        // Keep every funnel slice bounded: the pure-quadratic part of V is
        // affine in t, so requiring it to dominate eps e'e at both interval
        // endpoints covers the whole sampling period.
        if mask & 16 != 0 {
            let mut quad0 = LinPoly::zero(reg);
            let mut quad1 = LinPoly::zero(reg);
            for (k, m) in v_dec.basis.monomials.iter().enumerate() {
                let e_deg: u32 = vars.e.iter().map(|ev| m.exp(*ev) as u32).sum();
                let t_deg = if self.time_varying { m.exp(vars.t) } else { 0 };
                if e_deg == 2 {
                    let mut stripped = Monomial::one();
                    for ev in &vars.e {
                        stripped = stripped.mul(&Monomial::var_pow(*ev, m.exp(*ev)));
                    }
                    let form = AffForm::handle(v_dec.first_handle + k);
                    if t_deg == 0 {
                        quad0 = quad0.add_form(&stripped, &form);
                    } else if t_deg == 1 {
                        quad1 = quad1.add_form(&stripped, &form);
                    }
                }
            }
            prog.assert_sos("posdef0", quad0.add_poly(&self.eps_ee.neg()));
            if self.time_varying {
                let end = quad0.add(&quad1.scale(sys.planner.t_s));
                prog.assert_sos("posdef1", end.add_poly(&self.eps_ee.neg()));
            }
        }

        // The slack-relaxed problem is invariant under joint rescaling of V;
        // bound the quadratic trace below by the incumbent's so the slack
        // cannot be driven down by deflating V (a scalar SOS constraint).
        if relax && mask & 32 != 0 {
            let mut pin = LinPoly::zero(reg);
            let mut target = 0.0;
            for (k, m) in v_dec.basis.monomials.iter().enumerate() {
                if vars.e.iter().any(|ev| m.exp(*ev) == 2 && m.degree() == 2) {
                    pin = pin.add_form(&Monomial::one(), &AffForm::handle(v_dec.first_handle + k));
                    target += v_prev.coeff(m);
                }
            }
            prog.assert_sos("scale_pin", pin.add_scalar(-target));
        }

        // Level-set growth constraint: the new sublevel set stays inside the
        // previous one (with multiplier bounded away from zero).
        if levelset {
            let prev_mg = v_prev.checked_add(&Poly::constant(reg, -gamma)).unwrap();
            let expr = v_lin
                .add_scalar(-gamma)
                .add_poly(&prev_mg.scale(-self.opts.eps));
            let ci = prog.assert_sos("levelset_growth", expr);
            prog.add_sos_multiplier(ci, "s10", &self.mult_vars, self.opts.mult_degree, &prev_mg.neg());
            if let Some(pt) = &self.p_time {
                prog.add_sos_multiplier(ci, "s_time_ls", &self.mult_vars, self.opts.mult_degree, pt);
            }
        }

        if let Some(h) = lambda {
            prog.minimize(AffForm::handle(h));
        } else {
            // Mild shrink pressure on the level set: push the trace of V's
            // quadratic part up (larger V = smaller sublevel set); growth of
            // V is capped by the initial-set containment constraint.
            let mut obj = AffForm::constant(0.0);
            for (k, m) in v_dec.basis.monomials.iter().enumerate() {
                if vars.e.iter().any(|ev| m.exp(*ev) == 2 && m.degree() == 2) {
                    obj.add_term(v_dec.first_handle + k, -1.0);
                }
            }
            prog.minimize(obj);
        }
        Ok(prog)
    }

}

impl BilinearSosProblem for Template<'_> {
    fn kappa_step(&self, v: &Poly, gamma: f64, relax: bool) -> Result<SosProgram, SosError> {
        self.kappa_step_masked(v, gamma, relax, 0xf)
    }

    fn v_step(
        &self,
        group: &KappaGroup,
        gamma: f64,
        v_prev: &Poly,
        levelset: bool,
        relax: bool,
    ) -> Result<SosProgram, SosError> {
        self.v_step_masked(group, gamma, v_prev, levelset, relax, 0xff)
    }

    fn extract_group(&self, certs: &Certificates) -> Result<KappaGroup, SosError> {
        let n_u = self.sys.tracker.n_u;
        let get = |name: &str| -> Result<Poly, SosError> {
            certs
                .decision(name)
                .cloned()
                .ok_or_else(|| SosError::Structural(format!("decision `{name}` missing")))
        };
        let kappa: Vec<Poly> =
            (0..n_u).map(|c| get(&format!("kappa{c}"))).collect::<Result<_, _>>()?;
        let l = get("l")?;
        let s_jump = if self.time_varying {
            Some(
                certs
                    .multiplier("jump", "s_jump")
                    .cloned()
                    .ok_or_else(|| SosError::Structural("jump multiplier missing".into()))?,
            )
        } else {
            None
        };
        let mut s_upper = Vec::new();
        let mut s_lower = Vec::new();
        for c in 0..n_u {
            s_upper.push(
                certs
                    .multiplier(&format!("input_upper{c}"), &format!("s_upper{c}"))
                    .cloned()
                    .ok_or_else(|| SosError::Structural("input multiplier missing".into()))?,
            );
            s_lower.push(
                certs
                    .multiplier(&format!("input_lower{c}"), &format!("s_lower{c}"))
                    .cloned()
                    .ok_or_else(|| SosError::Structural("input multiplier missing".into()))?,
            );
        }
        Ok(KappaGroup { kappa, l, s_jump, s_upper, s_lower })
    }
}

/// Test hook: linearized error dynamics used for seeding.
pub fn debug_linearized(sys: &ErrorSystem) -> (DMatrix<f64>, DMatrix<f64>) {
    linearized_error_dynamics(sys)
}

/// Test hook: runs only the initialization phase, returning the lambda trace
/// and the iteration records whether or not it converged.
#[allow(clippy::result_large_err)]
pub fn debug_init(
    sys: &ErrorSystem,
    opts: &SynthOptions,
    time_varying: bool,
) -> Result<(Vec<f64>, AlternationReport), (Vec<f64>, AlternationReport)> {
    let template = Template::new(sys, opts, time_varying);
    let (v_bar, gamma_bar) = match seed_v(sys, opts, time_varying) {
        Ok(v) => v,
        Err(_) => return Err((vec![], AlternationReport::default())),
    };
    match initialize_v0(
        &template,
        &v_bar,
        &InitOptions {
            gamma_bar,
            max_iters: opts.init_max_iters,
            lambda_tol: 0.0,
            solver: opts.solver(),
        },
    ) {
        Ok(res) => Ok((res.lambda_trace, res.report)),
        Err(AlternationError::InitFailure { trace, report }) => Err((trace, report)),
        Err(_) => Err((vec![], AlternationReport::default())),
    }
}

/// Test hook: builds one raw template step program without running the
/// alternation. `mask` selects constraint families (containment, decrease,
/// jump, input bounds).
pub fn debug_kappa_step_masked(
    sys: &ErrorSystem,
    opts: &SynthOptions,
    time_varying: bool,
    v: &Poly,
    gamma: f64,
    relax: bool,
    mask: u8,
) -> Result<SosProgram, SosError> {
    Template::new(sys, opts, time_varying).kappa_step_masked(v, gamma, relax, mask)
}

/// Test hook: builds one raw template step program without running the
/// alternation.
pub fn debug_kappa_step(
    sys: &ErrorSystem,
    opts: &SynthOptions,
    time_varying: bool,
    v: &Poly,
    gamma: f64,
    relax: bool,
) -> Result<SosProgram, SosError> {
    Template::new(sys, opts, time_varying).kappa_step(v, gamma, relax)
}

// ---- seeding ----

/// Linearization of the error dynamics at e = 0 with planner inputs at their
/// box centers.
fn linearized_error_dynamics(sys: &ErrorSystem) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = sys.n_e();
    let m = sys.tracker.n_u;
    let vars = &sys.vars;
    let mut buf = vars.buffer();
    let uh_center: Vec<f64> =
        sys.planner.uh_box.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
    vars.fill(&mut buf, &vars.uh, &uh_center);
    if let Some(xb) = &sys.planner.xh_box {
        let c: Vec<f64> = xb.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
        vars.fill(&mut buf, &vars.xh, &c);
    }
    let a = DMatrix::from_fn(n, n, |i, j| sys.f_e[i].differentiate(vars.e[j]).eval_slice(&buf));
    let b = DMatrix::from_fn(n, m, |i, c| sys.g_e[i][c].eval_slice(&buf));
    (a, b)
}

/// Quadratic seed matrix from the configured seeding policy, together with
/// the effective decay rate actually used. The requested rate is backed off
/// until the shifted closed loop is Hurwitz and the Lyapunov solution is
/// positive definite.
pub fn seed_matrix(sys: &ErrorSystem, opts: &SynthOptions) -> Result<(DMatrix<f64>, f64), SynthError> {
    let (a, b) = linearized_error_dynamics(sys);
    let n = sys.n_e();
    let a_cl = match &opts.seed {
        SeedKind::Lqr => {
            let mut q = DMatrix::identity(n, n);
            if let Some(w) = &opts.seed_q {
                for i in 0..n.min(w.len()) {
                    q[(i, i)] = w[i];
                }
            }
            let mut r = DMatrix::identity(sys.tracker.n_u, sys.tracker.n_u);
            if let Some(w) = &opts.seed_r {
                for i in 0..sys.tracker.n_u.min(w.len()) {
                    r[(i, i)] = w[i];
                }
            }
            let (_p, k) = linalg::lqr_riccati(&a, &b, &q, &r).ok_or_else(|| {
                SynthError::Precondition(
                    "Riccati seeding failed on the linearized error dynamics".into(),
                )
            })?;
            &a - &b * &k
        }
        SeedKind::Gains(k) => {
            if k.len() != n * sys.tracker.n_u {
                return Err(SynthError::Precondition("gain vector dimension mismatch".into()));
            }
            let kmat = DMatrix::from_row_slice(sys.tracker.n_u, n, k);
            &a - &b * kmat
        }
    };
    let mut alpha = opts.alpha;
    for _ in 0..12 {
        let shifted = &a_cl + DMatrix::identity(n, n) * (alpha / 2.0);
        if let Some(p) = linalg::lyapunov(&shifted, &DMatrix::identity(n, n)) {
            let eig = p.clone().symmetric_eigen().eigenvalues;
            let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
            let max = eig.iter().copied().fold(0.0f64, f64::max);
            if min > 0.0 && min > 1e-9 * max {
                return Ok((p, alpha));
            }
        }
        alpha *= 0.5;
    }
    Err(SynthError::Precondition(
        "Lyapunov seeding failed: closed loop is not exponentially stable".into(),
    ))
}

fn quad_form_poly(sys: &ErrorSystem, p: &DMatrix<f64>) -> Poly {
    let reg = &sys.vars.reg;
    let n = sys.n_e();
    let mut terms = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let m = Monomial::var(sys.vars.e[i]).mul(&Monomial::var(sys.vars.e[j]));
            terms.push((m, p[(i, j)]));
        }
    }
    Poly::from_terms(reg, terms)
}

/// Seed storage function and a level wide enough to cover the jump
/// requirement and the initial set.
pub fn seed_v(
    sys: &ErrorSystem,
    opts: &SynthOptions,
    time_varying: bool,
) -> Result<(Poly, f64), SynthError> {
    let (p0, alpha) = seed_matrix(sys, opts)?;
    let mut p = p0;
    let reg = &sys.vars.reg;
    let t_s = sys.planner.t_s;
    let n = sys.n_e();

    // Level needed to absorb the worst-case error jump given the seed's
    // within-sample shrink factor; iterated once because the extent floors
    // reference the level.
    let mut gamma = opts.gamma_init.unwrap_or(1.0);
    for _pass in 0..2 {
        if let Some(targets) = &opts.seed_extents {
            for i in 0..n.min(targets.len()) {
                let floor = gamma / (targets[i] * targets[i]);
                if p[(i, i)] < floor {
                    p[(i, i)] = floor;
                }
            }
        }
        // Containment of the initial set {p0 <= 0}; for the ball form the
        // peak of e'Pe is lambda_max(P) r^2.
        let r2 = -sys.e0.eval_slice(&sys.vars.buffer());
        if r2 > 0.0 {
            let lmax = -linalg::min_eigenvalue(&p.clone().scale(-1.0));
            gamma = gamma.max(1.5 * lmax * r2);
        }
        if time_varying {
            let shrink = 1.0 - 1.0 / (1.0 + alpha * t_s).sqrt();
            let n_du = sys.vars.du.len();
            let uh_center: Vec<f64> =
                sys.planner.uh_box.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
            let mut m_delta = 0.0f64;
            for corner in 0..(1usize << n_du) {
                let du: Vec<f64> = (0..n_du)
                    .map(|k| {
                        let (lo, hi) = sys.planner.du_box[k];
                        if corner >> k & 1 == 1 {
                            hi
                        } else {
                            lo
                        }
                    })
                    .collect();
                let xh0 = vec![0.0; sys.vars.xh.len()];
                let h = sys.jump_eval(&vec![0.0; sys.n_e()], &xh0, &uh_center, &du);
                let hv = DMatrix::from_column_slice(sys.n_e(), 1, &h);
                let val = (hv.transpose() * &p * &hv)[(0, 0)];
                m_delta = m_delta.max(val.max(0.0).sqrt());
            }
            if shrink > 1e-12 && m_delta > 0.0 {
                gamma = gamma.max(1.3 * (m_delta / shrink).powi(2));
            }
        }
    }
    let quad = quad_form_poly(sys, &p);

    let v_bar = if time_varying {
        match opts.v_time {
            VTimeBasis::AffineInT => {
                // (1 + alpha t) e'Pe
                let t = Poly::var(reg, sys.vars.t);
                quad.checked_add(&t.scale(alpha).checked_mul(&quad).unwrap()).unwrap()
            }
            VTimeBasis::JointQuadratic => {
                // e'Pe + alpha gamma t
                let t = Poly::var(reg, sys.vars.t);
                quad.checked_add(&t.scale(alpha * gamma)).unwrap()
            }
        }
    } else {
        quad
    };
    Ok((v_bar, gamma))
}

// ---- pipelines ----

pub struct SynthOutcome {
    pub funnel: Funnel,
    pub init_lambda_trace: Vec<f64>,
    pub report: AlternationReport,
}

fn digest_of(certs: &Certificates) -> CertDigest {
    CertDigest {
        max_residual: certs.max_residual,
        min_gram_eig: certs.min_gram_eig,
        constraints: certs.constraints.iter().map(|c| c.name.clone()).collect(),
    }
}

fn run_pipeline(
    sys: &ErrorSystem,
    opts: &SynthOptions,
    time_varying: bool,
) -> Result<SynthOutcome, SynthError> {
    let template = Template::new(sys, opts, time_varying);
    let (v_bar, gamma_bar) = seed_v(sys, opts, time_varying)?;
    let init = initialize_v0(
        &template,
        &v_bar,
        &InitOptions {
            gamma_bar,
            max_iters: opts.init_max_iters,
            lambda_tol: 0.0,
            solver: opts.solver(),
        },
    )
    .map_err(|e| match e {
        AlternationError::InitFailure { trace, .. } => SynthError::InitFailure { trace },
        AlternationError::Template(e) => SynthError::Sos(e),
        AlternationError::Conic(e) => SynthError::Conic(e),
        other => SynthError::AlternationFailure(other.to_string()),
    })?;
    let mut report = init.report.clone();
    let alt = alternate(
        &template,
        &init.v0,
        gamma_bar,
        &AlternationOptions {
            n_iter: opts.n_iter,
            rel_tol: opts.rel_tol,
            bisect_iters: opts.bisect_iters,
            solver: opts.solver(),
        },
    )
    .map_err(|e| SynthError::AlternationFailure(e.to_string()))?;
    report.records.extend(alt.report.records.iter().cloned());
    report.termination = alt.report.termination.clone();

    // Final certificate at tight tolerances; fall back to the alternation's
    // certificate if the tight solve cannot improve on it.
    let mut gamma = alt.gamma;
    let mut group = alt.group;
    let mut certs = alt.certs;
    {
        let mut tight = opts.solver();
        tight.feas_tol = opts.final_feas_tol;
        tight.gap_tol = opts.final_gap_tol;
        let prog = template.kappa_step(&alt.v, gamma, false)?;
        if let Ok(compiled) = prog.compile() {
            if let Ok(sol) = crate::conic::solve(&compiled.problem, &tight) {
                if sol.is_optimal() {
                    if let Ok(c) = compiled.map.recover(&prog, &sol) {
                        if c.max_residual <= certs.max_residual.max(1e-9)
                            && c.min_gram_eig >= -1e-7
                        {
                            group = template.extract_group(&c)?;
                            certs = c;
                        }
                    }
                }
            }
        }
    }
    let _ = &mut gamma;
    let funnel = Funnel {
        v: alt.v,
        gamma,
        t_s: sys.planner.t_s,
        kappa: group.kappa,
        time_varying,
        digest: digest_of(&certs),
    };
    Ok(SynthOutcome { funnel, init_lambda_trace: init.lambda_trace, report })
}

/// Theorem-1-style synthesis: time-invariant `V`, no jump handling. Requires
/// an identity error weighting and a comparison map independent of the
/// planner input.
pub fn synthesize_invariant(sys: &ErrorSystem, opts: &SynthOptions) -> Result<SynthOutcome, SynthError> {
    match &sys.maps.form {
        PhiForm::Poly { phi, .. } => {
            let n = sys.n_e();
            for (i, row) in phi.iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    let diff = p.sub(&Poly::constant(&sys.vars.reg, want));
                    if !diff.is_zero() {
                        return Err(SynthError::Precondition(
                            "time-invariant synthesis requires phi = I".into(),
                        ));
                    }
                }
            }
            let _ = n;
        }
        PhiForm::HeadingRotation => {
            return Err(SynthError::Precondition(
                "time-invariant synthesis requires phi = I".into(),
            ))
        }
    }
    for (i, p) in sys.maps.pi.iter().enumerate() {
        for u in &sys.vars.uh {
            if p.degree_in(*u) > 0 {
                return Err(SynthError::Precondition(format!(
                    "pi row {i} depends on the planner input; use the time-varying pipeline"
                )));
            }
        }
    }
    run_pipeline(sys, opts, false)
}

/// Theorem-2-style synthesis: time-varying `V` on one sampling period with
/// the jump condition; the same funnel applies on every period by
/// time-shifting.
pub fn synthesize_funnel(sys: &ErrorSystem, opts: &SynthOptions) -> Result<SynthOutcome, SynthError> {
    if sys.planner.t_s <= 0.0 {
        return Err(SynthError::Precondition("sampling time must be positive".into()));
    }
    run_pipeline(sys, opts, true)
}

// ---- TEB extraction ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TebShapeRequest {
    Box,
    Ellipsoid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TebShape {
    /// Axis-aligned box lower/upper bounds per error coordinate.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Ellipsoid {e : e'Pe <= 1} stored as the quadratic form matrix (row
    /// major).
    Ellipsoid { p: Vec<Vec<f64>> },
}

/// Time-independent outer bound of the funnel.
#[derive(Debug, Clone)]
pub struct Teb {
    pub shape: TebShape,
    pub t_s: f64,
}

impl Teb {
    pub fn contains(&self, e: &[f64]) -> bool {
        self.margin(e) >= 0.0
    }

    /// Positive inside; the most-violated face/level distance.
    pub fn margin(&self, e: &[f64]) -> f64 {
        match &self.shape {
            TebShape::Box { lower, upper } => {
                let mut m = f64::INFINITY;
                for i in 0..e.len() {
                    m = m.min(upper[i] - e[i]).min(e[i] - lower[i]);
                }
                m
            }
            TebShape::Ellipsoid { p } => {
                let mut q = 0.0;
                for (i, row) in p.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        q += e[i] * v * e[j];
                    }
                }
                1.0 - q
            }
        }
    }

    /// Half-width of the box on coordinate i (max of the two sides).
    pub fn half_width(&self, i: usize) -> f64 {
        match &self.shape {
            TebShape::Box { lower, upper } => lower[i].abs().max(upper[i].abs()),
            TebShape::Ellipsoid { p } => {
                // Extent along coordinate i: sqrt((P^-1)_ii).
                let n = p.len();
                let pm = DMatrix::from_fn(n, n, |r, c| p[r][c]);
                match pm.try_inverse() {
                    Some(inv) => inv[(i, i)].max(0.0).sqrt(),
                    None => f64::INFINITY,
                }
            }
        }
    }

    /// Circumradius of the projection onto the first `k` coordinates.
    pub fn position_radius(&self, k: usize) -> f64 {
        (0..k).map(|i| self.half_width(i).powi(2)).sum::<f64>().sqrt()
    }
}

/// Extracts a time-independent TEB containing every funnel slice on
/// `[0, T_s]` by a single convex SOS program.
pub fn extract_teb(
    sys: &ErrorSystem,
    funnel: &Funnel,
    shape: TebShapeRequest,
    opts: &SynthOptions,
) -> Result<Teb, SynthError> {
    let vars = &sys.vars;
    let reg = &vars.reg;
    let n = sys.n_e();
    let mut prog = SosProgram::new(reg);
    let v_mg = funnel.v.checked_add(&Poly::constant(reg, -funnel.gamma)).unwrap();
    let p_time = funnel.time_varying.then(|| {
        let t = Poly::var(reg, vars.t);
        t.checked_mul(&t).unwrap().sub(&t.scale(funnel.t_s))
    });
    let mut mult_vars: Vec<Variable> = vars.e.clone();
    if funnel.time_varying {
        mult_vars.insert(0, vars.t);
    }
    // Extents feed coarse-tolerance checks; run the conic solves a little
    // looser than the synthesis steps.
    let mut solver = opts.solver();
    solver.feas_tol = solver.feas_tol.max(1e-5);
    solver.gap_tol = solver.gap_tol.max(1e-6);

    match shape {
        TebShapeRequest::Box => {
            let mut objective = AffForm::constant(0.0);
            let mut handles = Vec::new();
            for i in 0..n {
                for (side, sign) in [("up", 1.0), ("lo", -1.0)] {
                    let b = prog.declare_scalar(&format!("b_{side}{i}"))?;
                    objective.add_term(b, 1.0);
                    handles.push(b);
                    // b - sign * e_i >= 0 on the funnel.
                    let expr = LinPoly::zero(reg)
                        .add_form(&Monomial::one(), &AffForm::handle(b))
                        .add_poly(&Poly::var(reg, vars.e[i]).scale(-sign));
                    let ci = prog.assert_sos(&format!("face_{side}{i}"), expr);
                    prog.add_sos_multiplier(
                        ci,
                        &format!("s_{side}{i}"),
                        &mult_vars,
                        opts.mult_degree,
                        &v_mg,
                    );
                    if let Some(pt) = &p_time {
                        prog.add_sos_multiplier(
                            ci,
                            &format!("st_{side}{i}"),
                            &mult_vars,
                            opts.mult_degree,
                            pt,
                        );
                    }
                }
            }
            prog.minimize(objective);
            let compiled = prog.compile()?;
            let sol = crate::conic::solve(&compiled.problem, &solver)?;
            if !sol.is_optimal() {
                return Err(SynthError::TebFailure(format!("box program status {:?}", sol.status)));
            }
            let certs = compiled.map.recover(&prog, &sol)?;
            let mut lower = vec![0.0; n];
            let mut upper = vec![0.0; n];
            for i in 0..n {
                upper[i] = certs.handle_values[handles[2 * i]];
                lower[i] = -certs.handle_values[handles[2 * i + 1]];
            }
            Ok(Teb { shape: TebShape::Box { lower, upper }, t_s: funnel.t_s })
        }
        TebShapeRequest::Ellipsoid => {
            // q(e) = e'Pe with the pure-quadratic basis; maximize trace(P)
            // as the volume surrogate under containment.
            let quad_basis = MonomialBasis::filtered(&vars.e, 2, |m| m.degree() == 2);
            let q_dec = prog.declare_poly_with_basis("q", quad_basis)?;
            let q_lin = prog.poly_of(&q_dec);
            // Containment: 1 - q + s (V - gamma) [- s_t t(T_s - t)] in SOS.
            let expr = q_lin.scale(-1.0).add_scalar(1.0);
            let ci = prog.assert_sos("containment", expr);
            prog.add_sos_multiplier(ci, "s", &mult_vars, opts.mult_degree, &v_mg);
            if let Some(pt) = &p_time {
                prog.add_sos_multiplier(ci, "st", &mult_vars, opts.mult_degree, pt);
            }
            // Positive definiteness: q - delta e'e in SOS.
            let mut dee = Poly::zero(reg);
            for v in &vars.e {
                dee = dee
                    .checked_add(&Poly::from_terms(reg, [(Monomial::var_pow(*v, 2), 1e-9)]))
                    .unwrap();
            }
            prog.assert_sos("posdef", q_lin.add_poly(&dee.neg()));
            // Maximize the trace of P.
            let mut obj = AffForm::constant(0.0);
            for (k, m) in q_dec.basis.monomials.iter().enumerate() {
                if vars.e.iter().any(|ev| m.exp(*ev) == 2) {
                    obj.add_term(q_dec.first_handle + k, -1.0);
                }
            }
            prog.minimize(obj);
            let compiled = prog.compile()?;
            let sol = crate::conic::solve(&compiled.problem, &solver)?;
            if !sol.is_optimal() {
                return Err(SynthError::TebFailure(format!(
                    "ellipsoid program status {:?}",
                    sol.status
                )));
            }
            let certs = compiled.map.recover(&prog, &sol)?;
            let q = certs.decision("q").unwrap();
            let mut p = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let m = Monomial::var(vars.e[i]).mul(&Monomial::var(vars.e[j]));
                    let c = q.coeff(&m);
                    if i == j {
                        p[i][j] = c;
                    } else {
                        p[i][j] = c / 2.0;
                        p[j][i] = c / 2.0;
                    }
                }
            }
            Ok(Teb { shape: TebShape::Ellipsoid { p }, t_s: funnel.t_s })
        }
    }
}

// ---- safety ----

/// Tracker state constraints for the safety check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TrackerSet {
    /// Per-state optional (lo, hi) bounds.
    Box(Vec<Option<(f64, f64)>>),
}

#[derive(Debug, Clone)]
pub struct SafetySpec {
    pub tracker_set: TrackerSet,
    pub xh_box: Vec<(f64, f64)>,
    pub uh_box: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub safe: bool,
    /// Worst-case slack per constrained state (positive = safe).
    pub margins: Vec<(String, f64)>,
    pub witness: Option<Vec<f64>>,
    /// Suggested scaling for the planner sets when unsafe.
    pub shrink_suggestion: Option<f64>,
}

/// Checks `nu(TEB, planner sets)` against the tracker state constraints.
///
/// For the identity weighting the check reduces to interval arithmetic on
/// `pi` plus the TEB box; the rotation weighting bounds the position rows by
/// the TEB circumradius (the rotation preserves the 2-norm).
pub fn check_safety(
    sys: &ErrorSystem,
    teb: &Teb,
    spec: &SafetySpec,
) -> Result<SafetyVerdict, SynthError> {
    let n = sys.n_e();
    let (e_lo, e_hi) = match &teb.shape {
        TebShape::Box { lower, upper } => (lower.clone(), upper.clone()),
        TebShape::Ellipsoid { .. } => {
            let w: Vec<f64> = (0..n).map(|i| teb.half_width(i)).collect();
            (w.iter().map(|v| -v).collect(), w)
        }
    };

    // Interval ranges of x = nu(e, xh, uh) per state.
    let mut x_lo = vec![f64::NEG_INFINITY; n];
    let mut x_hi = vec![f64::INFINITY; n];
    let pi_range = |i: usize| -> Option<(f64, f64)> {
        // pi rows of the builtins are single variables or zero.
        let p = &sys.maps.pi[i];
        if p.is_zero() {
            return Some((0.0, 0.0));
        }
        let support = p.support();
        if support.len() != 1 || p.degree() != 1 {
            return None;
        }
        let v = support[0];
        let c = p.coeff(&Monomial::var(v));
        if let Some(k) = sys.vars.xh.iter().position(|x| *x == v) {
            let (lo, hi) = spec.xh_box.get(k).copied().unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
            return Some(if c >= 0.0 { (c * lo, c * hi) } else { (c * hi, c * lo) });
        }
        if let Some(k) = sys.vars.uh.iter().position(|x| *x == v) {
            let (lo, hi) = spec.uh_box.get(k).copied().unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
            return Some(if c >= 0.0 { (c * lo, c * hi) } else { (c * hi, c * lo) });
        }
        None
    };
    match &sys.maps.form {
        PhiForm::HeadingRotation => {
            // Position rows: pi +- circumradius of the (e1, e2) slice.
            let rho = (e_lo[0].abs().max(e_hi[0].abs()).powi(2)
                + e_lo[1].abs().max(e_hi[1].abs()).powi(2))
            .sqrt();
            for i in 0..n {
                let Some((plo, phi_)) = pi_range(i) else {
                    return Err(SynthError::Precondition(format!(
                        "safety check requires interval-representable pi row {i}"
                    )));
                };
                if i < 2 {
                    x_lo[i] = plo - rho;
                    x_hi[i] = phi_ + rho;
                } else {
                    x_lo[i] = plo + e_lo[i];
                    x_hi[i] = phi_ + e_hi[i];
                }
            }
        }
        PhiForm::Poly { nu, .. } => {
            // Interval-evaluate nu over the boxes; exact for the affine maps
            // used by the builtins, conservative otherwise.
            for i in 0..n {
                let (lo, hi) = interval_eval(sys, &nu[i], &e_lo, &e_hi, spec);
                x_lo[i] = lo;
                x_hi[i] = hi;
            }
        }
    }

    let TrackerSet::Box(bounds) = &spec.tracker_set;
    let mut margins = Vec::new();
    let mut worst: Option<(usize, f64, bool)> = None;
    for (i, b) in bounds.iter().enumerate() {
        let Some((lo, hi)) = b else { continue };
        let m_up = hi - x_hi[i];
        let m_lo = x_lo[i] - lo;
        let m = m_up.min(m_lo);
        margins.push((format!("x{}", i + 1), m));
        if worst.map_or(true, |(_, w, _)| m < w) {
            worst = Some((i, m, m_up < m_lo));
        }
    }
    let safe = margins.iter().all(|(_, m)| *m >= -1e-9);
    let witness = if safe {
        None
    } else {
        worst.map(|(i, _, upper_side)| {
            // Corner witness: extreme error and planner values on the worst
            // constraint.
            let mut e = vec![0.0; n];
            e[i] = if upper_side { e_hi[i] } else { e_lo[i] };
            let xh: Vec<f64> = spec
                .xh_box
                .iter()
                .map(|&(lo, hi)| if upper_side { hi } else { lo })
                .collect();
            let uh: Vec<f64> = spec
                .uh_box
                .iter()
                .map(|&(lo, hi)| if upper_side { hi } else { lo })
                .collect();
            sys.maps.nu_of(&sys.vars, &e, &xh, &uh)
        })
    };
    let shrink_suggestion = if safe { None } else { Some(0.9) };
    Ok(SafetyVerdict { safe, margins, witness, shrink_suggestion })
}

fn interval_eval(
    sys: &ErrorSystem,
    p: &Poly,
    e_lo: &[f64],
    e_hi: &[f64],
    spec: &SafetySpec,
) -> (f64, f64) {
    let range_of = |v: Variable| -> (f64, f64) {
        if let Some(k) = sys.vars.e.iter().position(|x| *x == v) {
            return (e_lo[k], e_hi[k]);
        }
        if let Some(k) = sys.vars.xh.iter().position(|x| *x == v) {
            return spec.xh_box.get(k).copied().unwrap_or((0.0, 0.0));
        }
        if let Some(k) = sys.vars.uh.iter().position(|x| *x == v) {
            return spec.uh_box.get(k).copied().unwrap_or((0.0, 0.0));
        }
        (0.0, 0.0)
    };
    let mut lo = 0.0;
    let mut hi = 0.0;
    for (m, c) in p.terms() {
        let (mut tlo, mut thi) = (c, c);
        for v in m.support() {
            let (vlo, vhi) = range_of(v);
            let exp = m.exp(v);
            let mut plo = f64::INFINITY;
            let mut phi_ = f64::NEG_INFINITY;
            for base in [vlo, vhi, if vlo <= 0.0 && vhi >= 0.0 { 0.0 } else { vlo }] {
                let val = base.powi(exp as i32);
                plo = plo.min(val);
                phi_ = phi_.max(val);
            }
            let cands =
                [tlo * plo, tlo * phi_, thi * plo, thi * phi_];
            tlo = cands.iter().cloned().fold(f64::INFINITY, f64::min);
            thi = cands.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        lo += tlo;
        hi += thi;
    }
    (lo, hi)
}

// ---- shrink-and-retry outer loop ----

pub struct ShrinkOutcome {
    pub funnel: Funnel,
    pub teb: Teb,
    pub verdict: SafetyVerdict,
    pub factor: f64,
    pub history: Vec<(f64, bool)>,
}

fn scale_box(b: &[(f64, f64)], factor: f64) -> Vec<(f64, f64)> {
    b.iter()
        .map(|&(lo, hi)| {
            let c = 0.5 * (lo + hi);
            let r = 0.5 * (hi - lo) * factor;
            (c - r, c + r)
        })
        .collect()
}

/// Synthesize / extract / check, shrinking the planner sets about their
/// centers per the schedule until the safety condition holds.
pub fn shrink_and_retry(
    sys: &ErrorSystem,
    opts: &SynthOptions,
    spec: &SafetySpec,
    schedule: &[f64],
    shape: TebShapeRequest,
    time_varying: bool,
) -> Result<ShrinkOutcome, SynthError> {
    if schedule.is_empty() {
        return Err(SynthError::Precondition("empty shrink schedule".into()));
    }
    let mut history = Vec::new();
    let mut last: Option<ShrinkOutcome> = None;
    for &factor in schedule {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(SynthError::Precondition("shrink factors must lie in (0, 1]".into()));
        }
        let mut scaled = sys.clone();
        scaled.planner.uh_box = scale_box(&sys.planner.uh_box, factor);
        if let Some(xb) = &sys.planner.xh_box {
            scaled.planner.xh_box = Some(scale_box(xb, factor));
        }
        let mut scaled_spec = spec.clone();
        scaled_spec.uh_box = scale_box(&spec.uh_box, factor);
        scaled_spec.xh_box = scale_box(&spec.xh_box, factor);
        let outcome = if time_varying {
            synthesize_funnel(&scaled, opts)
        } else {
            synthesize_invariant(&scaled, opts)
        }?;
        let teb = extract_teb(&scaled, &outcome.funnel, shape, opts)?;
        let verdict = check_safety(&scaled, &teb, &scaled_spec)?;
        let safe = verdict.safe;
        history.push((factor, safe));
        last = Some(ShrinkOutcome { funnel: outcome.funnel, teb, verdict, factor, history: history.clone() });
        if safe {
            break;
        }
    }
    Ok(last.expect("nonempty schedule"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{self, IntegratorConfig};

    fn scalar_system() -> ErrorSystem {
        // xdot = -x + u tracked against a planner pinned at the origin.
        let cfg = models::CustomPairConfig {
            tracker_states: 1,
            tracker_inputs: 1,
            tracker_f: vec![models::PolyData {
                terms: vec![models::TermData {
                    coeff: -1.0,
                    monomial: [("x1".to_string(), 1)].into(),
                }],
            }],
            tracker_g: vec![vec![models::PolyData {
                terms: vec![models::TermData { coeff: 1.0, monomial: Default::default() }],
            }]],
            tracker_u_box: vec![(-1.0, 1.0)],
            tracker_state_ineqs: vec![],
            planner_states: 1,
            planner_inputs: 0,
            planner_f: vec![models::PolyData { terms: vec![] }],
            planner_x_box: None,
            planner_u_box: vec![],
            planner_du_box: vec![],
            t_s: 0.1,
            pi: vec![models::PolyData { terms: vec![] }],
            phi: None,
            nu: None,
            e0_radius_sq: 0.25,
        };
        models::build_custom_pair(&cfg).unwrap()
    }

    #[test]
    fn scalar_invariant_synthesis_certifies() {
        let sys = scalar_system();
        let opts = SynthOptions { n_iter: 2, bisect_iters: 3, ..Default::default() };
        let out = synthesize_invariant(&sys, &opts).unwrap();
        let f = &out.funnel;
        assert!(!f.time_varying);
        // The initial set must fit: gamma at least covers e^2 <= 0.25 under V.
        // Sampled boundary decrease: dV/de (f_e + g_e kappa) < 0 at V = gamma.
        for k in 0..200 {
            let s = -1.0 + 2.0 * (k as f64) / 199.0;
            if s.abs() < 1e-3 {
                continue;
            }
            let dir = [s];
            let Some(scale) = f.boundary_scale(&sys, 0.0, &dir) else { continue };
            let e = [dir[0] * scale];
            let u = f.kappa_at(&sys, 0.0, &e, &[0.0], &[]);
            assert!(u[0] <= 1.0 + 1e-6 && u[0] >= -1.0 - 1e-6, "input bound violated");
            let rhs = sys.error_rhs(&e, &[0.0], &[], &u);
            let mut buf = sys.vars.buffer();
            sys.vars.fill(&mut buf, &sys.vars.e, &e);
            let dv = f.v.differentiate(sys.vars.e[0]).eval_slice(&buf);
            assert!(dv * rhs[0] < 1e-9, "boundary decrease violated at e = {}", e[0]);
        }
        // E0 containment: V(e) <= gamma on e^2 <= 0.25.
        for k in 0..100 {
            let e = [-0.5 + (k as f64) / 99.0];
            assert!(f.v_at(&sys, 0.0, &e) <= f.gamma + 1e-7);
        }
    }

    #[test]
    fn invariant_rejects_input_dependent_pi() {
        let sys = models::builtin_integrator_pair(&IntegratorConfig::default()).unwrap();
        let err = synthesize_invariant(&sys, &SynthOptions::default());
        assert!(matches!(err, Err(SynthError::Precondition(_))));
    }

    #[test]
    fn unstable_uncontrolled_system_fails() {
        // xdot = x with u pinned to zero: no certificate can exist.
        let cfg = models::CustomPairConfig {
            tracker_states: 1,
            tracker_inputs: 1,
            tracker_f: vec![models::PolyData {
                terms: vec![models::TermData {
                    coeff: 1.0,
                    monomial: [("x1".to_string(), 1)].into(),
                }],
            }],
            tracker_g: vec![vec![models::PolyData {
                terms: vec![models::TermData { coeff: 1.0, monomial: Default::default() }],
            }]],
            tracker_u_box: vec![(0.0, 0.0)],
            tracker_state_ineqs: vec![],
            planner_states: 1,
            planner_inputs: 0,
            planner_f: vec![models::PolyData { terms: vec![] }],
            planner_x_box: None,
            planner_u_box: vec![],
            planner_du_box: vec![],
            t_s: 0.1,
            pi: vec![models::PolyData { terms: vec![] }],
            phi: None,
            nu: None,
            e0_radius_sq: 0.25,
        };
        let sys = models::build_custom_pair(&cfg).unwrap();
        let opts = SynthOptions { init_max_iters: 3, ..Default::default() };
        let out = synthesize_invariant(&sys, &opts);
        assert!(out.is_err(), "uncontrollable unstable system must not certify");
    }

    #[test]
    fn integrator_funnel_certifies_and_bounds_inputs() {
        let sys = models::builtin_integrator_pair(&IntegratorConfig::default()).unwrap();
        let opts = SynthOptions {
            v_time: VTimeBasis::AffineInT,
            seed: SeedKind::Gains(vec![1.0, 2.0]),
            n_iter: 2,
            bisect_iters: 3,
            ..Default::default()
        };
        let out = synthesize_funnel(&sys, &opts).unwrap();
        let f = &out.funnel;
        assert!(f.time_varying);
        assert!(f.gamma > 0.0);
        // Jump closure sampled: V(T_s, e) <= gamma implies V(0, h) <= gamma.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..2000 {
            let dir: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if dir[0].abs() + dir[1].abs() < 1e-3 {
                continue;
            }
            let Some(scale) = f.boundary_scale(&sys, f.t_s, &dir) else { continue };
            let inside = rng.gen_range(0.0..1.0f64).sqrt();
            let e = [dir[0] * scale * inside, dir[1] * scale * inside];
            let du = [rng.gen_range(-0.05..0.05)];
            let h = sys.jump_eval(&e, &[0.0], &[0.0], &du);
            assert!(
                f.v_at(&sys, 0.0, &h) <= f.gamma + 1e-6,
                "jump escape: V0(h) = {} > gamma = {}",
                f.v_at(&sys, 0.0, &h),
                f.gamma
            );
        }
    }

    #[test]
    fn teb_box_of_unit_ball_funnel() {
        // Time-invariant funnel V = e'e with gamma = 1: the box is the unit
        // cube.
        let sys = scalar_system();
        let reg = &sys.vars.reg;
        let v = Poly::from_terms(reg, [(Monomial::var_pow(sys.vars.e[0], 2), 1.0)]);
        let funnel = Funnel {
            v,
            gamma: 1.0,
            t_s: 0.1,
            kappa: vec![Poly::zero(reg)],
            time_varying: false,
            digest: CertDigest { max_residual: 0.0, min_gram_eig: 0.0, constraints: vec![] },
        };
        let teb = extract_teb(&sys, &funnel, TebShapeRequest::Box, &SynthOptions::default()).unwrap();
        match &teb.shape {
            TebShape::Box { lower, upper } => {
                assert!((upper[0] - 1.0).abs() < 1e-4, "upper {}", upper[0]);
                assert!((lower[0] + 1.0).abs() < 1e-4, "lower {}", lower[0]);
            }
            _ => panic!("expected box"),
        }
    }

    #[test]
    fn safety_interval_examples() {
        // TEB = unit box, pi = identity, planner box 1, tracker box 2 -> safe.
        let vars = crate::models::SysVars::new(1, 1, 0);
        let reg = &vars.reg;
        let tracker = crate::models::TrackerModel {
            n_x: 1,
            n_u: 1,
            dynamics: crate::models::Dynamics::Poly {
                f: vec![Poly::zero(reg)],
                g: vec![vec![Poly::constant(reg, 1.0)]],
            },
            state_ineqs: vec![],
            u_box: vec![(-1.0, 1.0)],
        };
        let planner = crate::models::PlannerModel {
            n_x: 1,
            n_u: 0,
            dynamics: crate::models::PlannerDynamics::Poly { f: vec![Poly::zero(reg)] },
            xh_box: Some(vec![(-1.0, 1.0)]),
            uh_box: vec![],
            du_box: vec![],
            t_s: 0.1,
        };
        let pi = vec![Poly::var(reg, vars.xh[0])];
        let maps = crate::models::ComparisonMaps::identity_phi(&vars, pi);
        let e0 = Poly::from_terms(reg, [(Monomial::var_pow(vars.e[0], 2), 1.0), (Monomial::one(), -0.01)]);
        let sys = crate::models::derive_error_system(vars, tracker, planner, maps, e0).unwrap();
        let teb = Teb { shape: TebShape::Box { lower: vec![-1.0], upper: vec![1.0] }, t_s: 0.1 };
        let spec_safe = SafetySpec {
            tracker_set: TrackerSet::Box(vec![Some((-2.0, 2.0))]),
            xh_box: vec![(-1.0, 1.0)],
            uh_box: vec![],
        };
        let v = check_safety(&sys, &teb, &spec_safe).unwrap();
        assert!(v.safe);
        assert!(v.margins[0].1 >= -1e-9);

        let spec_unsafe = SafetySpec {
            tracker_set: TrackerSet::Box(vec![Some((-1.5, 1.5))]),
            xh_box: vec![(-1.0, 1.0)],
            uh_box: vec![],
        };
        let v2 = check_safety(&sys, &teb, &spec_unsafe).unwrap();
        assert!(!v2.safe);
        assert!(v2.witness.is_some());
        let w = v2.witness.unwrap();
        assert!(w[0].abs() > 1.5 - 1e-6, "witness near the violated corner");
    }
}

/// Test hook: builds one raw V-step program with a constraint-family mask.
#[allow(clippy::too_many_arguments)]
pub fn debug_v_step_masked(
    sys: &ErrorSystem,
    opts: &SynthOptions,
    time_varying: bool,
    group: &KappaGroup,
    gamma: f64,
    v_prev: &Poly,
    levelset: bool,
    relax: bool,
    mask: u8,
) -> Result<SosProgram, SosError> {
    Template::new(sys, opts, time_varying).v_step_masked(group, gamma, v_prev, levelset, relax, mask)
}

/// Test hook: extracts the controller group from kappa-step certificates.
pub fn debug_extract_group(
    sys: &ErrorSystem,
    opts: &SynthOptions,
    time_varying: bool,
    certs: &crate::sosprog::Certificates,
) -> Result<KappaGroup, SosError> {
    Template::new(sys, opts, time_varying).extract_group(certs)
}
