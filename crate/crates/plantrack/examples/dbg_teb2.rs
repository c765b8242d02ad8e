use plantrack::models::{builtin_vehicle_pair, VehicleConfig};
use plantrack::synthesis::*;
use plantrack::poly::{Monomial, Poly};
use plantrack::sosprog::{AffForm, LinPoly, SosProgram};

fn main() {
    let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
    let vd: plantrack::models::PolyData = serde_json::from_str(&std::fs::read_to_string("/tmp/vfunnel.json").unwrap()).unwrap();
    let v = vd.to_poly(&sys.vars.reg).unwrap();
    let gamma = 1.0;
    let reg = &sys.vars.reg;
    let vars = &sys.vars;
    // One box face: b - e1 >= 0 on the funnel.
    let v_mg = v.checked_add(&Poly::constant(reg, -gamma)).unwrap();
    let t = Poly::var(reg, vars.t);
    let p_time = t.checked_mul(&t).unwrap().sub(&t.scale(sys.planner.t_s));
    let mut mult_vars = vec![vars.t];
    mult_vars.extend(sys.vars.e.iter().cloned());
    let mut prog = SosProgram::new(reg);
    let b = prog.declare_scalar("b").unwrap();
    let expr = LinPoly::zero(reg)
        .add_form(&Monomial::one(), &AffForm::handle(b))
        .add_poly(&Poly::var(reg, vars.e[0]).scale(-1.0));
    let ci = prog.assert_sos("face", expr);
    prog.add_sos_multiplier(ci, "s", &mult_vars, 2, &v_mg);
    prog.add_sos_multiplier(ci, "st", &mult_vars, 2, &p_time);
    prog.minimize(AffForm::handle(b));
    let compiled = prog.compile().unwrap();
    println!("rows {} cols {}", compiled.problem.num_rows(), compiled.problem.num_cols());
    let mut settings = plantrack::conic::SolverSettings::default();
    settings.feas_tol = 1e-6; settings.gap_tol = 1e-6; settings.verbose = true;
    let sol = plantrack::conic::solve(&compiled.problem, &settings).unwrap();
    println!("status {:?} obj {:.6} pres {:.2e}", sol.status, sol.objective, sol.primal_residual);
}
