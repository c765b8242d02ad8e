use plantrack::models::{builtin_vehicle_pair, VehicleConfig};
use plantrack::synthesis::*;
use std::time::Instant;

fn main() {
    let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
    let opts = SynthOptions { kappa_on_uh: true, alpha: 2.0, ..Default::default() };
    let (v_bar, gamma_bar) = seed_v(&sys, &opts, true).unwrap();
    let mut settings = plantrack::conic::SolverSettings::default();
    settings.feas_tol = 1e-6;
    settings.gap_tol = 1e-6;
    
    for (mask, name) in [(15u8, "all")] {
        let prog = debug_kappa_step_masked(&sys, &opts, true, &v_bar, gamma_bar, true, mask).unwrap();
        let compiled = prog.compile().unwrap();
        let t0 = Instant::now();
        let sol = plantrack::conic::solve(&compiled.problem, &settings).unwrap();
        let lam = if sol.is_optimal() {
            match compiled.map.recover(&prog, &sol) {
                Ok(c) => { println!("  recover: max_resid {:.2e} min_eig {:.2e}", c.max_residual, c.min_gram_eig);
                    for cc in &c.constraints { if cc.residual > 1e-5 { println!("    {}: resid {:.2e}", cc.name, cc.residual); } }
                    c.decision("lambda").map(|p| p.coeff(&plantrack::poly::Monomial::one())) }
                Err(e) => { println!("  recover err {e}"); None }
            }
        } else { None };
        println!("  pres {:.2e} dres {:.2e} gap {:.2e} iters {}", sol.primal_residual, sol.dual_residual, sol.gap, sol.iterations);
        println!("{name:12} rows {:5} status {:?} lambda {:?} ({:.1?})", compiled.problem.num_rows(), sol.status, lam, t0.elapsed());
    }
}
