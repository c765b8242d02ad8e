use plantrack::models::{builtin_vehicle_pair, VehicleConfig};
use plantrack::synthesis::*;

fn main() {
    let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
    let opts = SynthOptions { kappa_on_uh: true, alpha: 2.0, ..Default::default() };
    let (v_bar, gamma_bar) = seed_v(&sys, &opts, true).unwrap();
    let mut settings = plantrack::conic::SolverSettings::default();
    settings.feas_tol = 1e-6; settings.gap_tol = 1e-6;
    // kappa step once to get the fixed group
    let kprog = debug_kappa_step_masked(&sys, &opts, true, &v_bar, gamma_bar, true, 15).unwrap();
    let kc = kprog.compile().unwrap();
    let ksol = plantrack::conic::solve(&kc.problem, &settings).unwrap();
    println!("kappa status {:?}", ksol.status);
    let kcerts = kc.map.recover(&kprog, &ksol).unwrap();
    let group = debug_extract_group(&sys, &opts, true, &kcerts).unwrap();
    for (mask, name) in [(2u8|32|16,"dec+pin+posdef"),(2|16,"dec+posdef")] {
        let prog = debug_v_step_masked(&sys, &opts, true, &group, gamma_bar, &v_bar, false, true, mask).unwrap();
        let compiled = prog.compile().unwrap();
        let mut s2 = settings.clone(); s2.feas_tol = 1e-9;
        let sol = plantrack::conic::solve(&compiled.problem, &s2).unwrap();
        println!("{name:10} rows {:5} status {:?} pres {:.1e} dres {:.1e}", compiled.problem.num_rows(), sol.status, sol.primal_residual, sol.dual_residual);
    }
}
