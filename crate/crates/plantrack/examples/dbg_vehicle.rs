use plantrack::models::{builtin_vehicle_pair, VehicleConfig};
use plantrack::synthesis::*;
use std::time::Instant;

fn main() {
    let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
    println!("f_e degrees: {:?}", sys.f_e.iter().map(|p| p.degree()).collect::<Vec<_>>());
    println!("f_e terms:   {:?}", sys.f_e.iter().map(|p| p.num_terms()).collect::<Vec<_>>());
    let opts = SynthOptions {
        kappa_on_uh: true,
        alpha: 2.0,
        n_iter: 3,
        bisect_iters: 4,
        init_max_iters: 6,
        ..Default::default()
    };
    let (v_bar, gamma_bar) = seed_v(&sys, &opts, true).unwrap();
    println!("gamma_bar = {gamma_bar:.3}");
    let t0 = Instant::now();
    let prog = plantrack::synthesis::debug_kappa_step(&sys, &opts, true, &v_bar, gamma_bar, true).unwrap();
    println!("built program in {:?}", t0.elapsed());
    println!("{}", plantrack::sosprog::dump_program(&prog));
    let t0 = Instant::now();
    let compiled = prog.compile().unwrap();
    println!("compiled in {:?}: rows {} cols {}", t0.elapsed(), compiled.problem.num_rows(), compiled.problem.num_cols());
    let mut settings = plantrack::conic::SolverSettings::default();
    settings.feas_tol = 1e-6;
    settings.gap_tol = 1e-6;
    settings.verbose = true;
    let t0 = Instant::now();
    let sol = plantrack::conic::solve(&compiled.problem, &settings).unwrap();
    println!("solved in {:?}: status {:?} obj {:.4} pres {:.2e} iters {}", t0.elapsed(), sol.status, sol.objective, sol.primal_residual, sol.iterations);
    if sol.is_optimal() {
        let certs = compiled.map.recover(&prog, &sol).unwrap();
        println!("lambda = {:?} max_resid {:.2e} min_eig {:.2e}",
            certs.decision("lambda").map(|p| p.coeff(&plantrack::poly::Monomial::one())),
            certs.max_residual, certs.min_gram_eig);
    }
}
