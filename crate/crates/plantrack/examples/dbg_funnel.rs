use plantrack::models::{builtin_integrator_pair, IntegratorConfig};
use plantrack::synthesis::*;
use plantrack::conic;

fn main() {
    let sys = builtin_integrator_pair(&IntegratorConfig::default()).unwrap();
    let opts = SynthOptions {
        v_time: VTimeBasis::AffineInT,
        seed: SeedKind::Gains(vec![1.0, 2.0]),
        n_iter: 2,
        bisect_iters: 3,
        ..Default::default()
    };
    let (v_bar, gamma_bar) = seed_v(&sys, &opts, true).unwrap();
    println!("v_bar = {}", v_bar);
    println!("gamma_bar = {gamma_bar}");
    let prog = plantrack::synthesis::debug_kappa_step(&sys, &opts, true, &v_bar, gamma_bar, true).unwrap();
    let compiled = prog.compile().unwrap();
    println!("rows {} cols {}", compiled.problem.num_rows(), compiled.problem.num_cols());
    let mut settings = conic::SolverSettings::default();
    settings.feas_tol = 1e-6;
    let sol = conic::solve(&compiled.problem, &settings).unwrap();
    println!("status {:?} obj {} pres {:.2e} dres {:.2e} gap {:.2e} iters {}", sol.status, sol.objective, sol.primal_residual, sol.dual_residual, sol.gap, sol.iterations);
    match compiled.map.recover(&prog, &sol) {
        Ok(certs) => {
            println!("max_residual {:.3e} min_gram_eig {:.3e}", certs.max_residual, certs.min_gram_eig);
            for c in &certs.constraints {
                println!("  {}: resid {:.3e} eig {:.3e}", c.name, c.residual, c.min_gram_eig);
            }
            println!("lambda = {:?}", certs.decision("lambda").map(|p| p.coeff(&plantrack::poly::Monomial::one())));
        }
        Err(e) => println!("recover error: {e}"),
    }
}
