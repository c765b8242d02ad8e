use plantrack::models::{builtin_vehicle_pair, VehicleConfig};
use plantrack::synthesis::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let alpha: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
    let opts = SynthOptions {
        kappa_on_uh: true,
        kappa_on_t: true,
        alpha,
        n_iter: 2,
        bisect_iters: 3,
        init_max_iters: 25,
        seed_q: Some(vec![2.0, 2.0, 2.0, 0.3, 0.3, 0.3]),
        seed_r: Some(vec![0.69, 0.028]),
        ..Default::default()
    };
    let (v_bar, gamma_bar) = seed_v(&sys, &opts, true).unwrap();
    println!("alpha={alpha} gamma_bar = {gamma_bar:.4}");
    let t0 = Instant::now();
    match synthesize_funnel(&sys, &opts) {
        Ok(out) => {
            println!("CERTIFIED in {:?}: gamma = {:.4}", t0.elapsed(), out.funnel.gamma);
            println!("lambda trace: {:?}", out.init_lambda_trace);
            println!("termination: {}", out.report.termination);
            for r in &out.report.records {
                println!("  it {} {:?} gamma {:.4} lambda {:?} [{}] ms {:.0}", r.iteration, r.kind, r.gamma, r.lambda, r.status, r.solve_ms);
            }
            let teb = extract_teb(&sys, &out.funnel, TebShapeRequest::Box, &opts).unwrap();
            for i in 0..6 {
                println!("e{} half-width {:.4}", i + 1, teb.half_width(i));
            }
        }
        Err(e) => {
            println!("FAILED in {:?}: {e}", t0.elapsed());
        }
    }
    // On failure re-run init alone for the record trail.
    if std::env::args().len() > 2 {
        let template_out = plantrack::synthesis::debug_init(&sys, &opts, true);
        match template_out {
            Ok((_, rep)) | Err((_, rep)) => {
                for r in &rep.records {
                    println!("  init {} {:?} lambda {:?} [{}] ms {:.0}", r.iteration, r.kind, r.lambda, r.status, r.solve_ms);
                }
            }
        }
    }
    let _ = v_bar;
}
