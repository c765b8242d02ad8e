use plantrack::models::{builtin_vehicle_pair, VehicleConfig};
use plantrack::synthesis::*;
use rand::{Rng, SeedableRng};

fn main() {
    let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
    let opts = SynthOptions {
        kappa_on_uh: true, alpha: 2.0,
        seed_q: Some(vec![0.39, 0.28, 1.0, 0.148, 0.148, 0.148]),
        seed_r: Some(vec![0.69, 0.028]),
        seed_extents: Some(vec![1.6, 1.9, 1.0, 2.6, 2.6, 2.6]),
        ..Default::default()
    };
    let (p, alpha_eff) = seed_matrix(&sys, &opts).unwrap();
    println!("alpha_eff {alpha_eff}");
    let (v_bar, gamma) = seed_v(&sys, &opts, true).unwrap();
    println!("gamma_bar {gamma:.3}");
    for i in 0..6 {
        println!("  e{} seed extent {:.3}", i+1, (gamma / p[(i,i)]).sqrt());
    }
    let funnel = Funnel { v: v_bar.clone(), gamma, t_s: sys.planner.t_s, kappa: vec![],
        time_varying: true, digest: CertDigest { max_residual: 0.0, min_gram_eig: 0.0, constraints: vec![] } };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    // Jump margin: sample e on the V(Ts,.)=gamma boundary, du corners.
    let mut worst_jump = f64::NEG_INFINITY;
    for _ in 0..20000 {
        let dir: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        if dir.iter().map(|d| d*d).sum::<f64>() < 1e-6 { continue; }
        let Some(s) = funnel.boundary_scale(&sys, sys.planner.t_s, &dir) else { continue };
        let e: Vec<f64> = dir.iter().map(|d| d * s).collect();
        for corner in 0..4 {
            let du = vec![
                if corner & 1 == 1 { sys.planner.du_box[0].1 } else { sys.planner.du_box[0].0 },
                if corner & 2 == 2 { sys.planner.du_box[1].1 } else { sys.planner.du_box[1].0 },
            ];
            let h = sys.jump_eval(&e, &[0.0;3], &[0.0, 3.0], &du);
            worst_jump = worst_jump.max(funnel.v_at(&sys, 0.0, &h) - gamma);
        }
    }
    println!("worst jump excess V(0,h)-gamma on boundary: {worst_jump:.4}");
    // Decrease requirement at boundary with IDEAL unbounded kappa:
    // min over u in U of dV/de (f+g u) + dV/dt; report worst over samples.
    let mut worst_dec = f64::NEG_INFINITY;
    let mut worst_at = (vec![], vec![]);
    for _ in 0..20000 {
        let t = rng.gen_range(0.0..sys.planner.t_s);
        let dir: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        if dir.iter().map(|d| d*d).sum::<f64>() < 1e-6 { continue; }
        let Some(s) = funnel.boundary_scale(&sys, t, &dir) else { continue };
        let e: Vec<f64> = dir.iter().map(|d| d * s).collect();
        let uh = vec![rng.gen_range(-0.3927..0.3927), rng.gen_range(2.0..4.0)];
        // grad V wrt e at (t, e), plus dV/dt
        let mut buf = sys.vars.buffer();
        buf[sys.vars.t.index()] = t;
        sys.vars.fill(&mut buf, &sys.vars.e, &e);
        let grad: Vec<f64> = (0..6).map(|i| funnel.v.differentiate(sys.vars.e[i]).eval_slice(&buf)).collect();
        let dvdt = funnel.v.differentiate(sys.vars.t).eval_slice(&buf);
        let f0 = sys.error_rhs(&e, &[0.0;3], &uh, &[0.0, 0.0]);
        let drift: f64 = (0..6).map(|i| grad[i] * f0[i]).sum::<f64>() + dvdt;
        // control effect columns
        let mut bu = [0.0f64; 2];
        for c in 0..2 {
            let mut unit = vec![0.0, 0.0]; unit[c] = 1.0;
            let fu = sys.error_rhs(&e, &[0.0;3], &uh, &unit);
            bu[c] = (0..6).map(|i| grad[i] * (fu[i] - f0[i])).sum();
        }
        // best-case u within the box
        let mut best = drift;
        for c in 0..2 {
            let (lo, hi) = sys.tracker.u_box[c];
            best += if bu[c] >= 0.0 { bu[c] * lo } else { bu[c] * hi };
        }
        if best > worst_dec { worst_dec = best; worst_at = (e.clone(), uh.clone()); }
    }
    println!("worst boundary decrease (ideal box-bounded u): {worst_dec:.4} at e={:?} uh={:?}", worst_at.0.iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>(), worst_at.1);
}
