use plantrack::models::{builtin_vehicle_pair, VehicleConfig};
use plantrack::synthesis::*;
use rand::{Rng, SeedableRng};

fn margins(sys: &plantrack::models::ErrorSystem, opts: &SynthOptions) -> Option<(f64, f64, f64, f64, Vec<f64>)> {
    let (_, alpha_eff) = seed_matrix(sys, opts).ok()?;
    let (v_bar, gamma) = seed_v(sys, opts, true).ok()?;
    let funnel = Funnel { v: v_bar, gamma, t_s: sys.planner.t_s, kappa: vec![],
        time_varying: true, digest: CertDigest { max_residual: 0.0, min_gram_eig: 0.0, constraints: vec![] } };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut worst_jump = f64::NEG_INFINITY;
    let mut worst_dec = f64::NEG_INFINITY;
    for k in 0..12000 {
        let dir: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        if dir.iter().map(|d| d * d).sum::<f64>() < 1e-6 { continue; }
        if k % 2 == 0 {
            let Some(s) = funnel.boundary_scale(sys, sys.planner.t_s, &dir) else { continue };
            let e: Vec<f64> = dir.iter().map(|d| d * s).collect();
            for corner in 0..4 {
                let du = vec![
                    if corner & 1 == 1 { sys.planner.du_box[0].1 } else { sys.planner.du_box[0].0 },
                    if corner & 2 == 2 { sys.planner.du_box[1].1 } else { sys.planner.du_box[1].0 },
                ];
                let h = sys.jump_eval(&e, &[0.0; 3], &[0.0, 3.0], &du);
                worst_jump = worst_jump.max(funnel.v_at(sys, 0.0, &h) - gamma);
            }
        } else {
            let t = rng.gen_range(0.0..sys.planner.t_s);
            let Some(s) = funnel.boundary_scale(sys, t, &dir) else { continue };
            let e: Vec<f64> = dir.iter().map(|d| d * s).collect();
            let uh = vec![rng.gen_range(-0.3927..0.3927), rng.gen_range(2.0..4.0)];
            let mut buf = sys.vars.buffer();
            buf[sys.vars.t.index()] = t;
            sys.vars.fill(&mut buf, &sys.vars.e, &e);
            let grad: Vec<f64> = (0..6).map(|i| funnel.v.differentiate(sys.vars.e[i]).eval_slice(&buf)).collect();
            let dvdt = funnel.v.differentiate(sys.vars.t).eval_slice(&buf);
            let f0 = sys.error_rhs(&e, &[0.0; 3], &uh, &[0.0, 0.0]);
            let drift: f64 = (0..6).map(|i| grad[i] * f0[i]).sum::<f64>() + dvdt;
            let mut best = drift;
            for c in 0..2 {
                let mut unit = vec![0.0, 0.0];
                unit[c] = 1.0;
                let fu = sys.error_rhs(&e, &[0.0; 3], &uh, &unit);
                let buc: f64 = (0..6).map(|i| grad[i] * (fu[i] - f0[i])).sum();
                let (lo, hi) = sys.tracker.u_box[c];
                best += if buc >= 0.0 { buc * lo } else { buc * hi };
            }
            worst_dec = worst_dec.max(best);
        }
    }
    let exts: Vec<f64> = (0..6).map(|i| {
        let mut unit = vec![0.0; 6]; unit[i] = 1.0;
        funnel.boundary_scale(sys, 0.0, &unit).unwrap_or(f64::NAN)
    }).collect();
    Some((alpha_eff, gamma, worst_jump, worst_dec, exts))
}

fn main() {
    let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
    let qs: Vec<(&str, Option<Vec<f64>>)> = vec![
        ("tgtQ", Some(vec![0.39, 0.28, 1.0, 0.148, 0.148, 0.148])),
        ("ones", None),
        ("posQ", Some(vec![2.0, 2.0, 2.0, 0.3, 0.3, 0.3])),
    ];
    let rs: Vec<(&str, Option<Vec<f64>>)> = vec![
        ("onesR", None),
        ("boxR", Some(vec![0.69, 0.028])),
        ("stiffR", Some(vec![4.0, 0.5])),
    ];
    let exts: Vec<(&str, Option<Vec<f64>>)> = vec![
        ("flr", Some(vec![1.6, 1.9, 1.0, 2.6, 2.6, 2.6])),
        ("nof", None),
    ];
    for (qn, q) in &qs {
        for (rn, r) in &rs {
            for (en, e) in &exts {
                for alpha in [1.0, 2.0] {
                    let opts = SynthOptions {
                        kappa_on_uh: true, alpha,
                        seed_q: q.clone(), seed_r: r.clone(), seed_extents: e.clone(),
                        ..Default::default()
                    };
                    if let Some((ae, g, wj, wd, ex)) = margins(&sys, &opts) {
                        println!("{qn}/{rn}/{en}/a{alpha}: aeff {ae:.2} g {g:7.2} jump {wj:8.3} dec {wd:9.3} ext {:?}",
                            ex.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
                    }
                }
            }
        }
    }
}
