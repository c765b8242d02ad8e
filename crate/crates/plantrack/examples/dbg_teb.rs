use plantrack::models::{builtin_vehicle_pair, VehicleConfig};
use plantrack::synthesis::*;
use plantrack::poly::Poly;

fn main() {
    let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
    let opts = SynthOptions { kappa_on_uh: true, alpha: 2.0, n_iter: 1, bisect_iters: 0, init_max_iters: 5, ..Default::default() };
    let out = synthesize_funnel(&sys, &opts).unwrap();
    println!("gamma {}", out.funnel.gamma);
    // Save V to JSON-ish for reuse
    let vd = plantrack::models::PolyData::from_poly(&out.funnel.v);
    std::fs::write("/tmp/vfunnel.json", serde_json::to_string(&vd).unwrap()).unwrap();
    println!("V saved");
    match extract_teb(&sys, &out.funnel, TebShapeRequest::Box, &opts) {
        Ok(teb) => { for i in 0..6 { println!("e{} hw {:.4}", i+1, teb.half_width(i)); } }
        Err(e) => println!("TEB failed: {e}"),
    }
    let _ = Poly::zero(&sys.vars.reg);
}
