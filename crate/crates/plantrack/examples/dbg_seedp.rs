use plantrack::models::{builtin_vehicle_pair, VehicleConfig};
use plantrack::synthesis::*;

fn main() {
    let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
    let opts = SynthOptions { kappa_on_uh: true, alpha: 2.0, ..Default::default() };
    let p = seed_matrix(&sys, &opts).unwrap();
    println!("P = {p:.5}");
    let eig = p.clone().symmetric_eigen().eigenvalues;
    println!("eigs {:?}", eig.iter().copied().collect::<Vec<_>>());
}
