use plantrack::models::{builtin_vehicle_pair, VehicleConfig};
use plantrack::synthesis::debug_linearized;

fn main() {
    let sys = builtin_vehicle_pair(&VehicleConfig::default()).unwrap();
    let (a, b) = debug_linearized(&sys);
    println!("A = {a:.4}");
    println!("B = {b:.4}");
    println!("A eigs: {:?}", a.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect::<Vec<_>>());
}
