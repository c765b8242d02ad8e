use nalgebra::DMatrix;
fn main() {
    let a = DMatrix::from_row_slice(6, 6, &[
        0.0, 0.0, 0.0, 0.0, 0.9958, 0.0,
        0.0, 0.0, 2.9930, 0.0, 0.0, 0.9958,
        0.0, 0.0, 0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 0.0, -66.4684, 0.0, 8.6921,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 7.9301, 0.0, -45.0521,
    ]);
    let b = DMatrix::from_row_slice(6, 2, &[
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 58.0753, 0.0, 0.0, 1.0, 73.7665, 0.0,
    ]);
    let q = DMatrix::identity(6, 6);
    let r = DMatrix::identity(2, 2);
    match plantrack::debug_riccati(&a, &b, &q, &r) {
        Some((p, k)) => {
            println!("P diag: {:?}", (0..6).map(|i| p[(i,i)]).collect::<Vec<_>>());
            println!("K = {k:.4}");
            let acl = &a - &b * &k;
            println!("cl eigs: {:?}", acl.complex_eigenvalues().iter().map(|c| c.re).collect::<Vec<_>>());
        }
        None => println!("riccati failed"),
    }
}
