//! Planner-tracker synthesis toolbox.
//!
//! Builds tracking controllers and certified tracking error bounds (TEBs) for
//! a high-fidelity / low-fidelity model pair via sum-of-squares programming,
//! then exercises them with an MPC planner in closed-loop simulation.
//!
//! Layered bottom-up:
//! - [`poly`]: sparse multivariate polynomials over named variables
//! - [`conic`]: small-scale interior-point SDP solver
//! - [`sosprog`]: SOS program builder and Gram-matrix compiler
//! - [`models`]: model pairs, error-system derivation, trig approximation
//! - [`bilinear`]: alternating-direction solves of the bilinear SOS programs
//! - [`synthesis`]: funnel/TEB pipelines and safety checks
//! - [`planner`]: receding-horizon MPC with obstacle inflation
//! - [`sim`]: closed-loop simulation and funnel auditing

pub mod bilinear;
pub mod conic;
pub(crate) mod linalg;
pub mod models;
pub mod planner;
pub mod poly;
pub mod sim;
pub mod sosprog;
pub mod synthesis;

/// Test hook for the Riccati helper.
pub fn debug_riccati(
    a: &nalgebra::DMatrix<f64>,
    b: &nalgebra::DMatrix<f64>,
    q: &nalgebra::DMatrix<f64>,
    r: &nalgebra::DMatrix<f64>,
) -> Option<(nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>)> {
    linalg::lqr_riccati(a, b, q, r)
}
