//! Dense linear algebra, similarity kernels, masked softmax and the
//! splittable random stream used across the simulator.

mod kernels;
mod linalg;
mod rng;
mod scalar;

pub use kernels::{masked_softmax, similarity, softmax, SimKind, Similarity};
pub use linalg::{l2_normalize, matmul, orthonormal_rows, Matrix, Vector};
pub use rng::{dirichlet_sample, gaussian, SimRng};
pub use scalar::Scalar;
