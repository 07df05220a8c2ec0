//! Linear-algebra and Gaussian primitives shared by every other module.
//!
//! All arithmetic is `f64`. Matrices are `nalgebra::DMatrix<f64>`.

mod expm;
mod gaussian;
mod rng;

pub use expm::taylor_matrix_exp;
pub use gaussian::{
    gaussian_condition, gaussian_log_density, psd_factor, psd_repair, sample_gaussian,
    GaussianBelief, PSD_TOLERANCE,
};
pub use rng::{child_seed, SeededRng, RNG_ALGORITHM};

pub type Mat = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
