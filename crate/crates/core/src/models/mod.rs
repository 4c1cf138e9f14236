//! Statistical models implementing [`LatentModel`](crate::model::LatentModel).

pub mod blr;
pub mod bnn;
pub mod conjugate;
pub mod linreg;
pub mod poly;
pub mod special;
pub mod student_t;

pub use blr::BayesianLogistic;
pub use bnn::TinyBnn;
pub use conjugate::ConjugateGaussian;
pub use linreg::GaussianLinReg;
pub use poly::{polynomial_design, PolynomialReg};
pub use student_t::StudentTLinReg;
