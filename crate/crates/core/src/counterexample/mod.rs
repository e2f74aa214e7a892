//! Population-level counterexample where EQML and GEE dispersion estimates give
//! arbitrarily inefficient slope estimates while staying close to a
//! homoscedastic model.

pub mod law;
pub mod quadrature;
pub mod sampler;

pub use law::{divergence_ratio, find_delta_for_eta, golden_section, CounterexampleSpec, DivergenceReport, Law};
pub use quadrature::{integrate, integrate_to_infinity, integrate_with_breaks, Integral, QuadratureSettings};
pub use sampler::{empirical_cross_check, sample_dataset, CrossCheckReport, PdeltaSampler};
