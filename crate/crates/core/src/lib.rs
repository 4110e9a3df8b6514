//! Parking process on critical Galton–Watson trees.
//!
//! Cars with a law of mean `m` and variance `σ²` arrive on the vertices of a
//! critical Galton–Watson tree whose offspring law has variance `Σ²`, drive
//! towards the root and park on the first free vertex. The model undergoes a
//! phase transition in `Θ = (1-m)² - Σ²(σ² + m² - m)`.
//!
//! * [`distributions`]: discrete laws, size-biasing, thinning.
//! * [`trees`]: GW trees, size-conditioned trees, truncated Kesten trees.
//! * [`parking`]: the linear-time flux computation and a car-by-car oracle.
//! * [`theory`]: Θ, regimes, `t_max`, the mean flux `Φ(t)` and its ODE.
//! * [`montecarlo`]: estimators with standard errors.
//! * [`cli`]: the batch front-end.
//! * [`report`]: CSV/JSON report rows.

pub mod cli;
pub mod distributions;
pub mod montecarlo;
pub mod parking;
pub mod report;
pub mod rng;
pub mod theory;
pub mod trees;

pub use distributions::{make_law, DistSpec, LawHandle};
pub use rng::RngStream;
pub use trees::Tree;
