//! Federated averaging as a discrete stochastic process and as its
//! continuous-time diffusion limit, with closed-form results for quadratic
//! clients, normality diagnostics for the server update, and evaluators for
//! the convergence bounds.

pub mod bounds;
pub mod discrete;
pub mod error;
pub mod experiment;
pub mod format;
pub mod linalg;
pub mod model;
pub mod quadratic;
pub mod rng;
pub mod schedule;
pub mod sde;
pub mod stats;

pub use discrete::{FedAvgConfig, ServerUpdateDraw, Trajectory};
pub use error::{Error, Result};
pub use model::{BoxDomain, Client, ClientLoss, Problem, SmoothnessConstants, WeightVector};
pub use schedule::Schedule;
