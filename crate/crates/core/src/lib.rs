//! Resource allocation for device-to-device fog computing.
//!
//! An active device splits a computation task between itself and nearby
//! offloading devices, choosing transmit powers, task portions and CPU
//! frequencies so that the expected energy is minimal while every portion
//! finishes before the deadline with a prescribed probability despite random
//! CPU throttling.
//!
//! Two solution methods are provided:
//!
//! * [`dc::solve_dc`]: a penalized difference-of-convex iteration over the
//!   full decision vector.
//! * [`two_step::solve_two_step`]: a convex power/partition problem followed
//!   by a closed-form frequency assignment and a cap-repair loop.
//!
//! plus the [`two_step::local_baseline`] benchmark and a brute-force
//! [`oracle`] for small instances.

pub mod channel;
pub mod config;
pub mod dc;
pub mod error;
pub mod experiments;
pub mod model;
pub mod oracle;
pub mod report;
pub mod solver;
pub mod two_step;
pub mod uncertainty;
pub mod validation;

pub use error::{Error, Result};
pub use model::{Allocation, DeviceCaps, FeasibilityReport, RadioParams, Scenario, TaskSpec};
pub use report::{Method, SolveReport};
pub use uncertainty::{ChanceConstants, Reliability, ThrottleModel};
