use serde::{Deserialize, Serialize};

use crate::dc::DcTrace;
use crate::model::{Allocation, FeasibilityReport};
use crate::two_step::RepairEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Local,
    Dc,
    TwoStep,
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Local => "local",
            Method::Dc => "dc",
            Method::TwoStep => "two-step",
            Method::Oracle => "oracle",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// The iteration budget ran out; the last iterate is reported.
    MaxIter,
}

/// Result of one solve on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: Method,
    pub allocation: Allocation,
    /// Expected total energy of `allocation`, J.
    pub expected_energy: f64,
    /// Outer iterations (DC), P2 solves (two-step) or grid points (oracle).
    pub iterations: usize,
    pub status: SolveStatus,
    pub feasibility: FeasibilityReport,
    /// Seconds; excluded from equality comparisons of experiment output.
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<DcTrace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repairs: Vec<RepairEvent>,
}

impl SolveReport {
    pub fn is_feasible(&self) -> bool {
        self.feasibility.is_feasible()
    }
}
