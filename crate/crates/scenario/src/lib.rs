//! Declarative scenarios: loading and validation, deterministic
//! orchestration of the full emulation pipeline, and report emission.

// Validation guards use `!(x >= 0.0)` so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
pub mod presets;
mod report;
mod run;
pub mod schema;

pub use error::ScenarioError;
pub use report::{
    render_report, CombineReport, GatewayReport, KmsReport, LedgerReport, LinkReport, RelayReport,
    Report, ReportFormat, StoreReport,
};
pub use run::{run, run_with, run_with_network, RunOptions};
pub use schema::{load_scenario, parse_scenario, Scenario};
