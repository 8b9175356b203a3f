//! Fleet server: robot registry, simulated LAN, scenarios, the tick loop
//! and the operator endpoint.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod endpoint;
pub mod lan;
pub mod messages;
pub mod protocol;
pub mod registry;
pub mod scenario;
pub mod server;
pub mod studies;
pub mod telemetry;
