//! Discrete-event simulation of solar irradiance sensor farms: a DEVS
//! kernel, the farm/fog/cloud model graph, grid-based irradiance
//! forecasting, time-series outlier repair, a remote training service,
//! and report generation.

pub mod anomaly;
pub mod devs;
pub mod farm;
pub mod report;
pub mod gridcast;
pub mod store;
pub mod trainsvc;
