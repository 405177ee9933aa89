pub mod calibration;
pub mod crossfit;
pub mod data;
pub mod error;
pub mod estimators;
pub mod features;
pub mod inference;
pub mod io;
pub mod nuisance;
pub mod pipeline;
pub mod policy;
pub mod simulation;
pub mod step;
