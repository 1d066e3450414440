//! Point-set neuron reconstruction: SWC morphologies, volumes, synthetic
//! data, set matching, the detection network, training and tree assembly.

pub mod connect;
mod dual;
pub mod metrics;
pub mod net;
pub mod points;
pub mod render;
pub mod set_match;
pub mod swc;
pub mod train;
pub mod volume;

pub use points::{PointSet, PredPoint, SetRole};
