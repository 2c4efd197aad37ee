pub mod autodiff;
pub mod beamform;
pub mod channel;
pub mod dataset;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod training;
