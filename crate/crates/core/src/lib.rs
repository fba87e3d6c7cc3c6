pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod propensity;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Matrix64 = nn::Matrix<f64>;
pub type Matrix32 = nn::Matrix<f32>;
pub type MultiHeadNet64 = model::MultiHeadNet<f64>;
pub type MultiHeadNet32 = model::MultiHeadNet<f32>;
pub type GpsModel64 = propensity::GpsModel<f64>;
pub type GpsModel32 = propensity::GpsModel<f32>;
