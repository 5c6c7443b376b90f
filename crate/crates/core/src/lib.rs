//! Safe navigation from trinocular stereo with an online-learned disparity
//! error model and measurement-robust control barrier functions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error_model;
pub mod geometry;
pub mod image;
pub mod qp;
pub mod safety;
pub mod scalar;
pub mod scene;
pub mod sim;
pub mod stereo;
pub mod theorem;

pub use scalar::Real;

pub type CameraRig = geometry::CameraRig<f64>;
pub type RobotPose = geometry::RobotPose<f64>;
pub type Point3 = geometry::Point3<f64>;
pub type ErrorModelParams = error_model::ErrorModelParams<f64>;
pub type FeatureVector = error_model::FeatureVector<f64>;
pub type UncertaintySet = error_model::UncertaintySet<f64>;
