//! Multitask bitemporal image transformer: joint 2D change masks and
//! elevation-change regression from pairs of co-registered optical images.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod training;
