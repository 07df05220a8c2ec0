//! Semi-supervised data-driven Bayesian state estimation with compressed
//! linear measurements.
//!
//! A recurrent network maps past measurements `y_{1:t-1}` to a Gaussian prior
//! over the state `x_t`; the linear measurement model then gives the posterior
//! in closed form. Training mixes a supervised term on a small labelled subset
//! with the unsupervised predictive likelihood of every measurement sequence.

pub mod baselines;
pub mod checkpoint;
pub mod container;
pub mod dataset;
pub mod dynamics;
pub mod estimator;
pub mod harness;
pub mod error;
pub mod measurement;
pub mod numerics;
pub mod prior_net;
pub mod trajectory;

pub use error::{Error, Result};
