//! Desk-scale automated transit network simulator with parametric
//! empty-vehicle management, a parameter tuner and a learned parameter
//! selector.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod cli;
pub mod config;
pub mod demand;
pub mod evm;
pub mod learner;
pub mod network;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod tuner;

pub use scalar::Scalar;

pub type Network = network::NetworkModel<f64>;
pub type Network32 = network::NetworkModel<f32>;
pub type Params = evm::EvmParams<f64>;
pub type Params32 = evm::EvmParams<f32>;
pub type Controller = evm::ControllerParams<f64>;
pub type Controller32 = evm::ControllerParams<f32>;
pub type Mlp = learner::MlpModel<f64>;
pub type Mlp32 = learner::MlpModel<f32>;
pub type Clusters = learner::ClusterModel<f64>;
pub type Clusters32 = learner::ClusterModel<f32>;
pub type Selector = learner::ParamSelector<f64>;
