pub mod autodiff;
pub mod filter;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod learned_models;
pub mod regime_net;
pub mod checkpoint;
pub mod regime_filter;
pub mod training;
pub mod baselines;
pub mod methods;
pub mod data;
