pub mod anomaly;
pub mod augment;
pub mod config;
pub mod distill;
pub mod downstream;
pub mod jetdata;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
