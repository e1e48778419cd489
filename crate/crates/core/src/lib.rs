pub mod dataset;
pub mod geometry;
pub mod response;
pub mod retrieval;
pub mod textgen;
pub mod verify;
pub mod reward;
pub mod grpo;
pub mod eval;
pub mod config;
