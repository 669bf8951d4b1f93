//! Reasoning-chain construction, multi-task training and analysis for
//! domain-generalized image classification with vision-language models.

pub mod backend;
pub mod chain;
pub mod corpus;
pub mod genpipe;
pub mod manifest;
pub mod metrics;
pub mod record;
pub mod seed;
pub mod synth;
pub mod train;
