//! Composable multi-hop retrieval-augmented question answering.
//!
//! A question flows through decomposition, per-step retrieval and answering,
//! verification, and an outer self-reflection loop. Every model call goes
//! through [`gateway::Gateway`], so the whole pipeline can be replayed from a
//! script without network access.

pub mod evaluation;
pub mod gateway;
pub mod model;
pub mod modules;
pub mod orchestrator;
pub mod retrieval;
