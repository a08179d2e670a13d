//! Robustness evaluation of multiple-choice question answering.
//!
//! Items are loaded into a canonical schema, perturbed with seeded one-step
//! transformations or routed through two-step prompting pipelines, answered
//! by text-generation endpoints (or deterministic mocks), scored under a
//! strict single-label output contract and reported as baseline-delta tables.

pub mod adapters;
pub mod mcqa;
pub mod perturb;
pub mod rng;
pub mod prompting;
pub mod llm_client;
pub mod scoring;
pub mod twostep;
pub mod runner;
pub mod report;
pub mod demo;
pub mod api;
