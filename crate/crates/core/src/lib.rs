//! Tool-interface annotation, description refinement and teacher-forced
//! evaluation of tool-using agents.

pub mod agent;
pub mod annotator;
pub mod dataset;
pub mod evaluator;
pub mod gateway;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod react;
pub mod refinery;
pub mod sandbox;
pub mod synthesis;
pub mod types;
