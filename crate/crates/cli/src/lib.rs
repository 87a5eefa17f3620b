//! Command-line workflow around the search core: seed training, module
//! bank construction, evolutionary search, fine-tuning, reporting, and the
//! adapter ablation. Everything an invocation produces lands in one output
//! directory, CSV-first, fully determined by config + seed.

pub mod artifacts;
pub mod config;
pub mod pipeline;
