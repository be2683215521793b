//! Expert-guided anomaly detection for industrial inspection: a patch
//! memory bank, distribution-based thresholding, prompt construction for a
//! vision-language model, and confidence-aware attention scaling.

pub mod caas;
pub mod coreset;
pub mod dbt;
pub mod feature_store;
pub mod pipeline;
pub mod prompting;
pub mod scoring;
