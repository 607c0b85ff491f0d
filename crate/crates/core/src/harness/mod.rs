//! Desk-scale end-to-end experiment.
//!
//! Shapes on graded backgrounds form a source domain; four photometric shifts
//! (darkening, noise, both, contrast compression) form the targets. A
//! [`TinyModel`] is trained in two stages: style evolution fills a style bank
//! from prompt chains, then transfer training samples from that bank while
//! the optional disentanglement and prototype components add their losses.
//! [`run_ablation`] repeats this for the five component combinations.

mod ablation;
mod data;
mod eval;
mod evolution;
mod model;
mod reference;
mod transfer;

pub use ablation::{
    evolution_chain_seeds, run_ablation, run_evolution, run_pipeline, trend_required, PipelineRun,
};
pub use data::{gen_synthetic, Dataset, SyntheticDomain, SHAPES};
pub use eval::{evaluate_shift, EVAL_CHUNK};
pub use evolution::{
    chain_seed, run_style_evolution, Evolution, StyleSource, TextSetup, STYLE_SOURCE_MAPS,
};
pub use model::{AuxInputs, Disentangler, ForwardOut, ModelArch, TinyModel};
pub use reference::train_plain_supervised;
pub use transfer::{run_transfer_training, EpochMetrics, MetricsLog};
