//! Orchestration: corpora, configuration, evaluation sweeps and reports.

pub mod config;
pub mod corpus;
pub mod curves;
pub mod evaluate;
pub mod selfcheck;
pub mod synthetic;

pub use config::{RunConfig, WORKERS_ENV};
pub use corpus::{load_attributions, load_corpus, write_corpus};
pub use curves::emit_curves;
pub use evaluate::{evaluate_corpus, prepare, run_evaluation, EvaluationOutput, RunSummary};
pub use selfcheck::run_selfcheck;
pub use synthetic::{generate_synthetic, SyntheticCorpora, SyntheticSpec};
