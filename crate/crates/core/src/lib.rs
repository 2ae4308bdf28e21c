//! Transductive classification of a batch of embedding vectors.
//!
//! A batch of query embeddings is classified jointly against a set of text
//! prototypes. The assignments minimize a GMM clustering term with one
//! shared diagonal covariance, a kNN Laplacian term, and a KL penalty toward
//! the temperature-softmax zero-shot predictions. An optional labeled
//! support set adds a cross-entropy term (few-shot mode).
//!
//! Modules, bottom up:
//!
//! - [`types`]: validated matrices, graph, task and hyper-parameters
//! - [`zero_shot`]: soft pseudo-labels and initial class means
//! - [`affinity`]: exact kNN cosine graph
//! - [`solver`]: block updates, objectives and the outer loop
//! - [`fewshot`]: shot splitting and the support-weight search
//! - [`io`]: embedding, label, prediction and config files
//! - [`synth`]: seeded synthetic tasks

pub mod affinity;
pub mod error;
pub mod fewshot;
pub mod io;
pub mod numeric;
pub mod solver;
pub mod synth;
pub mod types;
pub mod zero_shot;

pub use error::{Error, Result};
pub use solver::{run, run_observed, Block, ObjectiveKind, SolverState, TraceRecord};
pub use types::{
    validate_task, AffinityGraph, EmbeddingMatrix, GmmParams, Hyperparams, SimplexAssignments,
    Support, TaskSpec,
};

/// Fraction of positions where `predicted` equals `truth`.
pub fn top1_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty {
            what: "truth labels",
        });
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}
