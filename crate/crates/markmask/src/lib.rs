//! Markup-and-mask rationale tooling for open-book question answering.
//!
//! The crate covers the full loop: a three-stage teacher prompt chain
//! (decontextualizing markup, chain-of-thought QA, rationale validation),
//! filtering of the resulting silver records, export of the four student
//! training tasks, an honest-student inference pipeline that keeps the
//! rationale as a strict information bottleneck, and the evaluation suite
//! (answer accuracy, extractiveness, compression, entailment consistency,
//! selective prediction, markup quality, and entity-swap stress tests).
//!
//! Batch scoring paths are data-parallel via rayon when the `parallel`
//! feature (default) is enabled; disabling it falls back to sequential
//! execution with identical results.

pub mod backends;
pub mod corpus;
pub mod eval;
pub mod markup;
pub mod prompting;
pub mod retrieval;
pub mod segment;
pub mod silver;
pub mod student;
pub mod tokens;

/// Map `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order always matches input order.
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
