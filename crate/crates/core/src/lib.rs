//! Active negative selection for multi-negative preference optimization under
//! a log-linear policy.
//!
//! A pool pairs one preferred response with `N` candidate negatives, each
//! embedded in `ℝᵈ`. The crate selects `n ≪ N` negatives that maximize the
//! log-determinant of a Fisher-information surrogate, trains the
//! ridge-regularized Plackett–Luce preference loss on the chosen subset, and
//! measures how far the result lands from the full-pool estimator.
//!
//! ```
//! use massdpo::{prepare_pool, greedy_select, synth::{gen_pool, SynthConfig}};
//! use nalgebra::DVector;
//!
//! let cfg = SynthConfig { dim: 4, candidates_per_pool: 30, clusters: 5, ..Default::default() };
//! let raw = gen_pool(&cfg, 0).unwrap();
//! let pool = prepare_pool(&raw, &DVector::zeros(4), 0.1).unwrap();
//! let sel = greedy_select(&pool, 6, 0.1, false).unwrap();
//! assert_eq!(sel.selected.len(), 6);
//! ```

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod numeric;
pub mod objective;
pub mod pipeline;
pub mod pool;
pub mod rng;
pub mod select;
pub mod synth;
pub mod trainer;

pub use nalgebra;

pub use error::{Error, Result};
pub use objective::{evaluate, Curvature, LossEvaluation, PolicyParams};
pub use pool::{prepare_pool, PreparedPool, RawPool};
pub use select::{greedy_select, select, SelectionResult, Strategy};
pub use trainer::{fit, fit_batch, fit_full, FitReport, TrainConfig};

// The guide's snippets compile and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
}
