//! Separable nonlinear least squares: fit `f = Σ qₙ φₙ(p, t) + ψ(p, t)` by
//! minimising over `p` alone with `q` eliminated at every evaluation.
//!
//! Start with [`optimizer::fit`]; the guide in `book/` walks through each module.

// `!(x > 0.0)` is how the validators reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod covariance;
pub mod error;
pub mod linear;
pub mod model;
pub mod multifile;
pub mod optimizer;
pub mod shortcut;

pub use error::{Error, Result};

// Compile and run the guide's snippets as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/linear-elimination.md")]
    mod linear_elimination {}
    #[doc = include_str!("../../../book/src/shortcut-derivatives.md")]
    mod shortcut_derivatives {}
    #[doc = include_str!("../../../book/src/optimizer.md")]
    mod optimizer {}
    #[doc = include_str!("../../../book/src/covariance.md")]
    mod covariance {}
    #[doc = include_str!("../../../book/src/multi-file.md")]
    mod multi_file {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
