//! Single-model attribution of generative models.
//!
//! Given a generative model's final linear layer, this crate inverts observed
//! outputs back to plausible pre-final activations by solving an anchored
//! lasso, and feeds those activations (or simpler raw/frequency features) to
//! a semi-supervised anomaly detector. It also ships the baselines, an
//! experiment harness, and an empirical verification suite for the
//! convex-optimization and sparse-recovery claims the method rests on.

pub mod adapted;
pub mod anomaly;
pub mod baselines;
pub mod error;
pub mod flipad;
pub mod generator;
pub mod harness;
pub mod lasso;
pub mod linop;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

// The guide's code blocks run as doctests so the book cannot drift from the
// library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }
    chapter!(Index, "../../../book/src/index.md");
    chapter!(Operators, "../../../book/src/operators.md");
    chapter!(Lasso, "../../../book/src/lasso.md");
    chapter!(Inversion, "../../../book/src/inversion.md");
    chapter!(Baselines, "../../../book/src/baselines.md");
    chapter!(Detector, "../../../book/src/detector.md");
    chapter!(Verification, "../../../book/src/verification.md");
    chapter!(Experiments, "../../../book/src/experiments.md");
}
