//! Differentiable process-based hydrologic modeling.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`]: scalar reverse-mode tape with gradient checking
//! * [`nn`]: multilayer perceptrons whose weights live on the tape
//! * [`hbv`]: the HBV bucket model written against the tape
//! * [`coupling`]: parameter learning, module replacement and constitutive-law learning
//! * [`train`]: losses, metrics and the Adam loop
//! * [`harness`]: synthetic basins, dataset files, experiments
//!
//! The guide under `book/` walks through each layer; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod autodiff;
pub mod coupling;
pub mod error;
pub mod harness;
pub mod hbv;
pub mod nn;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            mod $name {}
        };
    }
    chapter!(introduction, "introduction.md");
    chapter!(autodiff, "autodiff.md");
    chapter!(networks, "networks.md");
    chapter!(hbv, "hbv.md");
    chapter!(coupling, "coupling.md");
    chapter!(training, "training.md");
    chapter!(experiments, "experiments.md");
    chapter!(cli, "cli.md");
}
