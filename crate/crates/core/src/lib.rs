//! Multi-exposure raw burst restoration: tensors with reverse-mode autograd,
//! the network and its blocks, the objective, synthetic data and training.
//!
//! The guide under `book/` walks through each part with runnable examples.

pub mod blocks;
pub mod error;
pub mod io;
pub mod model;
pub mod objective;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ModelParams, ParamBuilder, ParamScope, ParamSpec};
pub use tensor::{DTypeMode, Element, Tensor};

// The guide's snippets run as doctests so they cannot drift from the code.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/blocks.md")]
    mod blocks {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
