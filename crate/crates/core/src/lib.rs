//! Conditional set transformation for set completion.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod matching;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod set;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/sets.md")]
    pub mod sets {}
    #[doc = include_str!("../../../book/src/completion.md")]
    pub mod completion {}
    #[doc = include_str!("../../../book/src/losses.md")]
    pub mod losses {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    pub mod retrieval {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
