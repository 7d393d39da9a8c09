//! Two-step cross-domain slot filling: a BIO entity tagger over {O, B, I}
//! followed by a per-span slot-type classifier that scores spans against
//! embedded slot descriptions, with optional template regularization.

pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod templates;
pub mod trainer;

pub use error::{Error, Result};

// The book's Rust snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/crf.md")]
    mod crf {}
    #[doc = include_str!("../../../book/src/slot_typing.md")]
    mod slot_typing {}
    #[doc = include_str!("../../../book/src/templates.md")]
    mod templates {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
