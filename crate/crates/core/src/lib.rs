//! Parameter-efficient adaptation of a frozen video-text dual encoder with
//! TED-Adapters, text adapters and a four-head multi-task decoder.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;
pub mod vocab;

pub use config::{Config, Heads, LayerSet, OptimizerKind, SequentialOrder, TedMode};
pub use error::{Error, Result};
pub use model::{Architecture, Batch, LossParts, Model};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/autograd.md")]
    mod autograd {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/decoder.md")]
    mod decoder {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/ablations.md")]
    mod ablations {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
}
