//! A small deterministic tensor engine with tape-based reverse-mode
//! differentiation, in `f64`.
//!
//! Build a [`Tape`], load parameters and inputs as leaves, chain operations,
//! then call [`Tape::backward`] on a scalar:
//!
//! ```
//! use m2clip_autograd::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::new([3], vec![1.0, -2.0, 0.5])?);
//! let sq = tape.mul(x, x)?;
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss)?;
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, -4.0, 1.0]);
//! # Ok::<(), m2clip_autograd::TensorError>(())
//! ```

mod attention;
mod error;
pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use attention::{cosine_matrix, cosine_similarity, multi_head_attention, AttentionWeights, COSINE_EPS};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, CheckOptions, CheckReport, ParamReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
