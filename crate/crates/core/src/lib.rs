//! Low-rank compression of dense classifiers.
//!
//! Ranks are selected per layer by beam search under a compression-ratio
//! band ([`ranksel`]). The model is retrained under a modified-stable-rank
//! penalty ([`regularizer`]), factorized by truncated SVD and fine-tuned
//! ([`compress`]), and optionally quantized ([`quantize`]). [`pipeline`]
//! chains the stages through on-disk checkpoints ([`persist`]).

pub mod compress;
pub mod dataio;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod persist;
pub mod pipeline;
pub mod quantize;
pub mod ranksel;
pub mod regularizer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ratio.md")]
    mod ratio {}
    #[doc = include_str!("../../../book/src/rank-selection.md")]
    mod rank_selection {}
    #[doc = include_str!("../../../book/src/stable-rank.md")]
    mod stable_rank {}
    #[doc = include_str!("../../../book/src/factorization.md")]
    mod factorization {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
