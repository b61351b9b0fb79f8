//! Loop-transformation autotuning toolkit.
//!
//! The pipeline runs in stages, one module each:
//!
//! - [`lexer`]: tokenize the marked loop region of a C file.
//! - [`loopir`]: parse tokens into a loop-nest IR and decide step legality.
//! - [`mutate`]: enumerate legal transformation sequences and apply them.
//! - [`encode`]: token encodings, frequency maps, subword embeddings and the
//!   compact 56-element transformation vector.
//! - [`neural`]: a 1D convolutional, densely connected speedup regressor.
//! - [`rank`]: threshold classification, ranking and static/dynamic selection.
//! - [`harness`]: compile-and-time measurement, datasets and evaluation metrics.
//! - [`pipeline`]: fit encoders and the regressor on a dataset, then score it.

pub mod encode;
pub mod harness;
pub mod lexer;
pub mod loopir;
pub mod mutate;
pub mod neural;
pub mod pipeline;
pub mod rank;

pub use encode::{EmbeddingTable, EncodedLoop, EncodingMethod, FreqMaps, TransformVector};
pub use lexer::{Token, TokenKind, TokenSeq};
pub use loopir::LoopNest;
pub use mutate::{TransformationSeq, TransformationStep};
