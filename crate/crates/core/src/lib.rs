//! Desk-scale BERT-style encoder pretraining with functional relative
//! positional encoding.
//!
//! ```text
//! tokens ─ embed (+ absolute positions for PAPE) ─ LN
//!     └─ [ self-attention (+ relative aᴷ/aⱽ terms) ─ add & LN ─ FFN ─ add & LN ] × L
//!          ├─ MLM head: dense ─ gelu ─ LN ─ tied decoder
//!          └─ NSP head: pooler(tanh) ─ classifier
//! ```
//!
//! Training uses LAMB (or Adam) with warmup/decay schedules, optionally
//! under software-emulated binary16 arithmetic with full-precision master
//! weights. The data pipeline produces character-masked or whole-word-masked
//! examples; the harness wires everything to a CLI and an ablation grid.

pub mod attention;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod optim;
pub mod posenc;

pub use error::{Error, Result};
pub use numerics::{ParamStore, Tensor};
