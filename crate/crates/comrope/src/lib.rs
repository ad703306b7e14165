//! Rotary positional encodings parameterized by trainable angle matrices.
//!
//! A rotation function `R(x) = exp(Σᵢ Aᵢ xᵢ)` maps an N-dimensional token
//! coordinate to a block-diagonal special-orthogonal matrix built from
//! skew-symmetric generators. When the generators pairwise commute,
//! `R(x)ᵀ R(y) = R(y − x)` and attention logits computed from rotated
//! queries and keys depend only on relative positions. This crate houses:
//!
//! - [`linalg`]: dense small-matrix kernels (skew construction, matrix
//!   exponential, Fréchet derivative, commutators, block-diagonal assembly);
//! - [`ropefamily`]: the four angle-matrix constructions (vanilla RoPE,
//!   LieRE, ComRoPE-AP, ComRoPE-LD) and rotation evaluation;
//! - [`coords`]: the coordinate pipeline (relative scaling, patch centers,
//!   training-time perturbation, global offsets);
//! - [`attention`]: query/key rotation, attention logits, the relative-form
//!   oracle, and exact parameter gradients via Fréchet derivatives;
//! - [`verify`]: executable numerical checks of the commutativity identities;
//! - [`mod@bench`]: parameter accounting and a wall-clock timing harness;
//! - [`toytask`]: a desk-scale synthetic training demo.

// Indexed loops over matrix entries mirror the math; iterator rewrites
// would obscure the kernels.
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod bench;
pub mod coords;
pub mod error;
pub mod linalg;
pub mod ropefamily;
pub mod toytask;
pub mod verify;

pub use error::{Error, Result};
