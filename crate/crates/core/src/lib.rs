//! Deep attractor network for single-channel source separation.
//!
//! The pipeline: a waveform is analysed with a square-root-Hann STFT
//! ([`signal`]), log-magnitude features feed a bidirectional LSTM stack
//! ([`net`]) that emits a `K`-dimensional embedding for every time-frequency
//! bin, per-source attractors are formed in that embedding space
//! ([`attractor`]), and the similarity between each bin and each attractor
//! becomes a soft mask. Masked mixture magnitudes are resynthesised with the
//! mixture phase ([`infer`]) and scored with scale-invariant metrics
//! ([`eval`]).
//!
//! All embedding-shaped matrices use time-major row order: the bin at
//! frequency `f` and frame `t` lives in row `t * F + f`.

pub mod attractor;
pub mod cli;
pub mod data;
mod error;
pub mod eval;
pub mod infer;
pub mod kmeans;
pub mod net;
pub mod signal;
pub mod tensor_file;
pub mod train;

pub use error::{Error, Result};

/// Row index of bin `(f, t)` in an embedding or membership matrix.
#[inline]
pub fn bin_index(f: usize, t: usize, n_freq: usize) -> usize {
    t * n_freq + f
}
