//! Staggered multi-speaker transcription toolkit.
//!
//! Overlapped speech is transcribed as one token stream in which `[NEXT]` and
//! `[PREV]` move a running speaker index. The crate covers the stream codec,
//! mixture synthesis, multi-speaker scoring, CTC utilities and a small
//! trainable model over a synthetic task.

pub mod audio;
pub mod codec;
pub mod ctc;
pub mod manifest;
pub mod mixture;
pub mod scoring;
pub mod toy;
