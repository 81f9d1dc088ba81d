//! Streaming symbolic-music generation.
//!
//! - [`tokenizer`]: notes to (onset, duration, instrument+pitch) token triplets
//! - [`model`]: GPT-2 style decoder with a KV cache and a simple weight container
//! - [`decoding`]: logit processors (grammar, ensemble, density bias) and sampling
//! - [`streamer`]: endless chunk-wise generation with onset relativization
//! - [`profiler`]: throughput, playback density and streamability analysis
//! - [`midi_io`]: Standard MIDI File import/export

pub mod decoding;
pub mod midi_io;
pub mod model;
pub mod profiler;
pub mod streamer;
pub mod tokenizer;

pub use decoding::{GenParams, ParamsUpdate};
pub use model::{Model, ModelConfig, Preset};
pub use streamer::{generate_notes, StreamChunk, StreamState};
pub use tokenizer::{NoteEvent, VocabSpec};
