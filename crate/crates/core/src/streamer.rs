//! Endless chunk-wise generation.
//!
//! Each chunk re-encodes the most recent notes of the stream with onsets
//! shifted so the window starts at zero, prefills a fresh KV cache with them
//! and decodes up to [`CHUNK_NOTES`] more. Generated onsets are shifted back
//! into stream-global time before they leave the streamer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::SyncSender;
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

use crate::decoding::{decode_note_triplet, DecodeError, DecodeState, GenParams, Pipeline};
use crate::model::{Model, ModelError};
use crate::tokenizer::{TokenKind, 
    decode_note, encode_sequence, EncodeOptions, NoteEvent, TokenizerError, VocabSpec,
    MAX_SEQ_TOKENS,
};

/// Notes generated per chunk, and the size of the conditioning window.
pub const CHUNK_NOTES: usize = 170;
/// Relativized onsets past this step (99 s on the default grid) end a chunk.
pub const ROLLOVER_STEP: u32 = 9_900;
/// Widest relativized span a conditioning window may cover, leaving at least
/// as much room again for new onsets.
pub const MAX_WINDOW_SPAN: i64 = (ROLLOVER_STEP / 2) as i64;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("context budget exceeded: {needed} tokens for a {capacity}-token model")]
    ContextBudget { needed: usize, capacity: usize },
}

/// A note on the integer grid, in stream-global steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct GridNote {
    onset: i64,
    dur: u32,
    instrument: u16,
    pitch: u8,
    velocity: u8,
}

impl GridNote {
    fn from_event(n: &NoteEvent, vocab: &VocabSpec) -> Self {
        GridNote {
            onset: vocab.seconds_to_steps(n.onset_s).max(0),
            dur: vocab.duration_steps(n.duration_s),
            instrument: n.instrument,
            pitch: n.pitch,
            velocity: n.velocity,
        }
    }

    fn to_event(self, offset: i64, vocab: &VocabSpec) -> NoteEvent {
        NoteEvent {
            onset_s: vocab.steps_to_seconds(self.onset - offset),
            duration_s: vocab.steps_to_seconds(self.dur as i64),
            instrument: self.instrument,
            pitch: self.pitch,
            velocity: self.velocity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamChunk {
    pub index: u64,
    /// New notes in stream-global time.
    pub notes: Vec<NoteEvent>,
    /// The chunk ended before [`CHUNK_NOTES`] because no onset was left.
    pub rolled_over: bool,
}

/// Facts about the window a chunk was conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInfo {
    pub chunk_index: u64,
    /// Stream-global onset of the window's first note, in seconds.
    pub offset_s: f64,
    /// The window as fed to the model, relativized.
    pub notes: Vec<NoteEvent>,
    /// Prompt tokens including SOS.
    pub context_tokens: usize,
}

pub struct StreamState {
    model: Arc<Model>,
    vocab: VocabSpec,
    params: GenParams,
    window: VecDeque<GridNote>,
    offset: i64,
    last_onset: Vec<Option<i64>>,
    cache: crate::model::KVCache,
    rng: ChaCha8Rng,
    chunk_index: u64,
    total_notes: u64,
    total_tokens: u64,
    last_window: Option<WindowInfo>,
}

impl StreamState {
    /// Start a stream from scratch or after `prompt`. Only the last
    /// [`CHUNK_NOTES`] prompt notes condition generation; generated notes
    /// continue the prompt's timeline.
    pub fn start(
        model: Arc<Model>,
        vocab: VocabSpec,
        params: GenParams,
        prompt: Option<&[NoteEvent]>,
    ) -> Result<Self, StreamError> {
        params.validate(&vocab)?;
        let mut window: Vec<GridNote> = prompt
            .unwrap_or_default()
            .iter()
            .map(|n| GridNote::from_event(n, &vocab))
            .collect();
        window.sort_by_key(|n| (n.onset, n.instrument, n.pitch));
        for n in &window {
            if n.instrument as u32 >= vocab.num_instruments {
                return Err(TokenizerError::InstrumentOutOfRange {
                    instrument: n.instrument,
                    max: vocab.num_instruments,
                }
                .into());
            }
            if n.pitch as u32 >= vocab.num_pitches {
                return Err(TokenizerError::PitchOutOfRange {
                    pitch: n.pitch,
                    max: vocab.num_pitches,
                }
                .into());
            }
        }
        let mut last_onset = vec![None; vocab.num_instruments as usize];
        for n in &window {
            last_onset[n.instrument as usize] = Some(n.onset);
        }
        let keep_from = window.len().saturating_sub(CHUNK_NOTES);
        let cache = model.new_cache();
        let rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut state = StreamState {
            model,
            vocab,
            params,
            window: window.drain(keep_from..).collect(),
            offset: 0,
            last_onset,
            cache,
            rng,
            chunk_index: 0,
            total_notes: 0,
            total_tokens: 0,
            last_window: None,
        };
        state.trim_window();
        state.offset = state.window.front().map_or(0, |n| n.onset);
        Ok(state)
    }

    pub fn params(&self) -> &GenParams {
        &self.params
    }

    /// Replace the parameters used from the next chunk on.
    pub fn set_params(&mut self, params: GenParams) -> Result<(), StreamError> {
        params.validate(&self.vocab)?;
        self.params = params;
        Ok(())
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    /// Index of the chunk the next call to [`next_chunk`](Self::next_chunk)
    /// produces.
    pub fn next_chunk_index(&self) -> u64 {
        self.chunk_index
    }

    pub fn total_notes(&self) -> u64 {
        self.total_notes
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    /// Stream-global onset of the current window start, in seconds.
    pub fn offset_s(&self) -> f64 {
        self.vocab.steps_to_seconds(self.offset)
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn last_window(&self) -> Option<&WindowInfo> {
        self.last_window.as_ref()
    }

    /// The relativized context the next chunk will be conditioned on.
    pub fn context_notes(&self) -> Vec<NoteEvent> {
        let offset = self.window.front().map_or(0, |n| n.onset);
        self.window.iter().map(|n| n.to_event(offset, &self.vocab)).collect()
    }

    /// Context length in tokens (SOS included) for the next chunk.
    pub fn context_len(&self) -> usize {
        1 + 3 * self.window.len()
    }

    fn trim_window(&mut self) {
        while self.window.len() > CHUNK_NOTES {
            self.window.pop_front();
        }
        if let Some(last) = self.window.back().map(|n| n.onset) {
            while self.window.front().is_some_and(|n| last - n.onset > MAX_WINDOW_SPAN) {
                self.window.pop_front();
            }
        }
    }

    pub fn next_chunk(&mut self) -> Result<StreamChunk, StreamError> {
        let vocab = self.vocab;
        self.trim_window();
        self.offset = self.window.front().map_or(self.offset, |n| n.onset);
        let offset = self.offset;

        let context = self.context_notes();
        let seq = encode_sequence(&context, &vocab, EncodeOptions::default())?;
        let needed = seq.len() + 3 * CHUNK_NOTES;
        let capacity = self.model.config().context_len.min(MAX_SEQ_TOKENS);
        if needed > capacity {
            return Err(StreamError::ContextBudget { needed, capacity });
        }
        self.last_window = Some(WindowInfo {
            chunk_index: self.chunk_index,
            offset_s: vocab.steps_to_seconds(offset),
            notes: context,
            context_tokens: seq.len(),
        });

        self.cache.reset();
        // Grammar fixes the next token kind, so only that block of the head
        // is computed.
        let mut logits = self
            .model
            .prefill_within(&seq.tokens, &mut self.cache, vocab.range(TokenKind::Time))?;

        let params = self.params.clone();
        let pipeline = Pipeline::standard(&vocab, &params);
        let rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let mut state = DecodeState::with_rng(&vocab, params.ensemble.as_deref(), rng);
        state.time_limit = Some(ROLLOVER_STEP);
        state.prev_onset = self.window.back().map_or(0, |n| (n.onset - offset) as u32);
        for (slot, last) in state.last_onset.iter_mut().zip(&self.last_onset) {
            *slot = last.map(|g| g - offset);
        }

        let mut notes = Vec::with_capacity(CHUNK_NOTES);
        let mut rolled_over = false;
        let model = Arc::clone(&self.model);
        let cache = &mut self.cache;
        while notes.len() < CHUNK_NOTES {
            let ids = match decode_note_triplet(
                &mut logits,
                |id| {
                    let next = match vocab.kind_of(id) {
                        Some(TokenKind::Time) => TokenKind::Duration,
                        Some(TokenKind::Duration) => TokenKind::Note,
                        _ => TokenKind::Time,
                    };
                    model.forward_step_within(id, cache, vocab.range(next))
                },
                &pipeline,
                &mut state,
                &params,
                &vocab,
            ) {
                Ok(ids) => ids,
                Err(DecodeError::ChunkRollover) => {
                    rolled_over = true;
                    break;
                }
                Err(e) => {
                    self.rng = state.rng;
                    return Err(e.into());
                }
            };
            let rel = decode_note(ids, &vocab)?;
            let mut note = GridNote::from_event(&rel, &vocab);
            note.onset += offset;
            self.last_onset[note.instrument as usize] = Some(note.onset);
            self.window.push_back(note);
            notes.push(note.to_event(0, &vocab));
        }
        self.rng = state.rng;
        self.trim_window();

        let chunk = StreamChunk {
            index: self.chunk_index,
            notes,
            rolled_over,
        };
        self.chunk_index += 1;
        self.total_notes += chunk.notes.len() as u64;
        self.total_tokens += 3 * chunk.notes.len() as u64;
        Ok(chunk)
    }
}

/// Receiver of streamed notes.
pub trait NoteSink {
    fn send(&mut self, note: NoteEvent) -> Result<(), SinkClosed>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("sink closed")]
pub struct SinkClosed;

impl NoteSink for Vec<NoteEvent> {
    fn send(&mut self, note: NoteEvent) -> Result<(), SinkClosed> {
        self.push(note);
        Ok(())
    }
}

/// Blocks while the bounded queue is full.
impl NoteSink for SyncSender<NoteEvent> {
    fn send(&mut self, note: NoteEvent) -> Result<(), SinkClosed> {
        SyncSender::send(self, note).map_err(|_| SinkClosed)
    }
}

#[derive(Debug, Clone, Default)]
pub struct StopCondition {
    pub max_notes: Option<u64>,
    pub flag: Option<Arc<AtomicBool>>,
}

impl StopCondition {
    pub fn notes(n: u64) -> Self {
        StopCondition {
            max_notes: Some(n),
            flag: None,
        }
    }

    fn stopped(&self) -> bool {
        self.flag.as_ref().is_some_and(|f| f.load(Ordering::Relaxed))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct StreamSummary {
    pub notes: u64,
    pub chunks: u64,
    pub tokens: u64,
    pub wall_s: f64,
    pub tok_per_s: f64,
    pub sink_closed: bool,
}

/// Generate chunks into `sink` until the stop condition fires or the sink
/// closes.
pub fn run_stream(
    state: &mut StreamState,
    sink: &mut dyn NoteSink,
    stop: &StopCondition,
) -> Result<StreamSummary, StreamError> {
    let started = Instant::now();
    let mut notes = 0u64;
    let mut chunks = 0u64;
    let mut sink_closed = false;
    'outer: loop {
        if stop.stopped() || stop.max_notes.is_some_and(|m| notes >= m) {
            break;
        }
        let chunk = state.next_chunk()?;
        chunks += 1;
        for note in chunk.notes {
            if stop.max_notes.is_some_and(|m| notes >= m) {
                break 'outer;
            }
            if sink.send(note).is_err() {
                sink_closed = true;
                break 'outer;
            }
            notes += 1;
        }
    }
    let wall = started.elapsed();
    let tokens = 3 * notes;
    Ok(StreamSummary {
        notes,
        chunks,
        tokens,
        wall_s: wall.as_secs_f64(),
        tok_per_s: tokens as f64 / wall.max(Duration::from_millis(1)).as_secs_f64(),
        sink_closed,
    })
}

/// One-shot generation of exactly `notes` notes (fewer only if the model
/// cannot continue), from scratch or after `prompt`.
pub fn generate_notes(
    model: Arc<Model>,
    vocab: VocabSpec,
    params: GenParams,
    prompt: Option<&[NoteEvent]>,
    notes: u64,
) -> Result<(Vec<NoteEvent>, StreamSummary), StreamError> {
    let mut state = StreamState::start(model, vocab, params, prompt)?;
    let mut out = Vec::with_capacity(notes.min(1 << 20) as usize);
    let summary = run_stream(&mut state, &mut out, &StopCondition::notes(notes))?;
    Ok((out, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_random, Preset};

    fn model() -> Arc<Model> {
        let v = VocabSpec::default();
        let cfg = Preset::Toy.config(v.vocab_size());
        Arc::new(Model::new(cfg, init_random(&cfg, 0)).unwrap())
    }

    fn params(seed: u64) -> GenParams {
        GenParams {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn scratch_context_is_sos_only() {
        let s = StreamState::start(model(), VocabSpec::default(), params(1), None).unwrap();
        assert_eq!(s.context_len(), 1);
    }

    #[test]
    fn first_chunk_has_full_length() {
        let mut s = StreamState::start(model(), VocabSpec::default(), params(1), None).unwrap();
        let c = s.next_chunk().unwrap();
        assert_eq!(c.index, 0);
        assert_eq!(c.notes.len(), CHUNK_NOTES);
        assert!(!c.rolled_over);
        assert!(c.notes.windows(2).all(|w| w[0].onset_s <= w[1].onset_s));
        assert_eq!(s.next_chunk_index(), 1);
        assert_eq!(s.total_tokens(), 3 * CHUNK_NOTES as u64);
    }

    #[test]
    fn long_prompt_keeps_last_window() {
        let prompt: Vec<_> = (0..200)
            .map(|i| NoteEvent::new(i as f64 * 0.1, 0.2, 0, 60 + (i % 12) as u8))
            .collect();
        let s = StreamState::start(model(), VocabSpec::default(), params(1), Some(&prompt)).unwrap();
        assert_eq!(s.window_len(), CHUNK_NOTES);
        assert_eq!(s.context_len(), 1 + 3 * CHUNK_NOTES);
        let ctx = s.context_notes();
        assert_eq!(ctx[0].onset_s, 0.0);
        assert!((ctx.last().unwrap().onset_s - 16.9).abs() < 1e-9);
        assert!((s.offset_s() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn continuation_follows_prompt() {
        let prompt: Vec<_> = (0..10)
            .map(|i| NoteEvent::new(i as f64 * 8.0 / 9.0, 0.3, 0, 60))
            .collect();
        assert_eq!(prompt.last().unwrap().onset_s, 8.0);
        let mut s = StreamState::start(model(), VocabSpec::default(), params(2), Some(&prompt)).unwrap();
        let c = s.next_chunk().unwrap();
        assert!(c.notes[0].onset_s >= 8.0 - 1e-9);
    }

    #[test]
    fn prompt_out_of_range_is_rejected() {
        let prompt = [NoteEvent::new(0.0, 0.3, 200, 60)];
        assert!(matches!(
            StreamState::start(model(), VocabSpec::default(), params(2), Some(&prompt)),
            Err(StreamError::Tokenizer(TokenizerError::InstrumentOutOfRange { .. }))
        ));
    }

    #[test]
    fn run_stream_immediate_stop() {
        let mut s = StreamState::start(model(), VocabSpec::default(), params(1), None).unwrap();
        let mut sink = Vec::new();
        let summary = run_stream(&mut s, &mut sink, &StopCondition::notes(0)).unwrap();
        assert_eq!((summary.notes, summary.chunks), (0, 0));
        assert!(sink.is_empty());

        let flag = Arc::new(AtomicBool::new(true));
        let stop = StopCondition {
            max_notes: None,
            flag: Some(flag),
        };
        assert_eq!(run_stream(&mut s, &mut sink, &stop).unwrap().notes, 0);
    }

    #[test]
    fn run_stream_truncates_to_limit() {
        let mut s = StreamState::start(model(), VocabSpec::default(), params(1), None).unwrap();
        let mut sink = Vec::new();
        let summary = run_stream(&mut s, &mut sink, &StopCondition::notes(200)).unwrap();
        assert_eq!(summary.notes, 200);
        assert_eq!(summary.chunks, 2);
        assert_eq!(summary.tokens, 600);
        assert_eq!(sink.len(), 200);
    }

    #[test]
    fn closed_sink_ends_cleanly() {
        let mut s = StreamState::start(model(), VocabSpec::default(), params(1), None).unwrap();
        let (tx, rx) = std::sync::mpsc::sync_channel(4);
        drop(rx);
        let mut tx = tx;
        let summary = run_stream(&mut s, &mut tx, &StopCondition::notes(1000)).unwrap();
        assert!(summary.sink_closed);
        assert_eq!(summary.notes, 0);
    }
}
