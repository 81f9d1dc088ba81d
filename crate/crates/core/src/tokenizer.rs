//! Triplet tokenization of note events.
//!
//! Every note becomes three tokens: an absolute onset step, a duration step and
//! a combined instrument/pitch id. Ids are laid out in contiguous blocks:
//!
//! ```text
//! [0, T)                  onset steps
//! [T, T + D)              duration steps (1..=D)
//! [T + D, T + D + I*P)    instrument * P + pitch
//! T + D + I*P             start-of-sequence
//! ```

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

/// Maximum sequence length the model was trained on, SOS included.
pub const MAX_SEQ_TOKENS: usize = 1024;
/// Notes that fit in one full-length sequence after the SOS token.
pub const MAX_SEQ_NOTES: usize = (MAX_SEQ_TOKENS - 1) / 3;
/// Instrument id used for the General MIDI drum kit (channel 10).
pub const DRUM_INSTRUMENT: u16 = 128;
/// Velocity assigned to notes that come out of the tokenizer.
pub const DEFAULT_VELOCITY: u8 = 80;

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizerError {
    #[error("onset step {step} is outside the representable range [0, {max})")]
    OnsetOutOfRange { step: i64, max: u32 },
    #[error("onset {0} s is negative or not finite")]
    InvalidOnset(f64),
    #[error("duration {0} s is not finite")]
    InvalidDuration(f64),
    #[error("instrument {instrument} out of range (vocabulary has {max})")]
    InstrumentOutOfRange { instrument: u16, max: u32 },
    #[error("pitch {pitch} out of range (vocabulary has {max})")]
    PitchOutOfRange { pitch: u8, max: u32 },
    #[error("token {id} at index {index} is not a {expected:?} token")]
    KindMismatch {
        index: usize,
        id: TokenId,
        expected: TokenKind,
    },
    #[error("grammar violation at index {index}: expected a {expected:?} token, found {found}")]
    GrammarViolation {
        index: usize,
        expected: TokenKind,
        found: TokenId,
    },
    #[error("onset decreases at index {index} ({prev} -> {found})")]
    NonMonotonicOnset { index: usize, prev: u32, found: u32 },
    #[error("sequence body of {len} tokens does not hold whole triplets")]
    IncompleteTriplet { len: usize },
    #[error("{notes} notes need {tokens} tokens, more than the {max}-token limit")]
    TooLong {
        notes: usize,
        tokens: usize,
        max: usize,
    },
    #[error("notes are not in canonical order at index {0}")]
    Unsorted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Time,
    Duration,
    Note,
    Sos,
}

impl TokenKind {
    /// Kind expected at a position of the triplet cycle (0, 1, 2).
    pub fn at_cycle(cycle: usize) -> TokenKind {
        match cycle % 3 {
            0 => TokenKind::Time,
            1 => TokenKind::Duration,
            _ => TokenKind::Note,
        }
    }
}

/// Layout of the triplet vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub time_resolution_ms: u32,
    pub max_time_steps: u32,
    pub max_dur_steps: u32,
    pub num_instruments: u32,
    pub num_pitches: u32,
}

impl Default for VocabSpec {
    fn default() -> Self {
        VocabSpec {
            time_resolution_ms: 10,
            max_time_steps: 10_000,
            max_dur_steps: 1_000,
            num_instruments: 129,
            num_pitches: 128,
        }
    }
}

impl VocabSpec {
    pub fn time_base(&self) -> TokenId {
        0
    }

    pub fn dur_base(&self) -> TokenId {
        self.max_time_steps
    }

    pub fn note_base(&self) -> TokenId {
        self.max_time_steps + self.max_dur_steps
    }

    pub fn num_note_tokens(&self) -> u32 {
        self.num_instruments * self.num_pitches
    }

    pub fn sos(&self) -> TokenId {
        self.note_base() + self.num_note_tokens()
    }

    pub fn vocab_size(&self) -> usize {
        self.sos() as usize + 1
    }

    /// Half-open id range of a token kind.
    pub fn range(&self, kind: TokenKind) -> std::ops::Range<usize> {
        let (lo, hi) = match kind {
            TokenKind::Time => (0, self.dur_base()),
            TokenKind::Duration => (self.dur_base(), self.note_base()),
            TokenKind::Note => (self.note_base(), self.sos()),
            TokenKind::Sos => (self.sos(), self.sos() + 1),
        };
        lo as usize..hi as usize
    }

    /// Id range holding every pitch of one instrument.
    pub fn instrument_range(&self, instrument: u16) -> std::ops::Range<usize> {
        let lo = self.note_base() as usize + instrument as usize * self.num_pitches as usize;
        lo..lo + self.num_pitches as usize
    }

    pub fn kind_of(&self, id: TokenId) -> Option<TokenKind> {
        if id < self.dur_base() {
            Some(TokenKind::Time)
        } else if id < self.note_base() {
            Some(TokenKind::Duration)
        } else if id < self.sos() {
            Some(TokenKind::Note)
        } else if id == self.sos() {
            Some(TokenKind::Sos)
        } else {
            None
        }
    }

    pub fn step_seconds(&self) -> f64 {
        self.time_resolution_ms as f64 / 1000.0
    }

    /// Seconds for a whole number of grid steps.
    pub fn steps_to_seconds(&self, steps: i64) -> f64 {
        (steps as f64 * self.time_resolution_ms as f64) / 1000.0
    }

    /// Round-to-nearest grid step.
    pub fn seconds_to_steps(&self, seconds: f64) -> i64 {
        (seconds * 1000.0 / self.time_resolution_ms as f64).round() as i64
    }

    /// Quantized duration in steps, clamped to `[1, max_dur_steps]`.
    pub fn duration_steps(&self, seconds: f64) -> u32 {
        self.seconds_to_steps(seconds)
            .clamp(1, self.max_dur_steps as i64) as u32
    }

    /// Snap a note onto the grid without checking the onset range.
    pub fn quantize(&self, note: &NoteEvent) -> NoteEvent {
        NoteEvent {
            onset_s: self.steps_to_seconds(self.seconds_to_steps(note.onset_s)),
            duration_s: self.steps_to_seconds(self.duration_steps(note.duration_s) as i64),
            ..*note
        }
    }

    pub fn time_token(&self, step: u32) -> TokenId {
        step
    }

    pub fn time_step(&self, id: TokenId) -> u32 {
        id
    }

    pub fn note_token(&self, instrument: u16, pitch: u8) -> TokenId {
        self.note_base() + instrument as u32 * self.num_pitches + pitch as u32
    }

    /// (instrument, pitch) of a note token. The id must be in the note range.
    pub fn note_parts(&self, id: TokenId) -> (u16, u8) {
        let rel = id - self.note_base();
        (
            (rel / self.num_pitches) as u16,
            (rel % self.num_pitches) as u8,
        )
    }
}

/// One musical note. `duration_s` is serialized as `dur_s` to match the
/// stream wire format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset_s: f64,
    #[serde(rename = "dur_s")]
    pub duration_s: f64,
    pub instrument: u16,
    pub pitch: u8,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(onset_s: f64, duration_s: f64, instrument: u16, pitch: u8) -> Self {
        NoteEvent {
            onset_s,
            duration_s,
            instrument,
            pitch,
            velocity: DEFAULT_VELOCITY,
        }
    }

    pub fn end_s(&self) -> f64 {
        self.onset_s + self.duration_s
    }
}

/// Canonical note order: onset, then instrument, then pitch.
pub fn canonical_cmp(a: &NoteEvent, b: &NoteEvent) -> Ordering {
    a.onset_s
        .total_cmp(&b.onset_s)
        .then(a.instrument.cmp(&b.instrument))
        .then(a.pitch.cmp(&b.pitch))
}

pub fn encode_note(note: &NoteEvent, vocab: &VocabSpec) -> Result<[TokenId; 3], TokenizerError> {
    if !note.onset_s.is_finite() || note.onset_s < 0.0 {
        return Err(TokenizerError::InvalidOnset(note.onset_s));
    }
    if !note.duration_s.is_finite() {
        return Err(TokenizerError::InvalidDuration(note.duration_s));
    }
    let step = vocab.seconds_to_steps(note.onset_s);
    if step >= vocab.max_time_steps as i64 {
        return Err(TokenizerError::OnsetOutOfRange {
            step,
            max: vocab.max_time_steps,
        });
    }
    if note.instrument as u32 >= vocab.num_instruments {
        return Err(TokenizerError::InstrumentOutOfRange {
            instrument: note.instrument,
            max: vocab.num_instruments,
        });
    }
    if note.pitch as u32 >= vocab.num_pitches {
        return Err(TokenizerError::PitchOutOfRange {
            pitch: note.pitch,
            max: vocab.num_pitches,
        });
    }
    let dur = vocab.duration_steps(note.duration_s);
    Ok([
        vocab.time_token(step as u32),
        vocab.dur_base() + dur - 1,
        vocab.note_token(note.instrument, note.pitch),
    ])
}

pub fn decode_note(ids: [TokenId; 3], vocab: &VocabSpec) -> Result<NoteEvent, TokenizerError> {
    for (index, (&id, kind)) in ids
        .iter()
        .zip([TokenKind::Time, TokenKind::Duration, TokenKind::Note])
        .enumerate()
    {
        if vocab.kind_of(id) != Some(kind) {
            return Err(TokenizerError::KindMismatch {
                index,
                id,
                expected: kind,
            });
        }
    }
    let (instrument, pitch) = vocab.note_parts(ids[2]);
    Ok(NoteEvent {
        onset_s: vocab.steps_to_seconds(vocab.time_step(ids[0]) as i64),
        duration_s: vocab.steps_to_seconds((ids[1] - vocab.dur_base() + 1) as i64),
        instrument,
        pitch,
        velocity: DEFAULT_VELOCITY,
    })
}

/// A token sequence, optionally led by SOS.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub has_sos: bool,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens after the optional SOS.
    pub fn body(&self) -> &[TokenId] {
        if self.has_sos {
            &self.tokens[1..]
        } else {
            &self.tokens
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SortPolicy {
    /// Reject input that is not already in canonical order.
    Reject,
    /// Sort into canonical order after quantization.
    #[default]
    Sort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub with_sos: bool,
    pub enforce_cap: bool,
    pub sort: SortPolicy,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            with_sos: true,
            enforce_cap: true,
            sort: SortPolicy::Sort,
        }
    }
}

pub fn encode_sequence(
    notes: &[NoteEvent],
    vocab: &VocabSpec,
    opts: EncodeOptions,
) -> Result<TokenSeq, TokenizerError> {
    let total = opts.with_sos as usize + 3 * notes.len();
    if opts.enforce_cap && total > MAX_SEQ_TOKENS {
        return Err(TokenizerError::TooLong {
            notes: notes.len(),
            tokens: total,
            max: MAX_SEQ_TOKENS,
        });
    }
    let mut quantized: Vec<NoteEvent> = notes.iter().map(|n| vocab.quantize(n)).collect();
    match opts.sort {
        SortPolicy::Sort => quantized.sort_by(canonical_cmp),
        SortPolicy::Reject => {
            if let Some(i) = quantized
                .windows(2)
                .position(|w| canonical_cmp(&w[0], &w[1]) == Ordering::Greater)
            {
                return Err(TokenizerError::Unsorted(i + 1));
            }
        }
    }
    let mut tokens = Vec::with_capacity(total);
    if opts.with_sos {
        tokens.push(vocab.sos());
    }
    for note in &quantized {
        tokens.extend_from_slice(&encode_note(note, vocab)?);
    }
    Ok(TokenSeq {
        tokens,
        has_sos: opts.with_sos,
    })
}

/// Check the triplet grammar and onset monotonicity of a sequence. Returns
/// the number of whole notes.
pub fn validate_sequence(seq: &TokenSeq, vocab: &VocabSpec) -> Result<usize, TokenizerError> {
    let offset = usize::from(seq.has_sos);
    if seq.has_sos && seq.tokens.first() != Some(&vocab.sos()) {
        return Err(TokenizerError::GrammarViolation {
            index: 0,
            expected: TokenKind::Sos,
            found: seq.tokens.first().copied().unwrap_or(u32::MAX),
        });
    }
    let mut prev_onset = 0u32;
    for (i, &id) in seq.body().iter().enumerate() {
        let expected = TokenKind::at_cycle(i);
        if vocab.kind_of(id) != Some(expected) {
            return Err(TokenizerError::GrammarViolation {
                index: i + offset,
                expected,
                found: id,
            });
        }
        if expected == TokenKind::Time {
            let step = vocab.time_step(id);
            if step < prev_onset {
                return Err(TokenizerError::NonMonotonicOnset {
                    index: i + offset,
                    prev: prev_onset,
                    found: step,
                });
            }
            prev_onset = step;
        }
    }
    let body = seq.body().len();
    if !body.is_multiple_of(3) {
        return Err(TokenizerError::IncompleteTriplet { len: body });
    }
    Ok(body / 3)
}

pub fn decode_sequence(seq: &TokenSeq, vocab: &VocabSpec) -> Result<Vec<NoteEvent>, TokenizerError> {
    // A leading SOS is accepted even when the flag is unset.
    let seq = if !seq.has_sos && seq.tokens.first() == Some(&vocab.sos()) {
        std::borrow::Cow::Owned(TokenSeq {
            tokens: seq.tokens.clone(),
            has_sos: true,
        })
    } else {
        std::borrow::Cow::Borrowed(seq)
    };
    validate_sequence(&seq, vocab)?;
    seq.body()
        .chunks_exact(3)
        .map(|t| decode_note([t[0], t[1], t[2]], vocab))
        .collect()
}
