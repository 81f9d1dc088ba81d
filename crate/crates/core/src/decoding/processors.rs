//! Logit processors. Each stage reads the decode state and rewrites the
//! logits in place; masked entries are set to [`MASKED`].

use super::{is_masked, DecodeError, DecodeState, MASKED};
use crate::tokenizer::{TokenKind, VocabSpec};

pub trait LogitProcessor: Send + Sync {
    fn name(&self) -> &'static str;
    fn process(&self, logits: &mut [f32], state: &DecodeState) -> Result<(), DecodeError>;
}

/// Keep only tokens of the kind expected at the current triplet position.
/// At onset positions, onsets earlier than the previous one are also masked.
/// SOS is never allowed.
pub fn grammar_mask(logits: &mut [f32], state: &DecodeState, vocab: &VocabSpec) -> Result<(), DecodeError> {
    let kind = state.expected_kind();
    let mut keep = vocab.range(kind);
    if kind == TokenKind::Time {
        keep.start = keep.start.max(state.prev_onset as usize);
    }
    let keep = keep.start.min(logits.len())..keep.end.min(logits.len());
    logits[..keep.start].fill(MASKED);
    logits[keep.end..].fill(MASKED);
    if logits[keep].iter().all(|&l| is_masked(l)) {
        return Err(DecodeError::EmptySupport);
    }
    Ok(())
}

/// At note positions, mask every instrument outside the active ensemble.
pub fn ensemble_mask(logits: &mut [f32], state: &DecodeState, vocab: &VocabSpec) {
    let Some(ensemble) = &state.ensemble else {
        return;
    };
    if state.expected_kind() != TokenKind::Note {
        return;
    }
    for (instrument, &active) in ensemble.iter().enumerate() {
        if !active {
            logits[vocab.instrument_range(instrument as u16)].fill(MASKED);
        }
    }
}

/// At note positions, add `alpha * gap_seconds(j)` to every note of each
/// ensemble instrument `j`, where the gap is the time since `j` last sounded
/// (or since the chunk start if it never has).
pub fn density_bias(logits: &mut [f32], state: &DecodeState, alpha: f32, vocab: &VocabSpec) {
    if alpha == 0.0 || state.expected_kind() != TokenKind::Note {
        return;
    }
    let Some(ensemble) = &state.ensemble else {
        return;
    };
    for (instrument, &active) in ensemble.iter().enumerate() {
        if !active {
            continue;
        }
        let bonus = alpha * state.gap_seconds(instrument as u16, vocab) as f32;
        for l in &mut logits[vocab.instrument_range(instrument as u16)] {
            if !is_masked(*l) {
                *l += bonus;
            }
        }
    }
}

/// At onset positions, subtract `decay * advance_seconds` from every onset,
/// where the advance is measured from the previous onset. Untrained weights
/// otherwise spread onsets uniformly over the whole time range.
pub fn onset_decay(logits: &mut [f32], state: &DecodeState, decay: f32, vocab: &VocabSpec) {
    if decay == 0.0 || state.expected_kind() != TokenKind::Time {
        return;
    }
    let step_s = vocab.step_seconds() as f32;
    let range = vocab.range(TokenKind::Time);
    let first = range.start.max(state.prev_onset as usize);
    for (i, l) in logits[first..range.end].iter_mut().enumerate() {
        if !is_masked(*l) {
            *l -= decay * step_s * i as f32;
        }
    }
}

pub struct GrammarMask(pub VocabSpec);

impl LogitProcessor for GrammarMask {
    fn name(&self) -> &'static str {
        "grammar_mask"
    }

    fn process(&self, logits: &mut [f32], state: &DecodeState) -> Result<(), DecodeError> {
        grammar_mask(logits, state, &self.0)
    }
}

pub struct EnsembleMask(pub VocabSpec);

impl LogitProcessor for EnsembleMask {
    fn name(&self) -> &'static str {
        "ensemble_mask"
    }

    fn process(&self, logits: &mut [f32], state: &DecodeState) -> Result<(), DecodeError> {
        ensemble_mask(logits, state, &self.0);
        Ok(())
    }
}

pub struct DensityBias {
    pub vocab: VocabSpec,
    pub alpha: f32,
}

impl LogitProcessor for DensityBias {
    fn name(&self) -> &'static str {
        "density_bias"
    }

    fn process(&self, logits: &mut [f32], state: &DecodeState) -> Result<(), DecodeError> {
        density_bias(logits, state, self.alpha, &self.vocab);
        Ok(())
    }
}

pub struct OnsetDecay {
    pub vocab: VocabSpec,
    pub decay: f32,
}

impl LogitProcessor for OnsetDecay {
    fn name(&self) -> &'static str {
        "onset_decay"
    }

    fn process(&self, logits: &mut [f32], state: &DecodeState) -> Result<(), DecodeError> {
        onset_decay(logits, state, self.decay, &self.vocab);
        Ok(())
    }
}
