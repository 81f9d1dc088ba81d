//! Constrained decoding: the logit-processor pipeline, sampling parameters,
//! per-stream decode state and the triplet decode loop.

mod processors;
mod sampler;

pub use processors::{
    density_bias, ensemble_mask, grammar_mask, onset_decay, DensityBias, EnsembleMask,
    GrammarMask, LogitProcessor, OnsetDecay,
};
pub use sampler::{argmax, nucleus, sample, GREEDY_TEMPERATURE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::ModelError;
use crate::tokenizer::{TokenId, TokenKind, VocabSpec};

/// Stand-in for negative infinity: the most negative finite f32, so softmax
/// stays well defined.
pub const MASKED: f32 = f32::MIN;
pub(crate) const MASK_FLOOR: f32 = f32::MIN / 2.0;

/// Masked logits stay masked after finite biases are added.
#[inline]
pub fn is_masked(logit: f32) -> bool {
    logit <= MASK_FLOOR || logit.is_nan()
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("every token is masked")]
    EmptySupport,
    #[error("chunk rollover: no representable onset remains")]
    ChunkRollover,
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Sampling and steering controls. The JSON form of this struct is also the
/// wire form used by the CLI config and the stream control channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub temperature: f32,
    pub top_p: f32,
    /// Density bias strength in logits per second of silence.
    pub bias_alpha: f32,
    /// Instruments allowed at note positions; `None` allows all.
    pub ensemble: Option<Vec<u16>>,
    /// Onset advance penalty in logits per second; 0 disables it.
    pub onset_decay: f32,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            temperature: 1.0,
            top_p: 0.98,
            bias_alpha: 0.5,
            ensemble: None,
            onset_decay: 10.0,
            seed: 0,
        }
    }
}

impl GenParams {
    pub fn validate(&self, vocab: &VocabSpec) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::InvalidParams(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if !(self.bias_alpha >= 0.0 && self.bias_alpha.is_finite()) {
            return bad(format!("bias_alpha must be >= 0, got {}", self.bias_alpha));
        }
        if !(self.onset_decay >= 0.0 && self.onset_decay.is_finite()) {
            return bad(format!("onset_decay must be >= 0, got {}", self.onset_decay));
        }
        if let Some(ens) = &self.ensemble {
            if ens.is_empty() {
                return bad("ensemble must not be empty".into());
            }
            if let Some(&i) = ens.iter().find(|&&i| i as u32 >= vocab.num_instruments) {
                return bad(format!(
                    "instrument {i} is outside the vocabulary ({} instruments)",
                    vocab.num_instruments
                ));
            }
        }
        Ok(())
    }
}

/// A partial update to [`GenParams`]. `ensemble: null` clears the ensemble;
/// an absent field leaves the current value alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsUpdate {
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "double_option",
        serialize_with = "serialize_double_option"
    )]
    pub ensemble: Option<Option<Vec<u16>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_alpha: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onset_decay: Option<f32>,
}

fn double_option<'de, D, T>(d: D) -> Result<Option<Option<T>>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d).map(Some)
}

fn serialize_double_option<S, T>(v: &Option<Option<T>>, s: S) -> Result<S::Ok, S::Error>
where
    S: Serializer,
    T: Serialize,
{
    match v {
        Some(inner) => inner.serialize(s),
        None => s.serialize_none(),
    }
}

impl ParamsUpdate {
    /// The updated parameters, or an error leaving `current` untouched.
    pub fn apply(&self, current: &GenParams, vocab: &VocabSpec) -> Result<GenParams, DecodeError> {
        let mut next = current.clone();
        if let Some(ens) = &self.ensemble {
            next.ensemble = ens.clone().map(normalize_ensemble);
        }
        if let Some(a) = self.bias_alpha {
            next.bias_alpha = a;
        }
        if let Some(t) = self.temperature {
            next.temperature = t;
        }
        if let Some(p) = self.top_p {
            next.top_p = p;
        }
        if let Some(d) = self.onset_decay {
            next.onset_decay = d;
        }
        next.validate(vocab)?;
        Ok(next)
    }
}

/// Sorted, deduplicated instrument list.
pub fn normalize_ensemble(mut ens: Vec<u16>) -> Vec<u16> {
    ens.sort_unstable();
    ens.dedup();
    ens
}

/// Grammar and heuristic state for one stream. Onsets are in grid steps
/// relative to the current chunk's window start.
#[derive(Debug, Clone)]
pub struct DecodeState {
    /// Position in the triplet cycle: 0 onset, 1 duration, 2 note.
    pub cycle: usize,
    /// Most recent onset. Inside a triplet this is the current note's onset,
    /// which doubles as the chunk-relative clock.
    pub prev_onset: u32,
    /// Last onset per instrument; may be negative when the note predates the
    /// window start.
    pub last_onset: Vec<Option<i64>>,
    /// Per-instrument membership of the active ensemble.
    pub ensemble: Option<Vec<bool>>,
    /// Onsets beyond this step end the chunk.
    pub time_limit: Option<u32>,
    pub rng: ChaCha8Rng,
}

impl DecodeState {
    pub fn new(vocab: &VocabSpec, ensemble: Option<&[u16]>, seed: u64) -> Self {
        Self::with_rng(vocab, ensemble, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(vocab: &VocabSpec, ensemble: Option<&[u16]>, rng: ChaCha8Rng) -> Self {
        let n = vocab.num_instruments as usize;
        let ensemble = ensemble.map(|ens| {
            let mut mask = vec![false; n];
            for &i in ens {
                if let Some(m) = mask.get_mut(i as usize) {
                    *m = true;
                }
            }
            mask
        });
        DecodeState {
            cycle: 0,
            prev_onset: 0,
            last_onset: vec![None; n],
            ensemble,
            time_limit: None,
            rng,
        }
    }

    pub fn expected_kind(&self) -> TokenKind {
        TokenKind::at_cycle(self.cycle)
    }

    pub fn clock(&self) -> u32 {
        self.prev_onset
    }

    pub fn gap_seconds(&self, instrument: u16, vocab: &VocabSpec) -> f64 {
        let last = self.last_onset[instrument as usize].unwrap_or(0);
        vocab.steps_to_seconds(self.prev_onset as i64 - last)
    }

    /// Record an emitted token and advance the cycle.
    pub fn advance(&mut self, id: TokenId, vocab: &VocabSpec) {
        match self.cycle {
            0 => self.prev_onset = vocab.time_step(id),
            2 => {
                let (instrument, _) = vocab.note_parts(id);
                self.last_onset[instrument as usize] = Some(self.prev_onset as i64);
            }
            _ => {}
        }
        self.cycle = (self.cycle + 1) % 3;
    }
}

/// Ordered logit processors.
pub struct Pipeline {
    stages: Vec<Box<dyn LogitProcessor>>,
}

impl Pipeline {
    pub fn new(stages: Vec<Box<dyn LogitProcessor>>) -> Self {
        Pipeline { stages }
    }

    /// grammar mask, ensemble mask, density bias, onset decay.
    pub fn standard(vocab: &VocabSpec, params: &GenParams) -> Self {
        Pipeline::new(vec![
            Box::new(GrammarMask(*vocab)),
            Box::new(EnsembleMask(*vocab)),
            Box::new(DensityBias {
                vocab: *vocab,
                alpha: params.bias_alpha,
            }),
            Box::new(OnsetDecay {
                vocab: *vocab,
                decay: params.onset_decay,
            }),
        ])
    }

    pub fn push(&mut self, stage: Box<dyn LogitProcessor>) {
        self.stages.push(stage);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.stages.iter().map(|s| s.name()).collect()
    }

    pub fn apply(&self, logits: &mut [f32], state: &DecodeState) -> Result<(), DecodeError> {
        for stage in &self.stages {
            stage.process(logits, state)?;
        }
        Ok(())
    }
}

/// Decode one note. `logits` holds the next-token logits on entry and is
/// replaced after each emitted token by `step(token)`. Returns
/// [`DecodeError::ChunkRollover`] when the pipeline empties or the sampled
/// onset passes `state.time_limit`; nothing is fed to the model in that case.
pub fn decode_note_triplet<F>(
    logits: &mut Vec<f32>,
    mut step: F,
    pipeline: &Pipeline,
    state: &mut DecodeState,
    params: &GenParams,
    vocab: &VocabSpec,
) -> Result<[TokenId; 3], DecodeError>
where
    F: FnMut(TokenId) -> Result<Vec<f32>, ModelError>,
{
    debug_assert_eq!(state.cycle, 0, "triplet decoding starts at an onset");
    let mut out = [0; 3];
    for slot in &mut out {
        match pipeline.apply(logits, state) {
            Err(DecodeError::EmptySupport) => return Err(DecodeError::ChunkRollover),
            other => other?,
        }
        let id = sample(logits, params.temperature, params.top_p, &mut state.rng)?;
        if state.cycle == 0 && state.time_limit.is_some_and(|lim| vocab.time_step(id) > lim) {
            return Err(DecodeError::ChunkRollover);
        }
        state.advance(id, vocab);
        *slot = id;
        *logits = step(id)?;
    }
    Ok(out)
}
