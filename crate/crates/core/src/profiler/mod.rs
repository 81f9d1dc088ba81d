//! Streamability analysis: generation throughput, playback token density per
//! second of music, and the share of playback time a stream generated at a
//! fixed rate keeps ahead of the player.

mod plot;

pub use plot::render_density_svg;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

use crate::decoding::GenParams;
use crate::model::Model;
use crate::streamer::{StreamError, StreamState};
use crate::tokenizer::{NoteEvent, VocabSpec};

pub const TOKENS_PER_NOTE: u64 = 3;
pub const REPORT_VERSION: u32 = 1;
const MIN_ELAPSED: Duration = Duration::from_millis(1);

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("no generations to profile")]
    EmptyInput,
    #[error("rate must be positive, got {0}")]
    InvalidRate(f64),
    #[error("buffer must be non-negative, got {0}")]
    InvalidBuffer(f64),
    #[error("malformed density csv at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Stream(#[from] StreamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub tokens: u64,
    pub seconds: f64,
    pub tok_per_s: f64,
    pub notes_per_s: f64,
}

impl Throughput {
    pub fn from_rate(tok_per_s: f64) -> Self {
        Throughput {
            tokens: 0,
            seconds: 0.0,
            tok_per_s,
            notes_per_s: tok_per_s / TOKENS_PER_NOTE as f64,
        }
    }
}

/// Tokens per wall second, with a 1 ms floor on the elapsed time.
pub fn measure_throughput(tokens: u64, elapsed: Duration) -> Throughput {
    let seconds = elapsed.max(MIN_ELAPSED).as_secs_f64();
    let tok_per_s = tokens as f64 / seconds;
    Throughput {
        tokens,
        seconds,
        tok_per_s,
        notes_per_s: tok_per_s / TOKENS_PER_NOTE as f64,
    }
}

/// Musical length of a generation: the latest note end.
pub fn musical_length(notes: &[NoteEvent]) -> f64 {
    notes.iter().map(|n| n.end_s()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityBin {
    pub bin_start_s: f64,
    pub mean_tok_s: f64,
    pub stdev_tok_s: f64,
    pub n: usize,
}

/// Playback tokens per second of music, per 1 s bin, across generations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub bin_s: f64,
    pub horizon_s: f64,
    pub n_generations: usize,
    pub bins: Vec<DensityBin>,
}

impl DensityProfile {
    pub fn mean_tok_s(&self) -> f64 {
        if self.bins.is_empty() {
            return 0.0;
        }
        self.bins.iter().map(|b| b.mean_tok_s).sum::<f64>() / self.bins.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start_s,mean_tok_s,stdev_tok_s,n\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{}\n",
                b.bin_start_s, b.mean_tok_s, b.stdev_tok_s, b.n
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, ProfileError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == "bin_start_s,mean_tok_s,stdev_tok_s,n" => {}
            _ => {
                return Err(ProfileError::Csv {
                    line: 1,
                    reason: "expected header bin_start_s,mean_tok_s,stdev_tok_s,n".into(),
                })
            }
        }
        let mut bins = Vec::new();
        for (i, line) in lines {
            let err = |reason: String| ProfileError::Csv { line: i + 1, reason };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(err(format!("expected 4 columns, found {}", cols.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            bins.push(DensityBin {
                bin_start_s: num(cols[0])?,
                mean_tok_s: num(cols[1])?,
                stdev_tok_s: num(cols[2])?,
                n: cols[3].parse().map_err(|e| err(format!("{:?}: {e}", cols[3])))?,
            });
        }
        let bin_s = 1.0;
        Ok(DensityProfile {
            bin_s,
            horizon_s: bins.last().map_or(0.0, |b| b.bin_start_s + bin_s),
            n_generations: bins.first().map_or(0, |b| b.n),
            bins,
        })
    }
}

/// Per 1 s bin: mean and population standard deviation across generations of
/// 3 x (notes starting in the bin). Bins past a generation's end count as 0.
/// The horizon defaults to the longest generation.
pub fn estimate_density(generations: &[Vec<NoteEvent>], horizon_s: Option<f64>) -> DensityProfile {
    let horizon = horizon_s.unwrap_or_else(|| {
        generations
            .iter()
            .map(|g| musical_length(g))
            .fold(0.0, f64::max)
    });
    let n_bins = (horizon - 1e-9).ceil().max(0.0) as usize;
    let mut sum = vec![0.0f64; n_bins];
    let mut sum_sq = vec![0.0f64; n_bins];
    let mut counts = vec![0u64; n_bins];
    for g in generations {
        counts.fill(0);
        for n in g {
            let bin = (n.onset_s + 1e-9).floor();
            if bin >= 0.0 && (bin as usize) < n_bins {
                counts[bin as usize] += 1;
            }
        }
        for ((s, q), &c) in sum.iter_mut().zip(&mut sum_sq).zip(&counts) {
            let tok = (TOKENS_PER_NOTE * c) as f64;
            *s += tok;
            *q += tok * tok;
        }
    }
    let k = generations.len().max(1) as f64;
    let bins = (0..n_bins)
        .map(|i| {
            let mean = sum[i] / k;
            let var = (sum_sq[i] / k - mean * mean).max(0.0);
            DensityBin {
                bin_start_s: i as f64,
                mean_tok_s: mean,
                stdev_tok_s: var.sqrt(),
                n: generations.len(),
            }
        })
        .collect();
    DensityProfile {
        bin_s: 1.0,
        horizon_s: horizon,
        n_generations: generations.len(),
        bins,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Streamable seconds summed over generations, divided by total seconds.
    Pooled,
    /// Computed on the averaged density profile.
    Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamabilityReport {
    pub rate_tok_s: f64,
    pub buffer_s: f64,
    /// Headline fraction, aggregated as `aggregation` says.
    pub fraction: f64,
    /// Unweighted mean of the per-generation fractions.
    pub mean_fraction: f64,
    pub aggregation: Aggregation,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_generation: Vec<f64>,
}

/// Seconds of `[0, horizon]` during which `rate * (t + buffer) >= C(t)`,
/// where C(t) is 3 tokens per note with onset <= t. `onsets` must be sorted.
pub fn streamable_seconds(onsets: &[f64], horizon: f64, rate: f64, buffer: f64) -> f64 {
    let mut total = 0.0;
    let mut seg_start = 0.0f64;
    let mut i = 0;
    while seg_start < horizon {
        while i < onsets.len() && onsets[i] <= seg_start {
            i += 1;
        }
        let seg_end = onsets.get(i).map_or(horizon, |&t| t.min(horizon));
        let required = (TOKENS_PER_NOTE as usize * i) as f64;
        let from = seg_start.max(required / rate - buffer);
        if seg_end > from {
            total += seg_end - from;
        }
        seg_start = seg_end;
    }
    total.min(horizon)
}

fn check_rate(rate: f64, buffer: f64) -> Result<(), ProfileError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(ProfileError::InvalidRate(rate));
    }
    if !(buffer >= 0.0 && buffer.is_finite()) {
        return Err(ProfileError::InvalidBuffer(buffer));
    }
    Ok(())
}

/// Streamable share of playback time over raw generations, pooled across
/// generations; the per-generation mean is reported alongside.
pub fn streamable_fraction(
    generations: &[Vec<NoteEvent>],
    rate: f64,
    buffer: f64,
) -> Result<StreamabilityReport, ProfileError> {
    check_rate(rate, buffer)?;
    let mut per_generation = Vec::with_capacity(generations.len());
    let (mut good, mut total) = (0.0, 0.0);
    for g in generations {
        let horizon = musical_length(g);
        if horizon <= 0.0 {
            continue;
        }
        let mut onsets: Vec<f64> = g.iter().map(|n| n.onset_s).collect();
        onsets.sort_by(f64::total_cmp);
        let s = streamable_seconds(&onsets, horizon, rate, buffer);
        per_generation.push(s / horizon);
        good += s;
        total += horizon;
    }
    if per_generation.is_empty() {
        return Err(ProfileError::EmptyInput);
    }
    Ok(StreamabilityReport {
        rate_tok_s: rate,
        buffer_s: buffer,
        fraction: (good / total).min(1.0),
        mean_fraction: (per_generation.iter().sum::<f64>() / per_generation.len() as f64).min(1.0),
        aggregation: Aggregation::Pooled,
        per_generation,
    })
}

/// Streamable share of the horizon for the averaged density profile, with the
/// required tokens accumulating linearly inside each bin.
pub fn profile_streamable_fraction(
    profile: &DensityProfile,
    rate: f64,
    buffer: f64,
) -> Result<f64, ProfileError> {
    check_rate(rate, buffer)?;
    if profile.bins.is_empty() || profile.horizon_s <= 0.0 {
        return Err(ProfileError::EmptyInput);
    }
    let mut required = 0.0;
    let mut good = 0.0;
    for b in &profile.bins {
        let s = b.bin_start_s;
        let e = (s + profile.bin_s).min(profile.horizon_s);
        if e <= s {
            break;
        }
        // slack(t) = rate * (t + buffer) - required(t), linear on [s, e)
        let at_s = rate * (s + buffer) - required;
        let slope = rate - b.mean_tok_s;
        let seg = if slope == 0.0 {
            if at_s >= 0.0 { e - s } else { 0.0 }
        } else {
            let root = s - at_s / slope;
            if slope > 0.0 {
                (e - root.max(s)).max(0.0)
            } else {
                (root.min(e) - s).max(0.0)
            }
        };
        good += seg;
        required += b.mean_tok_s * (e - s);
    }
    Ok(good / profile.horizon_s)
}

/// Throughput-and-streamability summary in the shape of a results table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub throughput_tok_s: f64,
    pub notes_per_s: f64,
    pub streamable_pct: Option<f64>,
    pub streamable_buffered_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateSource {
    Measured,
    Override,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub v: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub n_generations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured: Option<Throughput>,
    pub rate: Throughput,
    pub rate_source: RateSource,
    pub playback_mean_tok_s: f64,
    pub horizon_s: f64,
    pub streamable: Vec<StreamabilityReport>,
    pub table: TableRow,
}

#[derive(Debug, Clone)]
pub struct ProfileConfig {
    pub n_generations: usize,
    pub buffers: Vec<f64>,
    pub rate_override: Option<f64>,
    /// Keep per-generation fractions in the report.
    pub per_generation: bool,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            n_generations: 500,
            buffers: vec![0.0, 2.0],
            rate_override: None,
            per_generation: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProfileOutput {
    pub report: ProfileReport,
    pub density: DensityProfile,
    pub generations: Vec<Vec<NoteEvent>>,
}

/// `n` independent one-chunk generations from scratch (seeds `params.seed + i`),
/// timed individually. Throughput is total tokens over the summed per-stream
/// generation time, so parallel workers do not inflate it.
pub fn generate_batch(
    model: &Arc<Model>,
    vocab: &VocabSpec,
    params: &GenParams,
    n: usize,
) -> Result<(Vec<Vec<NoteEvent>>, Throughput), ProfileError> {
    let results: Vec<Result<(Vec<NoteEvent>, Duration), StreamError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = GenParams {
                seed: params.seed.wrapping_add(i as u64),
                ..params.clone()
            };
            let mut stream = StreamState::start(Arc::clone(model), *vocab, p, None)?;
            let t0 = Instant::now();
            let chunk = stream.next_chunk()?;
            Ok((chunk.notes, t0.elapsed()))
        })
        .collect();
    let mut gens = Vec::with_capacity(n);
    let mut elapsed = Duration::ZERO;
    for r in results {
        let (notes, dt) = r?;
        elapsed += dt;
        gens.push(notes);
    }
    let tokens = gens.iter().map(|g| TOKENS_PER_NOTE * g.len() as u64).sum();
    Ok((gens, measure_throughput(tokens, elapsed)))
}

/// Build the report for already generated material.
pub fn profile_generations(
    generations: &[Vec<NoteEvent>],
    measured: Option<Throughput>,
    cfg: &ProfileConfig,
) -> Result<(ProfileReport, DensityProfile), ProfileError> {
    if generations.is_empty() {
        return Err(ProfileError::EmptyInput);
    }
    let (rate, rate_source) = match (cfg.rate_override, measured) {
        (Some(r), _) => (Throughput::from_rate(r), RateSource::Override),
        (None, Some(m)) => (m, RateSource::Measured),
        (None, None) => return Err(ProfileError::InvalidRate(0.0)),
    };
    let density = estimate_density(generations, None);
    let mut streamable = Vec::with_capacity(cfg.buffers.len());
    for &b in &cfg.buffers {
        let mut r = streamable_fraction(generations, rate.tok_per_s, b)?;
        if !cfg.per_generation {
            r.per_generation.clear();
        }
        streamable.push(r);
    }
    let pct = |b: f64| {
        streamable
            .iter()
            .find(|r| r.buffer_s == b)
            .map(|r| 100.0 * r.fraction)
    };
    let table = TableRow {
        throughput_tok_s: rate.tok_per_s,
        notes_per_s: rate.notes_per_s,
        streamable_pct: pct(0.0),
        streamable_buffered_pct: pct(2.0),
    };
    let report = ProfileReport {
        v: REPORT_VERSION,
        label: None,
        n_generations: generations.len(),
        measured,
        rate,
        rate_source,
        playback_mean_tok_s: density.mean_tok_s(),
        horizon_s: density.horizon_s,
        streamable,
        table,
    };
    Ok((report, density))
}

/// Generate, time, and analyse `cfg.n_generations` sequences.
pub fn profile_run(
    model: &Arc<Model>,
    vocab: &VocabSpec,
    params: &GenParams,
    cfg: &ProfileConfig,
) -> Result<ProfileOutput, ProfileError> {
    if cfg.n_generations == 0 {
        return Err(ProfileError::EmptyInput);
    }
    let (generations, measured) = generate_batch(model, vocab, params, cfg.n_generations)?;
    let (report, density) = profile_generations(&generations, Some(measured), cfg)?;
    Ok(ProfileOutput {
        report,
        density,
        generations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(notes_per_s: f64, seconds: f64) -> Vec<NoteEvent> {
        let gap = 1.0 / notes_per_s;
        let n = (seconds * notes_per_s).round() as usize;
        (0..n)
            .map(|i| NoteEvent::new(i as f64 * gap, gap, 0, 60))
            .collect()
    }

    #[test]
    fn throughput_arithmetic() {
        let t = measure_throughput(3000, Duration::from_secs(10));
        assert_eq!(t.tok_per_s, 300.0);
        assert_eq!(t.notes_per_s, 100.0);
        let t = measure_throughput(5, Duration::ZERO);
        assert_eq!(t.tok_per_s, 5000.0);
        let t = Throughput::from_rate(155.0);
        assert_eq!(t.notes_per_s, 155.0 / 3.0);
        assert_eq!(format!("{:.1}", t.notes_per_s), "51.7");
    }

    #[test]
    fn constant_density_profile() {
        let g = constant(17.0, 10.0);
        let p = estimate_density(&[g], None);
        assert_eq!(p.bins.len(), 10);
        for b in &p.bins {
            assert_eq!(b.mean_tok_s, 51.0);
            assert_eq!(b.stdev_tok_s, 0.0);
            assert_eq!(b.n, 1);
        }
    }

    #[test]
    fn two_generation_mean_and_stdev() {
        // 30 and 72 tok/s (whole notes per bin): mean 51, population stdev 21
        let p = estimate_density(&[constant(10.0, 5.0), constant(24.0, 5.0)], Some(5.0));
        assert_eq!(p.bins.len(), 5);
        for b in &p.bins {
            assert!((b.mean_tok_s - 51.0).abs() < 1e-9);
            assert!((b.stdev_tok_s - 21.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uncovered_bins_count_as_zero() {
        let p = estimate_density(&[constant(10.0, 2.0), constant(10.0, 4.0)], None);
        assert_eq!(p.bins.len(), 4);
        assert_eq!(p.bins[3].mean_tok_s, 15.0);
        assert_eq!(p.bins[3].stdev_tok_s, 15.0);
    }

    #[test]
    fn constant_density_fractions() {
        let g = vec![constant(100.0 / 3.0, 10.0)];
        assert!(streamable_fraction(&g, 155.0, 0.0).unwrap().fraction > 0.99);
        assert_eq!(streamable_fraction(&g, 50.0, 0.0).unwrap().fraction, 0.0);
        let f = streamable_fraction(&g, 50.0, 2.0).unwrap().fraction;
        assert!((f - 0.2).abs() < 0.005, "{f}");
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert!(matches!(
            streamable_fraction(&[], 10.0, 0.0),
            Err(ProfileError::EmptyInput)
        ));
        let g = vec![constant(10.0, 1.0)];
        assert!(matches!(
            streamable_fraction(&g, 0.0, 0.0),
            Err(ProfileError::InvalidRate(_))
        ));
        assert!(matches!(
            streamable_fraction(&g, 1.0, -1.0),
            Err(ProfileError::InvalidBuffer(_))
        ));
    }

    #[test]
    fn profile_fraction_matches_closed_form() {
        let p = estimate_density(&[constant(100.0 / 3.0, 10.0)], Some(10.0));
        let f = profile_streamable_fraction(&p, 50.0, 2.0).unwrap();
        // 100 tok/s playback, 50 tok/s generation, 2 s head start
        assert!((f - 0.2).abs() < 0.01, "{f}");
        assert_eq!(profile_streamable_fraction(&p, 155.0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let p = estimate_density(&[constant(10.0, 3.0), constant(5.0, 3.0)], None);
        let csv = p.to_csv();
        assert!(csv.starts_with("bin_start_s,mean_tok_s,stdev_tok_s,n\n"));
        let back = DensityProfile::from_csv(&csv).unwrap();
        assert_eq!(back.bins, p.bins);
        assert!(DensityProfile::from_csv("a,b\n1,2").is_err());
        assert!(DensityProfile::from_csv("bin_start_s,mean_tok_s,stdev_tok_s,n\n0,x,0,1").is_err());
    }

    #[test]
    fn report_from_injected_generations() {
        let gens = vec![constant(100.0 / 3.0, 10.0); 3];
        let cfg = ProfileConfig {
            rate_override: Some(50.0),
            ..Default::default()
        };
        let (report, density) = profile_generations(&gens, None, &cfg).unwrap();
        assert_eq!(report.rate_source, RateSource::Override);
        assert_eq!(report.streamable.len(), 2);
        assert_eq!(report.table.streamable_pct, Some(0.0));
        let buffered = report.table.streamable_buffered_pct.unwrap();
        assert!((buffered - 20.0).abs() < 0.5);
        assert!(density.bins.iter().all(|b| b.stdev_tok_s == 0.0));
        assert_eq!(report.rate.notes_per_s * 3.0, report.rate.tok_per_s);
    }
}
