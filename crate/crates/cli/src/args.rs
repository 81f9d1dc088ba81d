//! Shared flags, the `--config` file, and model loading.
//!
//! A `--config` file is a JSON object whose keys mirror the long flags with
//! dashes turned into underscores (`top_p`, `weights_seed`, ...). Flags given
//! on the command line win over the file.

use crate::{exit, read_file, CliError, CliResult};
use clap::Args;
use notestream_core::model::{init_random, load_weights, read_manifest, WeightsError};
use notestream_core::{GenParams, Model, ParamsUpdate, Preset, VocabSpec};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum EnsembleSpec {
    List(Vec<u16>),
    Text(String),
}

impl EnsembleSpec {
    fn resolve(&self) -> CliResult<Vec<u16>> {
        match self {
            EnsembleSpec::List(v) => Ok(v.clone()),
            EnsembleSpec::Text(s) => parse_ensemble(s),
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub weights: Option<PathBuf>,
    pub config_preset: Option<Preset>,
    pub weights_seed: Option<u64>,
    pub server: Option<String>,
    pub seed: Option<u64>,
    pub ensemble: Option<EnsembleSpec>,
    pub alpha: Option<f32>,
    pub temperature: Option<f32>,
    pub top_p: Option<f32>,
    pub onset_decay: Option<f32>,
    pub notes: Option<u64>,
    pub prompt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub notes_limit: Option<u64>,
    pub buffer_s: Option<f64>,
    pub generations: Option<usize>,
    pub buffers: Option<Vec<f64>>,
    pub rate_override: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

/// Comma-separated instrument ids, e.g. `0,24,32,128`.
pub fn parse_ensemble(s: &str) -> CliResult<Vec<u16>> {
    let ids = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<u16>()
                .map_err(|_| CliError::usage(format!("bad instrument id {p:?} in --ensemble")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(CliError::usage("--ensemble needs at least one instrument id"));
    }
    Ok(ids)
}

/// Comma-separated buffer lengths in seconds.
pub fn parse_buffers(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .map(|p| {
            p.parse::<f64>()
                .ok()
                .filter(|b| *b >= 0.0 && b.is_finite())
                .ok_or_else(|| CliError::usage(format!("bad buffer {p:?} in --buffers")))
        })
        .collect()
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// JSON file of defaults; its keys mirror the long flags.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Weight blob; the manifest is read from `<FILE>.json`.
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Model shape: toy, small or medium. Defaults to the manifest's shape,
    /// else toy.
    #[arg(long, value_name = "PRESET")]
    pub config_preset: Option<Preset>,
    /// Seed for random weights when --weights is not given.
    #[arg(long, value_name = "N")]
    pub weights_seed: Option<u64>,
    /// Run on a notestream service instead of in-process.
    #[arg(long, value_name = "URL")]
    pub server: Option<String>,
}

impl ModelArgs {
    pub fn file(&self) -> CliResult<FileConfig> {
        FileConfig::load(self.config.as_deref())
    }

    pub fn server(&self, file: &FileConfig) -> Option<String> {
        self.server.clone().or_else(|| file.server.clone())
    }

    pub fn load(&self, file: &FileConfig, vocab: &VocabSpec) -> CliResult<Arc<Model>> {
        let preset = self.config_preset.or(file.config_preset);
        let weights = self.weights.as_ref().or(file.weights.as_ref());
        let (cfg, store) = match weights {
            Some(path) => {
                let manifest = read_manifest(path).map_err(weights_error)?;
                let cfg = match (preset, manifest.config) {
                    (Some(p), _) => p.config(vocab.vocab_size()),
                    (None, Some(c)) => c,
                    (None, None) => Preset::Toy.config(vocab.vocab_size()),
                };
                (cfg, load_weights(path, &cfg).map_err(weights_error)?)
            }
            None => {
                let cfg = preset.unwrap_or(Preset::Toy).config(vocab.vocab_size());
                let seed = self.weights_seed.or(file.weights_seed).unwrap_or(0);
                (cfg, init_random(&cfg, seed))
            }
        };
        if cfg.vocab_size != vocab.vocab_size() {
            return Err(CliError::model(format!(
                "model vocabulary has {} tokens, expected {}",
                cfg.vocab_size,
                vocab.vocab_size()
            )));
        }
        Model::new(cfg, store).map(Arc::new).map_err(CliError::model)
    }
}

fn weights_error(e: WeightsError) -> CliError {
    match e {
        WeightsError::Io { .. } => CliError::new(exit::IO, e.to_string()),
        other => CliError::model(other),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SamplingArgs {
    /// Sampling seed; equal seeds give identical output.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Allowed instrument ids, comma separated (see the table below).
    #[arg(long, value_name = "IDS")]
    pub ensemble: Option<String>,
    /// Density bias strength in logits per second of instrument silence.
    #[arg(long, value_name = "LOGITS_PER_S")]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub temperature: Option<f32>,
    /// Nucleus sampling mass.
    #[arg(long)]
    pub top_p: Option<f32>,
    /// Penalty on onset advances in logits per second; 0 disables it.
    #[arg(long, value_name = "LOGITS_PER_S")]
    pub onset_decay: Option<f32>,
}

impl SamplingArgs {
    /// Defaults, overlaid by the file, overlaid by flags; then validated.
    pub fn params(&self, file: &FileConfig, vocab: &VocabSpec) -> CliResult<GenParams> {
        let mut p = GenParams::default();
        let ensemble = match &self.ensemble {
            Some(s) => Some(parse_ensemble(s)?),
            None => file.ensemble.as_ref().map(EnsembleSpec::resolve).transpose()?,
        };
        if ensemble.is_some() {
            p.ensemble = ensemble;
        }
        if let Some(v) = self.seed.or(file.seed) {
            p.seed = v;
        }
        if let Some(v) = self.alpha.or(file.alpha) {
            p.bias_alpha = v;
        }
        if let Some(v) = self.temperature.or(file.temperature) {
            p.temperature = v;
        }
        if let Some(v) = self.top_p.or(file.top_p) {
            p.top_p = v;
        }
        if let Some(v) = self.onset_decay.or(file.onset_decay) {
            p.onset_decay = v;
        }
        p.validate(vocab).map_err(|e| CliError::usage(e.to_string()))?;
        Ok(p)
    }

    /// Only the adjustable parameters named on the command line, for a live
    /// stream. The seed cannot change mid-stream.
    pub fn update(&self) -> CliResult<Option<ParamsUpdate>> {
        let u = ParamsUpdate {
            ensemble: self.ensemble.as_deref().map(parse_ensemble).transpose()?.map(Some),
            bias_alpha: self.alpha,
            temperature: self.temperature,
            top_p: self.top_p,
            onset_decay: self.onset_decay,
        };
        Ok((u != ParamsUpdate::default()).then_some(u))
    }
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    #[arg(long, value_name = "PRESET", default_value = "toy")]
    pub config_preset: Preset,
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub weights_seed: u64,
    /// Blob path; the manifest goes to `<FILE>.json`.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

pub fn init_weights(a: InitWeightsArgs) -> CliResult {
    let cfg = a.config_preset.config(VocabSpec::default().vocab_size());
    init_random(&cfg, a.weights_seed)
        .save(&a.out, Some(&cfg))
        .map_err(|e| match e {
            WeightsError::Io { .. } => CliError::new(exit::IO, e.to_string()),
            other => CliError::model(other),
        })?;
    eprintln!("wrote {} ({} preset, seed {})", a.out.display(), a.config_preset, a.weights_seed);
    Ok(())
}
