//! The `notestream` command line.
//!
//! `generate` and `profile` run in-process unless `--server` points them at a
//! running service; `stream --listen` hosts that service.

pub mod args;
mod generate;
mod profile;
mod stream;

use clap::{Parser, Subcommand};
use notestream_client::ClientError;
use std::fmt;
use std::path::{Path, PathBuf};

pub use args::{ModelArgs, SamplingArgs};

/// Exit statuses, also listed in `--help`.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const MODEL: u8 = 4;
    pub const ADDR_IN_USE: u8 = 5;
}

const INSTRUMENT_HELP: &str = "\
Instrument ids (for --ensemble) are General MIDI programs, plus 128 for drums:
    0-7    pianos            64-71   reeds
    8-15   chromatic perc.   72-79   pipes
    16-23  organs            80-87   synth leads
    24-31  guitars           88-95   synth pads
    32-39  basses            96-103  synth effects
    40-47  strings           104-111 ethnic
    48-55  ensembles         112-119 percussive
    56-63  brass             120-127 sound effects
    128    drum kit (channel 10)
e.g. --ensemble 0,33,48,128 is piano, fingered bass, strings and drums.

Exit codes: 0 ok, 2 bad flags or parameters, 3 I/O or connection failure,
4 model, weights or generation failure, 5 listen address in use.";

#[derive(Debug, Parser)]
#[command(name = "notestream", version, about = "Streaming multi-instrument MIDI generation", after_help = INSTRUMENT_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a fixed number of notes to a MIDI file or JSON lines.
    Generate(generate::GenerateArgs),
    /// Generate an endless stream as JSON lines, host it, or listen to one.
    Stream(stream::StreamArgs),
    /// Measure throughput, playback density and streamability.
    Profile(profile::ProfileArgs),
    /// Render a density CSV as an SVG chart.
    Plot(profile::PlotArgs),
    /// Print the vocabulary layout as JSON.
    Vocab,
    /// Write randomly initialized weights and their manifest.
    InitWeights(args::InitWeightsArgs),
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(exit::USAGE, message)
    }

    pub fn model(message: impl fmt::Display) -> Self {
        Self::new(exit::MODEL, message.to_string())
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::new(exit::IO, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        let code = match &e {
            ClientError::Url(_) => exit::USAGE,
            ClientError::Api { status, .. } if (400..500).contains(status) => exit::USAGE,
            ClientError::Http(_) | ClientError::Ws(_) => exit::IO,
            _ => exit::MODEL,
        };
        CliError::new(code, e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub(crate) fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Write `bytes` to `path`, or stdout for `-`.
pub(crate) fn write_output(path: &Path, bytes: &[u8]) -> CliResult {
    use std::io::Write;
    if path == Path::new("-") {
        let mut out = std::io::stdout().lock();
        return out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| CliError::io(path, e));
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub(crate) fn runtime() -> CliResult<tokio::runtime::Runtime> {
    tokio::runtime::Runtime::new().map_err(|e| CliError::new(exit::IO, format!("tokio runtime: {e}")))
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Stream(a) => stream::run(a),
        Command::Profile(a) => profile::run(a),
        Command::Plot(a) => profile::plot(a),
        Command::Vocab => {
            let summary = notestream_protocol::VocabSummary::from(notestream_core::VocabSpec::default());
            let mut text = serde_json::to_string_pretty(&summary).expect("vocab serializes");
            text.push('\n');
            write_output(&PathBuf::from("-"), text.as_bytes())
        }
        Command::InitWeights(a) => args::init_weights(a),
    }
}
