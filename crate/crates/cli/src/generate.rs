use crate::args::{ModelArgs, SamplingArgs};
use crate::{read_file, runtime, write_output, CliError, CliResult};
use clap::Args;
use notestream_client::Client;
use notestream_core::midi_io::{read_midi, write_midi, MidiError};
use notestream_core::streamer::StreamError;
use notestream_core::{generate_notes, NoteEvent, VocabSpec};
use notestream_protocol::GenerateRequest;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Number of notes to generate [default: 170].
    #[arg(long, value_name = "N")]
    pub notes: Option<u64>,
    /// Continue from this MIDI file instead of starting from scratch.
    #[arg(long, value_name = "FILE.mid")]
    pub prompt: Option<PathBuf>,
    /// MIDI output; without it notes go to stdout as JSON lines.
    #[arg(long, value_name = "FILE.mid")]
    pub out: Option<PathBuf>,
}

pub(crate) fn stream_error(e: StreamError) -> CliError {
    match e {
        StreamError::Decode(_) | StreamError::Tokenizer(_) => CliError::usage(e.to_string()),
        other => CliError::model(other),
    }
}

pub(crate) fn load_prompt(path: &Path, vocab: &VocabSpec) -> CliResult<Vec<NoteEvent>> {
    let bytes = read_file(path)?;
    let import = read_midi(&bytes, vocab).map_err(|e| CliError::io(path, e))?;
    for w in &import.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(import.notes)
}

pub(crate) fn write_jsonl(out: &mut impl Write, note: &NoteEvent) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, note)?;
    out.write_all(b"\n")
}

pub fn run(a: GenerateArgs) -> CliResult {
    let file = a.model.file()?;
    let vocab = VocabSpec::default();
    let params = a.sampling.params(&file, &vocab)?;
    let notes = a.notes.or(file.notes).unwrap_or(170);
    let prompt = a
        .prompt
        .as_ref()
        .or(file.prompt.as_ref())
        .map(|p| load_prompt(p, &vocab))
        .transpose()?;

    let (generated, tokens, wall_s, tok_per_s) = match a.model.server(&file) {
        Some(url) => {
            let client = Client::new(&url)?;
            let req = GenerateRequest { params, notes, prompt };
            let r = runtime()?.block_on(client.generate(&req))?;
            (r.notes, r.tokens, r.wall_s, r.tok_per_s)
        }
        None => {
            let model = a.model.load(&file, &vocab)?;
            let (n, s) = generate_notes(model, vocab, params, prompt.as_deref(), notes).map_err(stream_error)?;
            (n, s.tokens, s.wall_s, s.tok_per_s)
        }
    };

    match a.out.as_ref().or(file.out.as_ref()) {
        Some(path) => {
            let bytes = write_midi(&generated).map_err(|e| match e {
                MidiError::TooManyInstruments { .. } => CliError::usage(format!(
                    "{e}, or pass --ensemble with at most 15 melodic ids (plus 128 for drums)"
                )),
                other => CliError::model(other),
            })?;
            write_output(path, &bytes)?;
        }
        None => {
            let mut buf = Vec::with_capacity(generated.len() * 80);
            for n in &generated {
                write_jsonl(&mut buf, n).expect("writing to memory");
            }
            write_output(Path::new("-"), &buf)?;
        }
    }
    eprintln!(
        "generated {} notes ({tokens} tokens) in {wall_s:.2} s, {tok_per_s:.0} tok/s",
        generated.len()
    );
    Ok(())
}
