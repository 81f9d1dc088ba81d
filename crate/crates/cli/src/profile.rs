use crate::args::{parse_buffers, ModelArgs, SamplingArgs};
use crate::generate::stream_error;
use crate::{read_file, runtime, write_output, CliError, CliResult};
use clap::Args;
use notestream_client::Client;
use notestream_core::profiler::{
    profile_generations, profile_run, render_density_svg, DensityProfile, ProfileConfig, ProfileError, ProfileReport,
    RateSource,
};
use notestream_core::{NoteEvent, VocabSpec};
use notestream_protocol::ProfileRequest;
use std::path::{Path, PathBuf};

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Independent one-chunk generations to time and analyse [default: 500].
    #[arg(long, value_name = "N")]
    pub generations: Option<usize>,
    /// Playback buffers in seconds, comma separated [default: 0,2].
    #[arg(long, value_name = "SECONDS")]
    pub buffers: Option<String>,
    /// Report JSON output [default: stdout].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Density CSV output.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    /// Density chart output.
    #[arg(long, value_name = "FILE.svg")]
    pub svg: Option<PathBuf>,
    /// Judge streamability at this generation rate (tok/s) instead of the
    /// measured one.
    #[arg(long, value_name = "TOK_PER_S")]
    pub rate_override: Option<f64>,
    /// Keep per-generation streamable fractions in the report.
    #[arg(long)]
    pub per_generation: bool,
    #[arg(long)]
    pub label: Option<String>,
    /// Analyse existing generations instead of generating: JSON lines, each
    /// an array of notes. Needs --rate-override.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
}

fn profile_error(e: ProfileError) -> CliError {
    match e {
        ProfileError::Stream(s) => stream_error(s),
        other => CliError::usage(other.to_string()),
    }
}

fn read_generations(path: &Path) -> CliResult<Vec<Vec<NoteEvent>>> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::io(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn rate_label(report: &ProfileReport) -> String {
    match report.rate_source {
        RateSource::Measured => format!("measured {:.0} tok/s", report.rate.tok_per_s),
        RateSource::Override => format!("{:.0} tok/s", report.rate.tok_per_s),
    }
}

pub fn run(a: ProfileArgs) -> CliResult {
    let file = a.model.file()?;
    let vocab = VocabSpec::default();
    let params = a.sampling.params(&file, &vocab)?;
    let buffers = match &a.buffers {
        Some(s) => parse_buffers(s)?,
        None => file.buffers.clone().unwrap_or_else(|| vec![0.0, 2.0]),
    };
    let generations = a.generations.or(file.generations).unwrap_or(500);
    if generations == 0 {
        return Err(CliError::usage("--generations must be at least 1"));
    }
    let rate_override = a.rate_override.or(file.rate_override);
    let cfg = ProfileConfig {
        n_generations: generations,
        buffers: buffers.clone(),
        rate_override,
        per_generation: a.per_generation,
    };

    let (mut report, density) = if let Some(input) = &a.input {
        if rate_override.is_none() {
            return Err(CliError::usage("--input needs --rate-override: there is no measured rate"));
        }
        profile_generations(&read_generations(input)?, None, &cfg).map_err(profile_error)?
    } else if let Some(url) = a.model.server(&file) {
        let client = Client::new(&url)?;
        let req = ProfileRequest {
            params,
            generations,
            buffers,
            rate_override,
            per_generation: a.per_generation,
            label: a.label.clone(),
        };
        let r = runtime()?.block_on(client.profile(&req))?;
        (r.report, r.density)
    } else {
        let model = a.model.load(&file, &vocab)?;
        let out = profile_run(&model, &vocab, &params, &cfg).map_err(profile_error)?;
        (out.report, out.density)
    };
    report.label = a.label.clone();

    let mut json = serde_json::to_string_pretty(&report).expect("reports serialize");
    json.push('\n');
    write_output(a.out.as_deref().unwrap_or(Path::new("-")), json.as_bytes())?;
    if let Some(path) = &a.csv {
        write_output(path, density.to_csv().as_bytes())?;
    }
    if let Some(path) = &a.svg {
        let svg = render_density_svg(&density, &[(rate_label(&report), report.rate.tok_per_s)]);
        write_output(path, svg.as_bytes())?;
    }
    let t = &report.table;
    let pct = |p: Option<f64>| p.map_or("-".to_string(), |v| format!("{v:.1}%"));
    eprintln!(
        "{} generations: {:.1} tok/s ({:.1} notes/s), streamable {} unbuffered, {} with 2 s buffer",
        report.n_generations,
        t.throughput_tok_s,
        t.notes_per_s,
        pct(t.streamable_pct),
        pct(t.streamable_buffered_pct)
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Density CSV written by `profile --csv`.
    #[arg(long, value_name = "FILE")]
    pub csv: PathBuf,
    /// SVG output [default: stdout].
    #[arg(long, value_name = "FILE.svg")]
    pub out: Option<PathBuf>,
    /// Draw a generation rate line, in tok/s; repeatable.
    #[arg(long, value_name = "TOK_PER_S")]
    pub rate: Vec<f64>,
    /// Also draw the rate from this profile report.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

pub fn plot(a: PlotArgs) -> CliResult {
    let text = String::from_utf8(read_file(&a.csv)?).map_err(|e| CliError::io(&a.csv, e))?;
    let density = DensityProfile::from_csv(&text).map_err(|e| CliError::io(&a.csv, e))?;
    let mut rates: Vec<(String, f64)> = Vec::new();
    for &r in &a.rate {
        if !(r > 0.0 && r.is_finite()) {
            return Err(CliError::usage(format!("--rate must be positive, got {r}")));
        }
        rates.push((format!("{r:.0} tok/s"), r));
    }
    if let Some(path) = &a.report {
        let report: ProfileReport =
            serde_json::from_slice(&read_file(path)?).map_err(|e| CliError::io(path, e))?;
        rates.push((rate_label(&report), report.rate.tok_per_s));
    }
    let svg = render_density_svg(&density, &rates);
    write_output(a.out.as_deref().unwrap_or(Path::new("-")), svg.as_bytes())
}
