use crate::args::{ModelArgs, SamplingArgs};
use crate::generate::{load_prompt, stream_error, write_jsonl};
use crate::{exit, runtime, CliError, CliResult};
use clap::Args;
use notestream_client::Client;
use notestream_core::streamer::{run_stream, StopCondition, StreamState};
use notestream_core::{NoteEvent, VocabSpec};
use notestream_protocol::{ControlMessage, ServerFrame};
use notestream_service::{serve, AppState, HubEvent, StreamConfig};
use serde_json::json;
use std::io::{BufWriter, ErrorKind, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::time::Instant;
use tokio::io::AsyncWriteExt;
use tokio::sync::broadcast::error::RecvError;

/// Notes buffered between the generator and a stdout that is not keeping up.
const STDOUT_QUEUE: usize = 512;

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Continue from this MIDI file instead of starting from scratch.
    #[arg(long, value_name = "FILE.mid")]
    pub prompt: Option<PathBuf>,
    /// Stop after this many notes on stdout.
    #[arg(long, value_name = "N")]
    pub notes_limit: Option<u64>,
    /// Host the stream service on this address, e.g. 127.0.0.1:8700.
    #[arg(long, value_name = "HOST:PORT", conflicts_with = "connect")]
    pub listen: Option<String>,
    /// Print the notes of a stream hosted elsewhere, e.g. http://127.0.0.1:8700.
    /// Sampling flags given here are sent as a set_params message.
    #[arg(long, value_name = "URL")]
    pub connect: Option<String>,
    /// Playback buffer advertised to clients, in seconds [default: 2].
    #[arg(long, value_name = "SECONDS")]
    pub buffer_s: Option<f64>,
    /// With --listen: wait for a start message before generating.
    #[arg(long)]
    pub paused: bool,
    /// With --listen: stay at most this far ahead of real time; 0 disables.
    #[arg(long, value_name = "SECONDS", default_value_t = 30.0)]
    pub max_lead_s: f64,
    /// With --listen: do not echo notes to stdout.
    #[arg(long)]
    pub quiet: bool,
    /// With --connect: send a start message.
    #[arg(long)]
    pub start: bool,
}

fn interrupted() -> CliResult<(tokio::runtime::Runtime, Arc<AtomicBool>)> {
    let rt = runtime()?;
    let flag = Arc::new(AtomicBool::new(false));
    let f = Arc::clone(&flag);
    rt.spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            f.store(true, Ordering::Relaxed);
        }
    });
    Ok((rt, flag))
}

fn summary(value: serde_json::Value) {
    eprintln!("{value}");
}

pub fn run(a: StreamArgs) -> CliResult {
    let file = a.model.file()?;
    if let Some(url) = a.connect.clone().or_else(|| a.model.server(&file)) {
        if a.listen.is_some() {
            return Err(CliError::usage("--listen cannot be combined with --server"));
        }
        return connect(&a, &url);
    }
    let vocab = VocabSpec::default();
    let params = a.sampling.params(&file, &vocab)?;
    let prompt = a
        .prompt
        .as_ref()
        .or(file.prompt.as_ref())
        .map(|p| load_prompt(p, &vocab))
        .transpose()?;
    let limit = a.notes_limit.or(file.notes_limit);
    let buffer_s = a.buffer_s.or(file.buffer_s).unwrap_or(2.0);
    if !(buffer_s >= 0.0 && buffer_s.is_finite()) {
        return Err(CliError::usage(format!("--buffer-s must be >= 0, got {buffer_s}")));
    }
    let model = a.model.load(&file, &vocab)?;

    let Some(addr) = a.listen.as_deref() else {
        let mut state = StreamState::start(model, vocab, params, prompt.as_deref()).map_err(stream_error)?;
        return local(&mut state, limit);
    };
    let cfg = StreamConfig {
        params,
        prompt,
        buffer_s,
        autostart: !a.paused,
        max_lead_s: (a.max_lead_s > 0.0).then_some(a.max_lead_s),
        ..StreamConfig::default()
    };
    listen(addr, AppState::new(model, vocab, Some(cfg)).map_err(stream_error)?, limit, a.quiet)
}

/// Generate on a worker thread into a bounded queue drained to stdout, so a
/// slow reader pauses generation instead of losing notes.
fn local(state: &mut StreamState, limit: Option<u64>) -> CliResult {
    let (_rt, flag) = interrupted()?;
    let (tx, rx) = sync_channel::<NoteEvent>(STDOUT_QUEUE);
    let stop = StopCondition {
        max_notes: limit,
        flag: Some(flag),
    };
    let writer = std::thread::spawn(move || -> std::io::Result<()> {
        let mut out = BufWriter::new(std::io::stdout().lock());
        for note in rx {
            write_jsonl(&mut out, &note)?;
        }
        out.flush()
    });
    let mut tx = tx;
    let result = run_stream(state, &mut tx, &stop);
    drop(tx);
    let written = writer.join().expect("stdout writer panicked");
    let s = result.map_err(stream_error)?;
    match written {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => return Err(CliError::new(exit::IO, format!("stdout: {e}"))),
        _ => {}
    }
    summary(serde_json::to_value(&s).expect("summary serializes"));
    Ok(())
}

fn listen(addr: &str, state: AppState, limit: Option<u64>, quiet: bool) -> CliResult {
    let (rt, flag) = interrupted()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| {
            let code = if e.kind() == ErrorKind::AddrInUse { exit::ADDR_IN_USE } else { exit::IO };
            CliError::new(code, format!("cannot listen on {addr}: {e}"))
        })?;
        let local = listener.local_addr().map_err(|e| CliError::new(exit::IO, e.to_string()))?;
        eprintln!("listening on http://{local} (stream at ws://{local}/v1/stream/ws)");

        let hub = Arc::clone(state.hub().expect("listen always hosts a stream"));
        let started = Instant::now();
        let (done_tx, done_rx) = tokio::sync::oneshot::channel::<()>();
        let echoing = !quiet || limit.is_some();
        // the echo is the local listener: it also keeps the stream running
        let echo = echoing.then(|| {
            let mut events = hub.subscribe();
            tokio::spawn(async move {
                let mut out = tokio::io::BufWriter::new(tokio::io::stdout());
                let (mut notes, mut chunks) = (0u64, 0u64);
                let mut failure = None;
                'recv: loop {
                    match events.recv().await {
                        Ok(HubEvent::Chunk(chunk)) => {
                            chunks += 1;
                            for n in &chunk.notes {
                                if limit.is_some_and(|l| notes >= l) {
                                    break 'recv;
                                }
                                notes += 1;
                                if !quiet {
                                    let mut line = serde_json::to_vec(n).expect("notes serialize");
                                    line.push(b'\n');
                                    if out.write_all(&line).await.is_err() {
                                        break 'recv;
                                    }
                                }
                            }
                            if out.flush().await.is_err() || limit.is_some_and(|l| notes >= l) {
                                break;
                            }
                        }
                        Ok(HubEvent::Failed(e)) => {
                            failure = Some(e.to_string());
                            break;
                        }
                        Err(RecvError::Lagged(n)) => {
                            failure = Some(format!("stdout fell {n} chunks behind the stream"));
                            break;
                        }
                        Err(RecvError::Closed) => break,
                    }
                }
                let _ = out.flush().await;
                let _ = done_tx.send(());
                (notes, chunks, failure)
            })
        });
        let stop = async move {
            let poll = async {
                while !flag.load(Ordering::Relaxed) {
                    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
                }
            };
            let echo_done = async {
                if echoing {
                    let _ = done_rx.await;
                } else {
                    std::future::pending::<()>().await;
                }
            };
            tokio::select! {
                _ = poll => {}
                _ = echo_done => {}
            }
        };
        serve(listener, state, stop)
            .await
            .map_err(|e| CliError::new(exit::IO, format!("server: {e}")))?;
        hub.shutdown();
        let (notes, chunks, failure) = match echo {
            Some(task) => task.await.expect("echo task panicked"),
            None => (0, 0, None),
        };
        let status = hub.status();
        summary(json!({
            "notes": notes,
            "chunks": chunks,
            "generated_notes": status.total_notes,
            "wall_s": started.elapsed().as_secs_f64(),
        }));
        match failure {
            Some(f) => Err(CliError::model(f)),
            None => Ok(()),
        }
    })
}

fn connect(a: &StreamArgs, url: &str) -> CliResult {
    let client = Client::new(url)?;
    let update = a.sampling.update()?;
    let limit = a.notes_limit;
    let start = a.start;
    let (rt, flag) = interrupted()?;
    rt.block_on(async move {
        let started = Instant::now();
        let mut conn = client.connect_stream().await?;
        if let ServerFrame::Hello { params, buffer_s, .. } = conn.hello() {
            eprintln!(
                "connected: buffer {buffer_s} s, params {}",
                serde_json::to_string(params).expect("params serialize")
            );
        }
        // replies still owed for the controls sent here
        let mut pending = 0usize;
        if let Some(u) = update {
            conn.send_control(&ControlMessage::set_params(u)).await?;
            pending += 1;
        }
        if start {
            conn.send_control(&ControlMessage::start()).await?;
            pending += 1;
        }
        let mut out = std::io::stdout().lock();
        let (mut notes, mut chunks) = (0u64, 0u64);
        let mut rejected = None;
        let full = |notes: u64| limit.is_some_and(|l| notes >= l);
        while pending > 0 || !full(notes) {
            let frame = tokio::select! {
                f = conn.next_frame() => f?,
                _ = async { while !flag.load(Ordering::Relaxed) {
                    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
                } } => break,
            };
            match frame {
                None => break,
                Some(ServerFrame::Note { .. }) if full(notes) => {}
                Some(ServerFrame::Note { note, .. }) => {
                    notes += 1;
                    if write_jsonl(&mut out, &note).is_err() {
                        break;
                    }
                }
                Some(ServerFrame::Chunk { .. }) => {
                    chunks += 1;
                    if out.flush().is_err() {
                        break;
                    }
                }
                Some(ServerFrame::Ack { applied_at_chunk, .. }) => {
                    pending = pending.saturating_sub(1);
                    eprintln!("control applied from chunk {applied_at_chunk}");
                }
                Some(ServerFrame::Error { code, message, .. }) => {
                    pending = pending.saturating_sub(1);
                    eprintln!("server error {code}: {message}");
                    rejected.get_or_insert(format!("{code}: {message}"));
                }
                Some(ServerFrame::Hello { .. }) => {}
            }
        }
        let _ = out.flush();
        let close = conn.close_info().cloned();
        let _ = conn.close().await;
        summary(json!({
            "notes": notes,
            "chunks": chunks,
            "wall_s": started.elapsed().as_secs_f64(),
            "closed": close.as_ref().map(|c| json!({"code": c.code, "reason": c.reason})),
        }));
        if let Some(r) = rejected {
            return Err(CliError::usage(format!("the server rejected a control message ({r})")));
        }
        match close {
            Some(c) if c.reason == "lagged" => Err(CliError::new(exit::IO, "dropped by the server for lagging")),
            _ => Ok(()),
        }
    })
}
