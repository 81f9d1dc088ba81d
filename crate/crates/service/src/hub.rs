//! The single live stream: one generation thread, a broadcast of finished
//! chunks, and an ordered control mailbox drained between chunks.

use notestream_core::streamer::StreamError;
use notestream_core::{GenParams, Model, NoteEvent, StreamChunk, StreamState, VocabSpec};
use notestream_protocol::{ControlKind, ControlMessage, ErrorBody, ErrorCode, ServerFrame, StreamStatus, PROTOCOL_VERSION};
use std::sync::mpsc::{self, RecvTimeoutError, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};
use tokio::sync::{broadcast, oneshot, watch};

/// How often an idle generator re-checks for listeners.
const IDLE_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone)]
pub struct StreamConfig {
    pub params: GenParams,
    pub prompt: Option<Vec<NoteEvent>>,
    /// Playback buffer advertised to clients in the hello frame.
    pub buffer_s: f64,
    /// Chunks a client may fall behind before it is dropped as lagged.
    pub queue_chunks: usize,
    /// Generate as soon as someone listens; otherwise wait for `start`.
    pub autostart: bool,
    /// Keep generated music at most this far ahead of wall time. `None`
    /// generates as fast as possible.
    pub max_lead_s: Option<f64>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            params: GenParams::default(),
            prompt: None,
            buffer_s: 2.0,
            queue_chunks: 32,
            autostart: true,
            max_lead_s: Some(30.0),
        }
    }
}

#[derive(Debug, Clone)]
pub enum HubEvent {
    Chunk(Arc<StreamChunk>),
    /// Generation failed; the stream is stopped.
    Failed(ErrorBody),
}

enum Command {
    Control(ControlMessage, oneshot::Sender<Result<u64, ErrorBody>>),
    Shutdown,
}

#[derive(Debug, Clone)]
struct Shared {
    running: bool,
    next_chunk: u64,
    total_notes: u64,
    params: GenParams,
}

pub struct StreamHub {
    vocab: VocabSpec,
    buffer_s: f64,
    mailbox: mpsc::Sender<Command>,
    events: broadcast::Sender<HubEvent>,
    shared: Arc<Mutex<Shared>>,
    closed: watch::Sender<bool>,
}

impl StreamHub {
    /// Validate the configuration and start the generation thread.
    pub fn spawn(model: Arc<Model>, vocab: VocabSpec, cfg: StreamConfig) -> Result<Arc<Self>, StreamError> {
        let state = StreamState::start(model, vocab, cfg.params.clone(), cfg.prompt.as_deref())?;
        let (mailbox, rx) = mpsc::channel();
        let (events, _) = broadcast::channel(cfg.queue_chunks.max(1));
        let shared = Arc::new(Mutex::new(Shared {
            running: cfg.autostart,
            next_chunk: 0,
            total_notes: 0,
            params: cfg.params.clone(),
        }));
        let (closed, _) = watch::channel(false);
        let generator = Generator {
            state,
            rx,
            events: events.clone(),
            shared: Arc::clone(&shared),
            running: cfg.autostart,
            max_lead_s: cfg.max_lead_s,
            clock: PlayClock::default(),
        };
        thread::Builder::new()
            .name("notestream-generator".into())
            .spawn(move || generator.run())
            .expect("spawn generator thread");
        Ok(Arc::new(StreamHub {
            vocab,
            buffer_s: cfg.buffer_s,
            mailbox,
            events,
            shared,
            closed,
        }))
    }

    pub fn subscribe(&self) -> broadcast::Receiver<HubEvent> {
        self.events.subscribe()
    }

    /// Resolves once [`StreamHub::shutdown`] has been called.
    pub fn closed(&self) -> watch::Receiver<bool> {
        self.closed.subscribe()
    }

    pub fn hello(&self) -> ServerFrame {
        let params = self.shared.lock().expect("hub state").params.clone();
        ServerFrame::hello(self.vocab, params, self.buffer_s)
    }

    pub fn status(&self) -> StreamStatus {
        let s = self.shared.lock().expect("hub state").clone();
        StreamStatus {
            v: PROTOCOL_VERSION,
            running: s.running,
            next_chunk: s.next_chunk,
            total_notes: s.total_notes,
            clients: self.events.receiver_count(),
            params: s.params,
            buffer_s: self.buffer_s,
        }
    }

    /// Queue a control message behind any chunk in progress. Resolves to the
    /// index of the first chunk generated under the change.
    pub async fn control(&self, msg: ControlMessage) -> Result<u64, ErrorBody> {
        let (tx, rx) = oneshot::channel();
        self.mailbox
            .send(Command::Control(msg, tx))
            .map_err(|_| ErrorBody::new(ErrorCode::NoStream, "the stream has shut down"))?;
        rx.await
            .map_err(|_| ErrorBody::new(ErrorCode::NoStream, "the stream has shut down"))?
    }

    /// Stop generating and tell every session to close.
    pub fn shutdown(&self) {
        let _ = self.mailbox.send(Command::Shutdown);
        let _ = self.closed.send(true);
    }
}

impl Drop for StreamHub {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Wall time spent running, against which generated music time is paced.
#[derive(Default)]
struct PlayClock {
    ran: Duration,
    since: Option<Instant>,
    /// Stream-global onset of the first generated note.
    origin_s: Option<f64>,
    latest_s: f64,
}

impl PlayClock {
    fn resume(&mut self) {
        self.since.get_or_insert_with(Instant::now);
    }

    fn pause(&mut self) {
        if let Some(t) = self.since.take() {
            self.ran += t.elapsed();
        }
    }

    fn elapsed(&self) -> Duration {
        self.ran + self.since.map_or(Duration::ZERO, |t| t.elapsed())
    }

    fn record(&mut self, chunk: &StreamChunk) {
        if let Some(first) = chunk.notes.first() {
            self.origin_s.get_or_insert(first.onset_s);
        }
        if let Some(last) = chunk.notes.last() {
            self.latest_s = last.onset_s;
        }
    }

    /// Music generated beyond `max_lead` seconds ahead of wall time.
    fn excess(&self, max_lead: f64) -> Option<Duration> {
        let origin = self.origin_s?;
        let ahead = self.latest_s - origin - self.elapsed().as_secs_f64();
        (ahead > max_lead).then(|| Duration::from_secs_f64(ahead - max_lead))
    }
}

struct Generator {
    state: StreamState,
    rx: mpsc::Receiver<Command>,
    events: broadcast::Sender<HubEvent>,
    shared: Arc<Mutex<Shared>>,
    running: bool,
    max_lead_s: Option<f64>,
    clock: PlayClock,
}

impl Generator {
    fn run(mut self) {
        loop {
            let listening = self.events.receiver_count() > 0;
            if self.running && listening {
                self.clock.resume();
            } else {
                self.clock.pause();
            }
            let wait = if !self.running {
                None
            } else if !listening {
                Some(IDLE_POLL)
            } else {
                self.max_lead_s
                    .and_then(|lead| self.clock.excess(lead))
                    .map(|d| d.min(IDLE_POLL))
                    .or(Some(Duration::ZERO))
            };
            let cmd = match wait {
                None => match self.rx.recv() {
                    Ok(c) => Some(c),
                    Err(_) => return,
                },
                Some(Duration::ZERO) => match self.rx.try_recv() {
                    Ok(c) => Some(c),
                    Err(TryRecvError::Empty) => None,
                    Err(TryRecvError::Disconnected) => return,
                },
                Some(d) => match self.rx.recv_timeout(d) {
                    Ok(c) => Some(c),
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => return,
                },
            };
            match cmd {
                Some(Command::Shutdown) => return,
                Some(Command::Control(msg, reply)) => {
                    let r = self.apply(msg);
                    self.publish_state();
                    let _ = reply.send(r);
                }
                None => self.generate_chunk(),
            }
        }
    }

    fn apply(&mut self, msg: ControlMessage) -> Result<u64, ErrorBody> {
        match msg.kind {
            ControlKind::Start => self.running = true,
            ControlKind::Stop => self.running = false,
            ControlKind::SetParams => {
                let update = msg.params.unwrap_or_default();
                let next = update
                    .apply(self.state.params(), self.state.vocab())
                    .map_err(|e| ErrorBody::new(ErrorCode::InvalidParams, e.to_string()))?;
                self.state
                    .set_params(next)
                    .map_err(|e| ErrorBody::new(ErrorCode::InvalidParams, e.to_string()))?;
            }
        }
        Ok(self.state.next_chunk_index())
    }

    fn generate_chunk(&mut self) {
        match self.state.next_chunk() {
            Ok(chunk) => {
                self.clock.record(&chunk);
                self.publish_state();
                // no receivers is fine: the next loop idles
                let _ = self.events.send(HubEvent::Chunk(Arc::new(chunk)));
            }
            Err(e) => {
                tracing::error!(error = %e, "generation failed; stopping the stream");
                self.running = false;
                self.publish_state();
                let _ = self
                    .events
                    .send(HubEvent::Failed(ErrorBody::new(ErrorCode::Internal, e.to_string())));
            }
        }
    }

    fn publish_state(&self) {
        let mut s = self.shared.lock().expect("hub state");
        s.running = self.running;
        s.next_chunk = self.state.next_chunk_index();
        s.total_notes = self.state.total_notes();
        s.params = self.state.params().clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(onsets: &[f64]) -> StreamChunk {
        StreamChunk {
            index: 0,
            notes: onsets.iter().map(|&t| NoteEvent::new(t, 0.5, 0, 60)).collect(),
            rolled_over: false,
        }
    }

    #[test]
    fn clock_paces_against_running_time_only() {
        let mut c = PlayClock::default();
        assert_eq!(c.excess(1.0), None);
        c.record(&chunk(&[4.0, 10.0]));
        c.record(&chunk(&[]));
        c.record(&chunk(&[20.0]));
        // 16 s generated, none played yet
        let ex = c.excess(10.0).unwrap().as_secs_f64();
        assert!((ex - 6.0).abs() < 1e-9, "{ex}");
        c.ran = Duration::from_secs(7);
        assert_eq!(c.excess(10.0), None);
        c.resume();
        c.pause();
        assert!(c.elapsed() >= Duration::from_secs(7));
        assert!(c.since.is_none());
    }
}
