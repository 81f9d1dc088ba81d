//! Standard MIDI File import and export.
//!
//! Supported on read: format 0 and 1, metrical timing, any number of tempo
//! changes, note on/off (velocity-0 note-on is a note-off), program changes.
//! Everything else (controllers, pitch bend, sysex, SMPTE timing) is skipped
//! or rejected. Channel 10 is the drum kit and maps to instrument 128.
//!
//! Export writes format 1 at 480 ticks per quarter and a fixed 120 BPM: a
//! conductor track with the tempo, then one track per instrument.

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};
use std::collections::{BTreeSet, HashMap, VecDeque};
use thiserror::Error;

use crate::tokenizer::{canonical_cmp, NoteEvent, VocabSpec, DRUM_INSTRUMENT};

pub const WRITE_PPQ: u16 = 480;
pub const WRITE_TEMPO_US: u32 = 500_000;
const DEFAULT_TEMPO_US: u32 = 500_000;
const DRUM_CHANNEL: u8 = 9;
const MAX_MELODIC_CHANNELS: usize = 15;

#[derive(Debug, Error)]
pub enum MidiError {
    #[error("malformed MIDI header: {0}")]
    MalformedHeader(String),
    #[error("malformed MIDI data: {0}")]
    Malformed(String),
    #[error("unsupported MIDI file: {0}")]
    UnsupportedFormat(String),
    #[error(
        "{found} instruments ({melodic} melodic) do not fit in 16 MIDI channels \
         (15 melodic + drums); split the notes across several files"
    )]
    TooManyInstruments { found: usize, melodic: usize },
    #[error("instrument {0} has no MIDI program (valid: 0-127 and 128 for drums)")]
    InvalidInstrument(u16),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MidiWarning {
    /// A note-on never matched by a note-off; closed at the end of its track.
    UnmatchedNoteOn { channel: u8, pitch: u8, tick: u64 },
    /// A note-off with no sounding note.
    UnmatchedNoteOff { channel: u8, pitch: u8, tick: u64 },
}

impl std::fmt::Display for MidiWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MidiWarning::UnmatchedNoteOn { channel, pitch, tick } => write!(
                f,
                "note-on without note-off (channel {}, pitch {pitch}, tick {tick}); closed at track end",
                channel + 1
            ),
            MidiWarning::UnmatchedNoteOff { channel, pitch, tick } => write!(
                f,
                "note-off without a sounding note (channel {}, pitch {pitch}, tick {tick}); ignored",
                channel + 1
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    NoteOn { channel: u8, pitch: u8, velocity: u8 },
    NoteOff { channel: u8, pitch: u8 },
    Program { channel: u8, program: u8 },
    Tempo(u32),
    EndOfTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimedEvent {
    /// Absolute tick within the track.
    pub tick: u64,
    pub kind: EventKind,
}

/// Tick to seconds conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct TempoMap {
    ticks_per_quarter: u16,
    /// (tick, microseconds per quarter, seconds at tick), sorted by tick.
    segments: Vec<(u64, u32, f64)>,
}

impl TempoMap {
    pub fn new(ticks_per_quarter: u16, mut changes: Vec<(u64, u32)>) -> Self {
        changes.sort_by_key(|c| c.0);
        let mut segments = vec![(0u64, DEFAULT_TEMPO_US, 0.0f64)];
        for (tick, tempo) in changes {
            let last = *segments.last().expect("non-empty");
            let at = last.2 + Self::span(ticks_per_quarter, tick - last.0, last.1);
            if tick == last.0 {
                segments.pop();
            }
            segments.push((tick, tempo, at));
        }
        TempoMap {
            ticks_per_quarter,
            segments,
        }
    }

    fn span(tpq: u16, ticks: u64, tempo: u32) -> f64 {
        ticks as f64 * tempo as f64 / (tpq as f64 * 1e6)
    }

    pub fn seconds(&self, tick: u64) -> f64 {
        let i = self.segments.partition_point(|s| s.0 <= tick) - 1;
        let (start, tempo, at) = self.segments[i];
        at + Self::span(self.ticks_per_quarter, tick - start, tempo)
    }

    pub fn changes(&self) -> impl Iterator<Item = (u64, u32)> + '_ {
        self.segments.iter().map(|s| (s.0, s.1))
    }
}

/// A parsed SMF with absolute tick times and the supported event subset.
#[derive(Debug, Clone, PartialEq)]
pub struct MidiDocument {
    pub format: u16,
    pub ticks_per_quarter: u16,
    pub tempo_map: TempoMap,
    pub tracks: Vec<Vec<TimedEvent>>,
}

impl MidiDocument {
    pub fn parse(bytes: &[u8]) -> Result<Self, MidiError> {
        if bytes.len() < 14 || &bytes[..4] != b"MThd" {
            return Err(MidiError::MalformedHeader("missing MThd chunk".into()));
        }
        let smf = Smf::parse(bytes).map_err(|e| {
            let msg = e.to_string();
            if msg.contains("header") {
                MidiError::MalformedHeader(msg)
            } else {
                MidiError::Malformed(msg)
            }
        })?;
        let declared = u16::from_be_bytes([bytes[10], bytes[11]]) as usize;
        if smf.tracks.len() < declared {
            return Err(MidiError::Malformed(format!(
                "header declares {declared} tracks, found {}",
                smf.tracks.len()
            )));
        }
        let format = match smf.header.format {
            Format::SingleTrack => 0,
            Format::Parallel => 1,
            Format::Sequential => {
                return Err(MidiError::UnsupportedFormat("type 2 (sequential) files".into()))
            }
        };
        let tpq = match smf.header.timing {
            Timing::Metrical(t) if t.as_int() > 0 => t.as_int(),
            Timing::Metrical(_) => return Err(MidiError::MalformedHeader("zero ticks per quarter".into())),
            Timing::Timecode(..) => return Err(MidiError::UnsupportedFormat("SMPTE timecode timing".into())),
        };
        let mut tracks = Vec::with_capacity(smf.tracks.len());
        let mut tempos = Vec::new();
        for track in &smf.tracks {
            let mut tick = 0u64;
            let mut events = Vec::new();
            for ev in track {
                tick += ev.delta.as_int() as u64;
                let kind = match ev.kind {
                    TrackEventKind::Midi { channel, message } => {
                        let channel = channel.as_int();
                        match message {
                            MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => EventKind::NoteOn {
                                channel,
                                pitch: key.as_int(),
                                velocity: vel.as_int(),
                            },
                            MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                                EventKind::NoteOff {
                                    channel,
                                    pitch: key.as_int(),
                                }
                            }
                            MidiMessage::ProgramChange { program } => EventKind::Program {
                                channel,
                                program: program.as_int(),
                            },
                            _ => continue,
                        }
                    }
                    TrackEventKind::Meta(MetaMessage::Tempo(t)) => {
                        tempos.push((tick, t.as_int()));
                        EventKind::Tempo(t.as_int())
                    }
                    TrackEventKind::Meta(MetaMessage::EndOfTrack) => EventKind::EndOfTrack,
                    _ => continue,
                };
                events.push(TimedEvent { tick, kind });
            }
            tracks.push(events);
        }
        Ok(MidiDocument {
            format,
            ticks_per_quarter: tpq,
            tempo_map: TempoMap::new(tpq, tempos),
            tracks,
        })
    }

    /// Notes in seconds (not quantized), with matching warnings.
    pub fn notes(&self) -> (Vec<NoteEvent>, Vec<MidiWarning>) {
        // Merge tracks in tick order; ties keep track order then event order.
        let mut merged: Vec<(u64, usize, usize, EventKind)> = Vec::new();
        let mut track_end = Vec::with_capacity(self.tracks.len());
        for (t, track) in self.tracks.iter().enumerate() {
            track_end.push(track.last().map_or(0, |e| e.tick));
            merged.extend(track.iter().enumerate().map(|(i, e)| (e.tick, t, i, e.kind)));
        }
        merged.sort_by_key(|m| (m.0, m.1, m.2));

        let mut program = [0u8; 16];
        let mut sounding: HashMap<(u8, u8), VecDeque<Sounding>> = HashMap::new();
        let mut notes = Vec::new();
        let mut warnings = Vec::new();
        let mut push = |on: u64, off: u64, velocity: u8, instrument: u16, pitch: u8| {
            let onset_s = self.tempo_map.seconds(on);
            notes.push(NoteEvent {
                onset_s,
                duration_s: self.tempo_map.seconds(off) - onset_s,
                instrument,
                pitch,
                velocity,
            });
        };
        for &(tick, track, _, kind) in &merged {
            match kind {
                EventKind::Program { channel, program: p } => program[channel as usize] = p,
                EventKind::NoteOn { channel, pitch, velocity } => {
                    let instrument = if channel == DRUM_CHANNEL {
                        DRUM_INSTRUMENT
                    } else {
                        program[channel as usize] as u16
                    };
                    sounding
                        .entry((channel, pitch))
                        .or_default()
                        .push_back((tick, velocity, instrument, track));
                }
                EventKind::NoteOff { channel, pitch } => {
                    match sounding.get_mut(&(channel, pitch)).and_then(|q| q.pop_front()) {
                        Some((on, vel, instrument, _)) => push(on, tick, vel, instrument, pitch),
                        None => warnings.push(MidiWarning::UnmatchedNoteOff { channel, pitch, tick }),
                    }
                }
                EventKind::Tempo(_) | EventKind::EndOfTrack => {}
            }
        }
        let mut dangling: Vec<_> = sounding
            .into_iter()
            .flat_map(|((channel, pitch), q)| q.into_iter().map(move |n| (channel, pitch, n)))
            .collect();
        dangling.sort_by_key(|d| (d.2 .0, d.0, d.1));
        for (channel, pitch, (on, vel, instrument, track)) in dangling {
            warnings.push(MidiWarning::UnmatchedNoteOn { channel, pitch, tick: on });
            push(on, track_end[track].max(on), vel, instrument, pitch);
        }
        (notes, warnings)
    }
}

/// A note-on waiting for its note-off: (tick, velocity, instrument, track),
/// queued per (channel, pitch).
type Sounding = (u64, u8, u16, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct MidiImport {
    /// Grid-quantized notes in canonical order.
    pub notes: Vec<NoteEvent>,
    pub warnings: Vec<MidiWarning>,
}

/// Read an SMF into grid-quantized, onset-sorted notes.
pub fn read_midi(bytes: &[u8], vocab: &VocabSpec) -> Result<MidiImport, MidiError> {
    let doc = MidiDocument::parse(bytes)?;
    let (raw, warnings) = doc.notes();
    let mut notes: Vec<NoteEvent> = raw.iter().map(|n| vocab.quantize(n)).collect();
    notes.sort_by(|a, b| {
        canonical_cmp(a, b)
            .then(a.duration_s.total_cmp(&b.duration_s))
            .then(a.velocity.cmp(&b.velocity))
    });
    Ok(MidiImport { notes, warnings })
}

fn seconds_to_ticks(seconds: f64) -> u64 {
    let ticks_per_s = WRITE_PPQ as f64 * 1e6 / WRITE_TEMPO_US as f64;
    (seconds * ticks_per_s).round().max(0.0) as u64
}

/// Write notes as an SMF type 1 file.
pub fn write_midi(notes: &[NoteEvent]) -> Result<Vec<u8>, MidiError> {
    let header = Header::new(Format::Parallel, Timing::Metrical(u15::new(WRITE_PPQ)));
    let mut smf = Smf::new(header);
    let eot = TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
    };
    if notes.is_empty() {
        smf.tracks.push(vec![eot]);
        return encode(&smf);
    }
    if let Some(n) = notes.iter().find(|n| n.instrument > DRUM_INSTRUMENT) {
        return Err(MidiError::InvalidInstrument(n.instrument));
    }
    let instruments: BTreeSet<u16> = notes.iter().map(|n| n.instrument).collect();
    let melodic = instruments.iter().filter(|&&i| i != DRUM_INSTRUMENT).count();
    if melodic > MAX_MELODIC_CHANNELS {
        return Err(MidiError::TooManyInstruments {
            found: instruments.len(),
            melodic,
        });
    }

    smf.tracks.push(vec![
        TrackEvent {
            delta: u28::new(0),
            kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(WRITE_TEMPO_US))),
        },
        eot,
    ]);
    let mut melodic_channels = (0u8..16).filter(|&c| c != DRUM_CHANNEL);
    for &instrument in &instruments {
        let (channel, program) = if instrument == DRUM_INSTRUMENT {
            (DRUM_CHANNEL, 0)
        } else {
            (melodic_channels.next().expect("checked channel budget"), instrument as u8)
        };
        // (tick, is_on, pitch, velocity); offs sort before ons at equal ticks
        let mut events: Vec<(u64, bool, u8, u8)> = Vec::new();
        for n in notes.iter().filter(|n| n.instrument == instrument) {
            let on = seconds_to_ticks(n.onset_s);
            let off = seconds_to_ticks(n.onset_s + n.duration_s).max(on);
            events.push((on, true, n.pitch, n.velocity.clamp(1, 127)));
            events.push((off, false, n.pitch, 0));
        }
        events.sort_by_key(|e| (e.0, e.1, e.2));
        let ch = u4::new(channel);
        let mut track = vec![TrackEvent {
            delta: u28::new(0),
            kind: TrackEventKind::Midi {
                channel: ch,
                message: MidiMessage::ProgramChange {
                    program: u7::new(program),
                },
            },
        }];
        let mut last = 0u64;
        for (tick, is_on, pitch, vel) in events {
            let message = if is_on {
                MidiMessage::NoteOn {
                    key: u7::new(pitch),
                    vel: u7::new(vel),
                }
            } else {
                MidiMessage::NoteOff {
                    key: u7::new(pitch),
                    vel: u7::new(0),
                }
            };
            track.push(TrackEvent {
                delta: u28::new((tick - last) as u32),
                kind: TrackEventKind::Midi { channel: ch, message },
            });
            last = tick;
        }
        track.push(eot);
        smf.tracks.push(track);
    }
    encode(&smf)
}

fn encode(smf: &Smf) -> Result<Vec<u8>, MidiError> {
    let mut out = Vec::new();
    smf.write_std(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> VocabSpec {
        VocabSpec::default()
    }

    /// Hand-assembled SMF bytes.
    fn smf(format: u16, tpq: u16, tracks: &[Vec<u8>]) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend(6u32.to_be_bytes());
        out.extend(format.to_be_bytes());
        out.extend((tracks.len() as u16).to_be_bytes());
        out.extend(tpq.to_be_bytes());
        for t in tracks {
            out.extend(b"MTrk");
            out.extend((t.len() as u32).to_be_bytes());
            out.extend(t);
        }
        out
    }

    const EOT: [u8; 4] = [0x00, 0xFF, 0x2F, 0x00];

    #[test]
    fn single_quarter_note_at_120_bpm() {
        let mut t = vec![0x00, 0xC0, 0x00, 0x00, 0x90, 60, 100];
        t.extend([0x83, 0x60, 0x80, 60, 0]); // delta 480
        t.extend(EOT);
        let import = read_midi(&smf(0, 480, &[t]), &vocab()).unwrap();
        assert_eq!(import.notes.len(), 1);
        let n = import.notes[0];
        assert_eq!((n.onset_s, n.duration_s, n.instrument, n.pitch, n.velocity), (0.0, 0.5, 0, 60, 100));
        assert!(import.warnings.is_empty());
    }

    #[test]
    fn velocity_zero_is_note_off_with_running_status() {
        // note-on, then running-status note-on with velocity 0
        let mut t = vec![0x00, 0x91, 64, 90, 0x83, 0x60, 64, 0];
        t.extend(EOT);
        let import = read_midi(&smf(0, 480, &[t]), &vocab()).unwrap();
        assert_eq!(import.notes.len(), 1);
        assert_eq!(import.notes[0].duration_s, 0.5);
    }

    #[test]
    fn drums_and_programs() {
        let mut t = vec![0x00, 0xC2, 33, 0x00, 0x92, 40, 80, 0x00, 0x99, 36, 100];
        t.extend([0x81, 0x70, 0x82, 40, 0, 0x00, 0x89, 36, 0]);
        t.extend(EOT);
        let import = read_midi(&smf(0, 480, &[t]), &vocab()).unwrap();
        let instruments: Vec<u16> = import.notes.iter().map(|n| n.instrument).collect();
        assert_eq!(instruments, vec![33, 128]);
        assert!(import.notes.iter().all(|n| n.duration_s == 0.25));
    }

    #[test]
    fn tempo_change_mid_track() {
        // 120 BPM for one quarter, then 60 BPM. Note at tick 960 starts at
        // 0.5 s + 1.0 s and lasts one quarter = 1.0 s.
        let conductor = {
            let mut t = vec![0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20];
            t.extend([0x83, 0x60, 0xFF, 0x51, 0x03, 0x0F, 0x42, 0x40]);
            t.extend(EOT);
            t
        };
        let mut notes = vec![0x87, 0x40, 0x90, 72, 70, 0x83, 0x60, 0x80, 72, 0];
        notes.extend(EOT);
        let import = read_midi(&smf(1, 480, &[conductor, notes]), &vocab()).unwrap();
        let n = import.notes[0];
        assert_eq!((n.onset_s, n.duration_s), (1.5, 1.0));
    }

    #[test]
    fn tempo_map_arithmetic() {
        let map = TempoMap::new(96, vec![(96, 1_000_000), (192, 250_000)]);
        assert_eq!(map.seconds(0), 0.0);
        assert_eq!(map.seconds(96), 0.5);
        assert_eq!(map.seconds(192), 1.5);
        assert_eq!(map.seconds(288), 1.75);
    }

    #[test]
    fn fifo_matching_and_dangling_notes() {
        // two overlapping C4s, one off, then a note that never ends
        let mut t = vec![0x00, 0x90, 60, 100, 0x60, 0x90, 60, 90, 0x60, 0x80, 60, 0];
        t.extend([0x00, 0x90, 62, 50, 0x60]);
        t.extend([0xFF, 0x2F, 0x00]);
        let import = read_midi(&smf(0, 96, &[t]), &vocab()).unwrap();
        // first on (tick 0) closes at tick 192; second (96) closes at track end 288
        let c4: Vec<_> = import.notes.iter().filter(|n| n.pitch == 60).collect();
        assert_eq!(c4.len(), 2);
        assert_eq!((c4[0].onset_s, c4[0].duration_s, c4[0].velocity), (0.0, 1.0, 100));
        assert_eq!((c4[1].onset_s, c4[1].duration_s, c4[1].velocity), (0.5, 1.0, 90));
        assert_eq!(
            import.warnings,
            vec![
                MidiWarning::UnmatchedNoteOn { channel: 0, pitch: 60, tick: 96 },
                MidiWarning::UnmatchedNoteOn { channel: 0, pitch: 62, tick: 192 },
            ]
        );
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(read_midi(b"RIFF....", &vocab()), Err(MidiError::MalformedHeader(_))));
        assert!(matches!(
            read_midi(&smf(2, 480, &[EOT.to_vec()]), &vocab()),
            Err(MidiError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            read_midi(&smf(0, 0, &[EOT.to_vec()]), &vocab()),
            Err(MidiError::MalformedHeader(_))
        ));
        let mut no_track = smf(0, 480, &[EOT.to_vec()]);
        no_track.truncate(14);
        assert!(read_midi(&no_track, &vocab()).is_err());
    }

    #[test]
    fn empty_export_is_a_lone_end_of_track() {
        let bytes = write_midi(&[]).unwrap();
        let doc = MidiDocument::parse(&bytes).unwrap();
        assert_eq!(doc.format, 1);
        assert_eq!(doc.tracks, vec![vec![TimedEvent { tick: 0, kind: EventKind::EndOfTrack }]]);
        assert!(read_midi(&bytes, &vocab()).unwrap().notes.is_empty());
    }

    #[test]
    fn export_layout() {
        let notes = [
            NoteEvent::new(1.0, 0.5, 0, 60),
            NoteEvent::new(0.0, 0.25, 128, 36),
        ];
        let doc = MidiDocument::parse(&write_midi(&notes).unwrap()).unwrap();
        assert_eq!(doc.ticks_per_quarter, 480);
        assert_eq!(doc.tempo_map.changes().collect::<Vec<_>>(), vec![(0, 500_000)]);
        assert_eq!(doc.tracks.len(), 3);
        let piano = &doc.tracks[1];
        assert_eq!(piano[0].kind, EventKind::Program { channel: 0, program: 0 });
        assert_eq!(
            piano[1],
            TimedEvent { tick: 960, kind: EventKind::NoteOn { channel: 0, pitch: 60, velocity: 80 } }
        );
        assert_eq!(piano[2].tick, 1440);
        assert!(doc.tracks[2]
            .iter()
            .any(|e| matches!(e.kind, EventKind::NoteOn { channel: 9, pitch: 36, .. })));
    }

    #[test]
    fn too_many_instruments() {
        let notes: Vec<_> = (0..16).map(|i| NoteEvent::new(0.0, 0.5, i, 60)).collect();
        assert!(matches!(
            write_midi(&notes),
            Err(MidiError::TooManyInstruments { found: 16, melodic: 16 })
        ));
        let mut ok: Vec<_> = (0..15).map(|i| NoteEvent::new(0.0, 0.5, i, 60)).collect();
        ok.push(NoteEvent::new(0.0, 0.5, 128, 36));
        assert_eq!(read_midi(&write_midi(&ok).unwrap(), &vocab()).unwrap().notes.len(), 16);
        assert!(matches!(
            write_midi(&[NoteEvent::new(0.0, 0.5, 200, 60)]),
            Err(MidiError::InvalidInstrument(200))
        ));
    }
}
