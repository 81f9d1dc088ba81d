use notestream_core::midi_io::read_midi;
use notestream_core::model::init_random;
use notestream_core::profiler::{DensityProfile, ProfileReport};
use notestream_core::{Model, NoteEvent, Preset, VocabSpec};
use notestream_service::{spawn, AppState};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::sync::Arc;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_notestream"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn lines(out: &Output) -> Vec<NoteEvent> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_owned()
}

const FOUR: &str = "0,24,32,128";

#[test]
fn generate_writes_identical_midi_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (p(&dir, "a.mid"), p(&dir, "b.mid"), p(&dir, "c.mid"));
    for out in [&a, &b] {
        ok(&["generate", "--notes", "170", "--seed", "1", "--ensemble", FOUR, "--out", out]);
    }
    ok(&["generate", "--notes", "170", "--seed", "2", "--ensemble", FOUR, "--out", &c]);
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
    let notes = read_midi(&a, &VocabSpec::default()).unwrap().notes;
    assert_eq!(notes.len(), 170);
    assert!(notes.iter().all(|n| [0, 24, 32, 128].contains(&n.instrument)));
}

#[test]
fn single_instrument_ensemble() {
    let out = ok(&["generate", "--notes", "300", "--seed", "4", "--ensemble", "0"]);
    let notes = lines(&out);
    assert_eq!(notes.len(), 300);
    assert!(notes.iter().all(|n| n.instrument == 0));
}

#[test]
fn too_many_instruments_for_midi_is_explained() {
    let dir = TempDir::new().unwrap();
    let out = run(&["generate", "--notes", "170", "--seed", "1", "--out", &p(&dir, "x.mid")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ensemble"));
}

#[test]
fn prompt_continues_a_midi_file() {
    let dir = TempDir::new().unwrap();
    let prompt = p(&dir, "prompt.mid");
    ok(&["generate", "--notes", "40", "--seed", "8", "--ensemble", "0,128", "--out", &prompt]);
    let a = ok(&["generate", "--notes", "50", "--seed", "2", "--prompt", &prompt]);
    let b = ok(&["generate", "--notes", "50", "--seed", "2"]);
    let (a, b) = (lines(&a), lines(&b));
    assert_eq!(a.len(), 50);
    assert_ne!(a, b);
    let last_prompt = read_midi(&std::fs::read(&prompt).unwrap(), &VocabSpec::default())
        .unwrap()
        .notes
        .iter()
        .map(|n| n.onset_s)
        .fold(0.0, f64::max);
    assert!(a[0].onset_s >= last_prompt);
}

#[test]
fn stream_emits_exactly_the_limit() {
    let out = ok(&["stream", "--notes-limit", "1000", "--seed", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1000);
    let mut prev = 0.0;
    for l in text.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 5, "{l}");
        for k in ["onset_s", "dur_s", "instrument", "pitch", "velocity"] {
            assert!(v.get(k).is_some(), "{l} lacks {k}");
        }
        let onset = v["onset_s"].as_f64().unwrap();
        assert!(onset >= prev);
        prev = onset;
    }
    let stderr = String::from_utf8(out.stderr).unwrap();
    let summary: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(summary["notes"], 1000);
    assert_eq!(summary["tokens"], 3000);

    // the stream is one-shot generation continued
    let gen = ok(&["generate", "--notes", "1000", "--seed", "3"]);
    assert_eq!(gen.stdout, text.as_bytes());
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&["generate", "--no-such-flag"]), 2);
    assert_eq!(code(&["generate", "--temperature", "0"]), 2);
    assert_eq!(code(&["generate", "--ensemble", "0,x"]), 2);
    assert_eq!(code(&["generate", "--config-preset", "huge"]), 2);
    assert_eq!(code(&["generate", "--weights", &p(&dir, "missing.bin")]), 3);
    assert_eq!(code(&["generate", "--prompt", &p(&dir, "missing.mid")]), 3);
    assert_eq!(code(&["generate", "--notes", "1", "--out", &p(&dir, "no/such/dir/x.mid")]), 3);
    assert_eq!(code(&["generate", "--server", "http://127.0.0.1:1"]), 3);

    let bad = p(&dir, "bad.bin");
    std::fs::write(&bad, [0u8; 16]).unwrap();
    std::fs::write(format!("{bad}.json"), r#"{"format":"nope","version":1,"tensors":[]}"#).unwrap();
    assert_eq!(code(&["generate", "--weights", &bad]), 4);

    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    assert_eq!(code(&["stream", "--listen", &addr]), 5);
}

#[test]
fn saved_weights_match_seeded_weights() {
    let dir = TempDir::new().unwrap();
    let w = p(&dir, "toy.bin");
    ok(&["init-weights", "--weights-seed", "12", "--out", &w]);
    assert!(Path::new(&format!("{w}.json")).exists());
    let a = ok(&["generate", "--notes", "60", "--weights", &w]);
    let b = ok(&["generate", "--notes", "60", "--weights-seed", "12"]);
    let c = ok(&["generate", "--notes", "60"]);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn config_file_mirrors_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = p(&dir, "cfg.json");
    std::fs::write(&cfg, r#"{"seed": 6, "ensemble": "0,128", "notes": 30, "alpha": 2.0}"#).unwrap();
    let from_file = ok(&["generate", "--config", &cfg]);
    let from_flags = ok(&["generate", "--seed", "6", "--ensemble", "0,128", "--notes", "30", "--alpha", "2"]);
    assert_eq!(from_file.stdout, from_flags.stdout);
    let overridden = ok(&["generate", "--config", &cfg, "--ensemble", "0"]);
    assert!(lines(&overridden).iter().all(|n| n.instrument == 0));

    std::fs::write(&cfg, r#"{"sed": 6}"#).unwrap();
    assert_eq!(code(&["generate", "--config", &cfg]), 2);
}

/// Notes at the middle of each 3/d s slot, last one ending at `horizon`.
fn constant_density(d: f64, horizon: f64) -> Vec<NoteEvent> {
    let slot = 3.0 / d;
    let mut notes: Vec<NoteEvent> = (0..)
        .map(|k| (k as f64 + 0.5) * slot)
        .take_while(|&t| t < horizon)
        .map(|t| NoteEvent::new(t, 0.05, 0, 60))
        .collect();
    let last = notes.last_mut().unwrap();
    last.duration_s = horizon - last.onset_s;
    notes
}

#[test]
fn profile_of_synthetic_generations_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let input = p(&dir, "gens.jsonl");
    let (d, horizon) = (60.0, 40.0);
    let gen = serde_json::to_string(&constant_density(d, horizon)).unwrap();
    std::fs::write(&input, format!("{gen}\n{gen}\n{gen}\n")).unwrap();

    for r in [20.0, 45.0, 155.0] {
        let (report, csv) = (p(&dir, "r.json"), p(&dir, "d.csv"));
        let rate = r.to_string();
        ok(&[
            "profile", "--input", &input, "--rate-override", &rate, "--buffers", "0,2", "--out", &report, "--csv", &csv,
        ]);
        let report: ProfileReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
        assert_eq!(report.n_generations, 3);
        assert_eq!(report.rate.notes_per_s * 3.0, report.rate.tok_per_s);
        let fractions: Vec<f64> = report.streamable.iter().map(|s| s.fraction).collect();
        for (b, got) in [0.0, 2.0].into_iter().zip(&fractions) {
            let expected = if r >= d { 1.0 } else { (r * b / ((d - r) * horizon)).min(1.0) };
            assert!((got - expected).abs() <= 0.005, "R={r} b={b}: {got} vs {expected}");
        }
        assert!(fractions[1] >= fractions[0]);

        let density = DensityProfile::from_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
        for bin in &density.bins {
            assert_eq!(bin.stdev_tok_s, 0.0);
        }
        let full: Vec<_> = density.bins.iter().filter(|b| b.bin_start_s + 1.0 <= horizon).collect();
        assert!(full.iter().all(|b| (b.mean_tok_s - d).abs() < 3.0 + 1e-9), "{full:?}");
    }
    assert_eq!(code(&["profile", "--input", &input]), 2);
}

#[test]
fn single_generation_profile_has_zero_spread() {
    let dir = TempDir::new().unwrap();
    let (report, csv, svg) = (p(&dir, "r.json"), p(&dir, "d.csv"), p(&dir, "d.svg"));
    ok(&[
        "profile", "--generations", "1", "--out", &report, "--csv", &csv, "--svg", &svg, "--label", "one",
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "bin_start_s,mean_tok_s,stdev_tok_s,n");
    let density = DensityProfile::from_csv(&text).unwrap();
    assert!(!density.bins.is_empty());
    assert!(density.bins.iter().all(|b| b.stdev_tok_s == 0.0));
    let one: ProfileReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(one.label.as_deref(), Some("one"));
    assert!(one.measured.is_some());
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    // the published rate recomputes the fractions, buffered never below unbuffered
    ok(&["profile", "--generations", "3", "--rate-override", "155", "--out", &report]);
    let report: ProfileReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!((report.table.notes_per_s - 155.0 / 3.0).abs() < 1e-12);
    let (u, b) = (report.table.streamable_pct.unwrap(), report.table.streamable_buffered_pct.unwrap());
    assert!(b >= u, "{b} < {u}");

    let plot = ok(&["plot", "--csv", &csv, "--rate", "155", "--rate", "72"]);
    let svg = String::from_utf8(plot.stdout).unwrap();
    assert!(svg.contains("155 tok/s") && svg.contains("72 tok/s"));
}

#[test]
fn remote_generation_matches_local() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let v = VocabSpec::default();
    let cfg = Preset::Toy.config(v.vocab_size());
    let model = Arc::new(Model::new(cfg, init_random(&cfg, 0)).unwrap());
    let server = rt.block_on(spawn("127.0.0.1:0", AppState::new(model, v, None).unwrap())).unwrap();
    let url = server.url();
    let args = ["generate", "--notes", "200", "--seed", "5", "--alpha", "3"];
    let local = ok(&args);
    let mut remote_args = args.to_vec();
    remote_args.extend(["--server", url.as_str()]);
    let remote = ok(&remote_args);
    assert_eq!(local.stdout, remote.stdout);

    let mut bad = remote_args.clone();
    bad.extend(["--top-p", "0"]);
    assert_eq!(code(&bad), 2);
    let out = ok(&["profile", "--generations", "2", "--server", &url]);
    let report: ProfileReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.n_generations, 2);
    rt.block_on(server.shutdown()).unwrap();
}

#[test]
fn listen_and_connect() {
    let mut host = bin()
        .args(["stream", "--listen", "127.0.0.1:0", "--quiet", "--paused", "--seed", "9"])
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut err = BufReader::new(host.stderr.take().unwrap());
    let mut first = String::new();
    err.read_line(&mut first).unwrap();
    let url = first
        .split_whitespace()
        .find(|w| w.starts_with("http://"))
        .unwrap_or_else(|| panic!("no address in {first:?}"))
        .to_owned();
    std::thread::spawn(move || std::io::copy(&mut err, &mut std::io::sink()));

    let out = ok(&["stream", "--connect", &url, "--start", "--ensemble", "0", "--notes-limit", "400"]);
    let notes = lines(&out);
    assert_eq!(notes.len(), 400);
    // the host was paused, so every chunk follows the ensemble change
    assert!(notes.iter().all(|n| n.instrument == 0));

    assert_eq!(code(&["stream", "--connect", &url, "--alpha", "-1", "--notes-limit", "1"]), 2);

    Command::new("kill").args(["-INT", &host.id().to_string()]).status().unwrap();
    assert!(host.wait().unwrap().success());
}

#[test]
fn paused_reader_loses_nothing() {
    let mut child = bin()
        .args(["stream", "--notes-limit", "3000", "--seed", "13"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut first = String::new();
    out.read_line(&mut first).unwrap();
    // leave the pipe full for a while
    std::thread::sleep(std::time::Duration::from_millis(1500));
    let mut rest = String::new();
    std::io::Read::read_to_string(&mut out, &mut rest).unwrap();
    assert!(child.wait().unwrap().success());
    let streamed = first + &rest;
    assert_eq!(streamed.lines().count(), 3000);
    let direct = ok(&["generate", "--notes", "3000", "--seed", "13"]);
    assert_eq!(streamed.as_bytes(), direct.stdout);
}
