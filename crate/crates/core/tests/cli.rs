use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use narrmine::synth::{Event, EventKind, FixtureRenderer, FixtureScript, PlannedSentence};

fn narrmine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_narrmine"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// 12 s at 160×120: two static scenes around a burst, a cursor line in the
/// second one and a question.
fn small_script() -> FixtureScript {
    let ev = |t_start_ms, t_end_ms, kind| Event {
        t_start_ms,
        t_end_ms,
        kind,
    };
    let sentence = |text: &str, t_start_ms, t_end_ms| PlannedSentence {
        text: text.into(),
        t_start_ms,
        t_end_ms,
        has_question_mark: text.contains('?'),
    };
    FixtureScript {
        video_id: "small".into(),
        width: 160,
        height: 120,
        fps: 10.0,
        duration_ms: 12_000,
        events: vec![
            ev(0, 4_000, EventKind::StaticBg { seed: 21 }),
            ev(4_000, 6_000, EventKind::MotionBurst { seed: 22 }),
            ev(6_000, 12_000, EventKind::StaticBg { seed: 23 }),
            ev(
                6_000,
                12_000,
                EventKind::CursorPath {
                    path: narrmine::synth::CursorPath::Line {
                        x1: 40.0,
                        y1: 60.0,
                        x2: 120.0,
                        y2: 60.0,
                    },
                    sentences: vec![1],
                },
            ),
        ],
        transcript_plan: vec![
            sentence("A quiet overview of the slide before we move on.", 0, 3_500),
            sentence(
                "Along this line the epithelium thins out and the basement membrane looks intact everywhere we follow it today?",
                6_000,
                11_500,
            ),
        ],
    }
}

fn write_script(dir: &Path) -> PathBuf {
    let path = dir.join("small_script.json");
    fs::write(&path, serde_json::to_string_pretty(&small_script()).unwrap()).unwrap();
    path
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_one() {
    let out = narrmine(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_required_input_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = narrmine(&["detect-chunks", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--input") && err.contains("Usage"), "{err}");
}

#[test]
fn unreadable_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = narrmine(&[
        "detect-chunks",
        "--input",
        p(&dir.path().join("missing.jsonl")),
        "--out",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[cluster]\nk_min = 0\n").unwrap();
    let out = narrmine(&["--config", p(&cfg), "synth", "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unreachable_client_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let captions = dir.path().join("captions.jsonl");
    fs::write(
        &captions,
        r#"{"chunk_id":"v_0","video_id":"v","image":"v_0.png","start_ms":0,"end_ms":5000,"caption":"nests of basaloid cells with palisading","word_count":6}"#.to_string() + "\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_narrmine"))
        .args([
            "-q",
            "--set",
            "client.endpoint=\"http://127.0.0.1:9/v1/chat/completions\"",
            "--set",
            "client.api_key_env=\"NARRMINE_TEST_KEY\"",
            "--set",
            "client.timeout_s=5",
            "--set",
            "quotas.detailed_description=0",
            "--set",
            "quotas.complex_reasoning=0",
            "--set",
            "quotas.iterative_abductive=0",
            "gen-instruct",
            "--client",
            "http",
            "--captions",
            p(&captions),
            "--out",
            p(&dir.path().join("out")),
        ])
        .env("NARRMINE_TEST_KEY", "test")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn http_client_without_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let captions = dir.path().join("captions.jsonl");
    fs::write(&captions, "").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_narrmine"))
        .args([
            "--set",
            "client.api_key_env=\"NARRMINE_UNSET_KEY\"",
            "gen-instruct",
            "--client",
            "http",
            "--captions",
            p(&captions),
            "--out",
            p(&dir.path().join("out")),
        ])
        .env_remove("NARRMINE_UNSET_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_detect_verify_and_nothing_written_outside_out() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path());
    let work = dir.path().join("work");
    fs::create_dir(&work).unwrap();
    let fixture = work.join("fx");
    assert!(narrmine(&["-q", "synth", "--script", p(&script), "--out", p(&fixture)]).status.success());
    let manifest = fixture.join("manifest.jsonl");
    let chunks = work.join("chunks");
    let out = narrmine(&["-q", "detect-chunks", "--input", p(&manifest), "--out", p(&chunks)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = fs::read_to_string(chunks.join("chunks.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2, "{records}");
    assert!(chunks.join("medians/small_0.png").exists());

    let traces = work.join("traces");
    assert!(narrmine(&[
        "-q",
        "extract-traces",
        "--input",
        p(&manifest),
        "--chunks",
        p(&chunks.join("chunks.jsonl")),
        "--out",
        p(&traces),
    ])
    .status
    .success());
    let verify = work.join("verify");
    let out = narrmine(&[
        "-q",
        "verify",
        "--truth",
        p(&fixture.join("truth.json")),
        "--chunks",
        p(&traces.join("chunks.jsonl")),
        "--traces",
        p(&traces.join("traces.jsonl")),
        "--out",
        p(&verify),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let mut top: Vec<String> = fs::read_dir(&work)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, ["chunks", "fx", "traces", "verify"]);
    let mut root: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    root.sort();
    assert_eq!(root, ["small_script.json", "work"]);
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path());
    let fixture = dir.path().join("fx");
    assert!(narrmine(&["-q", "synth", "--script", p(&script), "--out", p(&fixture)]).status.success());
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[detector]\nmin_duration_s = 5.0\n").unwrap();
    let manifest = fixture.join("manifest.jsonl");
    let count = |extra: &[&str], out: &str| {
        let out_dir = dir.path().join(out);
        let mut args = vec!["-q", "--config", p(&cfg)];
        args.extend_from_slice(extra);
        args.extend(["detect-chunks", "--input", p(&manifest), "--out", p(&out_dir)]);
        assert!(narrmine(&args).status.success());
        fs::read_to_string(out_dir.join("chunks.jsonl")).unwrap().lines().count()
    };
    assert_eq!(count(&[], "file_only"), 1);
    assert_eq!(count(&["--set", "detector.min_duration_s=3.0"], "with_set"), 2);
}

#[test]
fn raw_stream_input() {
    let dir = tempfile::tempdir().unwrap();
    let renderer = FixtureRenderer::new(small_script()).unwrap();
    let frames = renderer.frames(0, renderer.n_frames() - 1);
    let y4m = dir.path().join("clip.y4m");
    narrmine::frame::write_rgb24_stream(&y4m, renderer.frame_rate(), &frames).unwrap();
    let out_dir = dir.path().join("out");
    let out = narrmine(&["-q", "detect-chunks", "--input", p(&y4m), "--out", p(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(out_dir.join("chunks.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains("\"video_id\":\"clip\""));
}

#[test]
fn gen_instruct_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let captions = dir.path().join("captions.jsonl");
    let line = |id: &str, text: &str| {
        format!(
            r#"{{"chunk_id":"{id}","video_id":"v","image":"{id}.png","start_ms":0,"end_ms":5000,"caption":"{text}","word_count":9}}"#
        )
    };
    fs::write(
        &captions,
        [
            line("v_0", "Tumor islands with peripheral palisading sit in a fibromyxoid stroma"),
            line("v_9000", "Here the deep margin looks clear of any residual tumor nests"),
        ]
        .join("\n"),
    )
    .unwrap();
    let run = |seed: &str, out: &str| {
        let out_dir = dir.path().join(out);
        let o = narrmine(&[
            "-q",
            "--seed",
            seed,
            "gen-instruct",
            "--client",
            "stub",
            "--captions",
            p(&captions),
            "--out",
            p(&out_dir),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out_dir.join("instruct.jsonl")).unwrap()
    };
    let a = run("7", "a");
    let b = run("7", "b");
    let c = run("8", "c");
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn evaluate_and_annotate() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    fs::write(
        &gold,
        [
            r#"{"id":"q1","chunk_id":"c","image":"c.png","question":"What lines the nests?","answer":"palisading basaloid nuclei","category":"image_dependent","qtype":"open","verified":true}"#,
            r#"{"id":"q2","chunk_id":"c","image":"c.png","question":"Is this malignant?","answer":"yes","category":"image_dependent","qtype":"closed","verified":true}"#,
        ]
        .join("\n"),
    )
    .unwrap();
    let preds = dir.path().join("preds.jsonl");
    fs::write(
        &preds,
        "{\"id\":\"q1\",\"response\":\"palisading nuclei\"}\n{\"id\":\"q2\",\"response\":\"Yes, clearly.\"}\n",
    )
    .unwrap();
    let out = dir.path().join("eval");
    let o = narrmine(&[
        "-q",
        "evaluate",
        "--gold",
        p(&gold),
        "--predictions",
        p(&preds),
        "--judge",
        "stub",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["closed_accuracy"], 1.0);
    assert!((report["open_recall_mean"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!(fs::read_to_string(out.join("report.csv")).unwrap().starts_with("metric,value"));

    let image = dir.path().join("slide.png");
    narrmine::frame::Frame::filled(200, 150, &[200, 200, 200]).save_png(&image).unwrap();
    let ann = dir.path().join("ann");
    let o = narrmine(&["annotate", "--image", p(&image), "--bbox", "0.2,0.2,0.8,0.8", "--out", p(&ann)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let drawn = narrmine::frame::Frame::load_image(&ann.join("slide_annotated.png")).unwrap();
    assert!(drawn.data.chunks(3).any(|px| px == [255, 0, 0]));

    let o = narrmine(&["annotate", "--image", p(&image), "--bbox", "0.2,0.2,0.8", "--out", p(&ann)]);
    assert_eq!(o.status.code(), Some(1));
}
