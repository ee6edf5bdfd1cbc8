//! Render the bundled fixture to disk, run every stage through the
//! command-line front end and check the outputs against ground truth.
//!
//!     cargo run --example synth_and_verify [work_dir]

use std::path::PathBuf;

fn main() {
    let work = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("narrmine_synth_and_verify"));
    let d = |name: &str| work.join(name).to_string_lossy().into_owned();
    let manifest = d("fixture/manifest.jsonl");
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--out".into(), d("fixture")],
        vec!["detect-chunks".into(), "--input".into(), manifest.clone(), "--out".into(), d("chunks")],
        vec![
            "extract-traces".into(),
            "--input".into(),
            manifest.clone(),
            "--chunks".into(),
            d("chunks/chunks.jsonl"),
            "--out".into(),
            d("traces"),
        ],
        vec![
            "cluster".into(),
            "--input".into(),
            manifest.clone(),
            "--chunks".into(),
            d("traces/chunks.jsonl"),
            "--traces".into(),
            d("traces/traces.jsonl"),
            "--out".into(),
            d("grounded"),
        ],
        vec![
            "align-captions".into(),
            "--input".into(),
            manifest.clone(),
            "--chunks".into(),
            d("traces/chunks.jsonl"),
            "--grounded".into(),
            d("grounded/grounded.jsonl"),
            "--out".into(),
            d("captions"),
        ],
        vec![
            "extract-vqa".into(),
            "--input".into(),
            manifest.clone(),
            "--chunks".into(),
            d("traces/chunks.jsonl"),
            "--client".into(),
            "stub".into(),
            "--out".into(),
            d("vqa"),
        ],
        vec![
            "verify".into(),
            "--truth".into(),
            d("fixture/truth.json"),
            "--chunks".into(),
            d("traces/chunks.jsonl"),
            "--traces".into(),
            d("traces/traces.jsonl"),
            "--grounded".into(),
            d("grounded/grounded.jsonl"),
            "--questions".into(),
            d("vqa/questions.jsonl"),
            "--out".into(),
            d("verify"),
        ],
    ];
    for step in steps {
        let argv = std::iter::once("narrmine".to_string()).chain(step.iter().cloned());
        let code = narrmine::cli::run(argv);
        println!("{:<15} exit {code}", step[0]);
        if code != 0 {
            std::process::exit(code);
        }
    }
    println!("outputs under {}", work.display());
}
