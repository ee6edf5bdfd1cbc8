//! Detect static-background chunks in the bundled synthetic video and compare
//! them with the scripted segments.
//!
//!     cargo run --example detect_chunks

use std::time::Instant;

use narrmine::chunk::{detect_stable_chunks, DetectorConfig};
use narrmine::synth::{ground_truth, FixtureRenderer, FixtureScript};

fn main() -> narrmine::Result<()> {
    let script = FixtureScript::bundled();
    let truth = ground_truth(&script)?;
    let renderer = FixtureRenderer::new(script)?;

    let started = Instant::now();
    let chunks = detect_stable_chunks(renderer.stream(), &DetectorConfig::default(), "fixture")?;
    println!(
        "{} frames scanned in {:.2?}, {} chunks found",
        renderer.n_frames(),
        started.elapsed(),
        chunks.len()
    );
    for c in &chunks {
        println!(
            "  {:<16} {:>6}..{:<6} ms  frames {}..={}",
            c.id(),
            c.start_ms,
            c.end_ms,
            c.first_frame,
            c.last_frame
        );
    }
    println!("scripted:");
    for t in &truth.chunks {
        println!(
            "  {:<16} {:>6}..{:<6} ms  frames {}..={}",
            t.chunk_id, t.start_ms, t.end_ms, t.first_frame, t.last_frame
        );
    }
    Ok(())
}
