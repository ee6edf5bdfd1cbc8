//! Cluster the cursor trace of a chunk with three separate gestures and
//! attach each stretch of narration to the region it points at.
//!
//!     cargo run --example cluster_grounding

use narrmine::caption::caption_for_chunk;
use narrmine::chunk::StableChunk;
use narrmine::cluster::{ground_caption, ClusterConfig, TraceGeometry};
use narrmine::cursor::{extract_trace, NullMask, TraceConfig};
use narrmine::synth::{ground_truth, FixtureRenderer, FixtureScript};

fn main() -> narrmine::Result<()> {
    let script = FixtureScript::bundled();
    let truth = ground_truth(&script)?;
    let transcript = script.transcript();
    let renderer = FixtureRenderer::new(script.clone())?;

    let t = truth.chunks.last().expect("bundled fixture has chunks");
    let mut chunk = StableChunk {
        video_id: truth.video_id.clone(),
        start_ms: t.start_ms,
        end_ms: t.end_ms,
        first_frame: t.first_frame,
        last_frame: t.last_frame,
        median_frame: None,
        has_cursor: false,
    };
    let frames = renderer.frames(t.first_frame, t.last_frame);
    let trace = extract_trace(&mut chunk, &frames, &TraceConfig::default(), &NullMask)?;
    let words = caption_for_chunk(&transcript, &chunk).word_timeline;
    let geometry = TraceGeometry {
        width: script.width,
        height: script.height,
        start_ms: chunk.start_ms,
        end_ms: chunk.end_ms,
    };
    let grounded = ground_caption(&trace, geometry, &words, &ClusterConfig::default())?;

    println!("{} words, {} cursor samples, {} clusters", words.len(), trace.samples.len(), grounded.clusters.len());
    for c in &grounded.clusters {
        let b = c.bbox;
        println!(
            "  words {:>2}..{:<2} midpoint {:.3} box [{:.3}, {:.3}, {:.3}, {:.3}]",
            c.word_span[0], c.word_span[1], c.midpoint, b[0], b[1], b[2], b[3]
        );
    }
    println!("scripted gestures:");
    for g in truth.gestures.iter().filter(|g| g.chunk_id == t.chunk_id) {
        let b = g.bbox;
        println!(
            "  words {:>2}..{:<2}                 box [{:.3}, {:.3}, {:.3}, {:.3}]",
            g.word_span[0], g.word_span[1], b[0], b[1], b[2], b[3]
        );
    }
    println!("\n{}", grounded.grounded_caption);
    Ok(())
}
