//! Map narrator questions to nearby stable chunks and extract question and
//! answer pairs with the offline stub client.
//!
//!     cargo run --example vqa_harvest

use narrmine::caption::{word_timeline, Segment};
use narrmine::llm::{CompletionParams, StubClient};
use narrmine::vqa::{harvest_video, ChunkRef};

fn main() -> narrmine::Result<()> {
    let seg = |text: &str, start_ms: u64, end_ms: u64| Segment {
        text: text.into(),
        start_ms,
        end_ms,
    };
    let segments = vec![
        seg("Here we are looking at a lymph node at low power.", 0, 4_000),
        seg("Do you know what organ this is? Yes, this is a lymph node.", 4_000, 9_000),
        seg("Zooming in on the follicles now.", 20_000, 23_000),
        seg("What does CD20 stain? It marks B cells.", 60_000, 65_000),
        seg("Much later, is anyone still here?", 200_000, 203_000),
    ];
    let timeline = word_timeline(&segments);
    let chunks = vec![
        ChunkRef {
            chunk_id: "node_0".into(),
            image: "medians/node_0.png".into(),
            start_ms: 0,
            end_ms: 9_000,
        },
        ChunkRef {
            chunk_id: "node_20000".into(),
            image: "medians/node_20000.png".into(),
            start_ms: 20_000,
            end_ms: 26_000,
        },
    ];
    let harvest = harvest_video(&timeline, &chunks, &StubClient::new(0), &CompletionParams::default());
    println!("question assignments:");
    for a in &harvest.assignments {
        println!("  {:>9.0} ms -> {:<11} {}", a.t_ms, a.chunk_id, a.question);
    }
    println!("pairs:");
    for p in &harvest.pairs {
        println!("  {}", serde_json::to_string(p)?);
    }
    Ok(())
}
