//! Cut per-chunk captions out of a timed transcript and apply the
//! 20 to 150 word length filter.
//!
//!     cargo run --example caption_filter

use narrmine::caption::{caption_for_chunk, caption_length_ok, filter_captions, CaptionedChunk, TimedWord};
use narrmine::chunk::StableChunk;
use narrmine::synth::{ground_truth, FixtureScript};

fn chunk(video_id: &str, start_ms: u64, end_ms: u64) -> StableChunk {
    StableChunk {
        video_id: video_id.into(),
        start_ms,
        end_ms,
        first_frame: 0,
        last_frame: 0,
        median_frame: None,
        has_cursor: false,
    }
}

fn main() -> narrmine::Result<()> {
    let script = FixtureScript::bundled();
    let transcript = script.transcript();
    for t in ground_truth(&script)?.chunks {
        let c = caption_for_chunk(&transcript, &chunk(&script.video_id, t.start_ms, t.end_ms));
        println!(
            "{:<16} {:>3} words  keep={:<5} {}",
            t.chunk_id,
            c.word_count(),
            caption_length_ok(c.word_count()),
            c.caption
        );
    }

    let corpus: Vec<CaptionedChunk> = (1..=200)
        .map(|n| CaptionedChunk {
            chunk: chunk("lengths", n as u64 * 1000, n as u64 * 1000 + 1000),
            caption: vec!["word"; n].join(" "),
            word_timeline: (0..n)
                .map(|i| TimedWord {
                    word: "word".into(),
                    t_ms: i as f64,
                })
                .collect(),
        })
        .collect();
    let kept: Vec<usize> = filter_captions(corpus).iter().map(|c| c.word_count()).collect();
    println!(
        "\nlength sweep 1..=200: kept {} captions, shortest {}, longest {}",
        kept.len(),
        kept.first().unwrap_or(&0),
        kept.last().unwrap_or(&0)
    );
    Ok(())
}
