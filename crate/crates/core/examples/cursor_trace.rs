//! Recover a circling cursor next to two distractors: a faint flicker and an
//! animated high-contrast "webcam" block. Masking the block is what makes
//! the trace usable.
//!
//!     cargo run --example cursor_trace

use narrmine::chunk::StableChunk;
use narrmine::cursor::{extract_trace, MaskProvider, MaskRegion, NullMask, StaticMask, TraceConfig, TraceRecord};
use narrmine::synth::{
    ground_truth, verify_against_truth, FixtureRenderer, FixtureScript, PipelineOutputs, Tolerances,
};

fn main() -> narrmine::Result<()> {
    let script = FixtureScript::cursor_with_distractors();
    let truth = ground_truth(&script)?;
    let renderer = FixtureRenderer::new(script)?;
    let t = &truth.chunks[0];
    let frames = renderer.frames(t.first_frame, t.last_frame);

    let masked = StaticMask(MaskRegion {
        rectangles: truth.mask.clone(),
    });
    let runs: [(&str, &dyn MaskProvider); 2] = [("with mask", &masked), ("without mask", &NullMask)];
    for (label, masks) in runs {
        let mut chunk = StableChunk {
            video_id: truth.video_id.clone(),
            start_ms: t.start_ms,
            end_ms: t.end_ms,
            first_frame: t.first_frame,
            last_frame: t.last_frame,
            median_frame: None,
            has_cursor: false,
        };
        let trace = extract_trace(&mut chunk, &frames, &TraceConfig::default(), masks)?;
        let outputs = PipelineOutputs {
            traces: Some(vec![TraceRecord::from(&trace)]),
            ..Default::default()
        };
        let report = verify_against_truth(&outputs, &truth, &Tolerances::default())?;
        println!("{label}: active={} samples={}", trace.active, trace.samples.len());
        if let Some(first) = trace.samples.first() {
            println!("  first sample t={} ms at ({}, {})", first.t_ms, first.x, first.y);
        }
        println!("  {}", report.render().replace('\n', "\n  "));
    }
    Ok(())
}
