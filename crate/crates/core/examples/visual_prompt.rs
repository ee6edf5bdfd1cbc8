//! Draw a red ellipse around a region of interest on a median frame.
//!
//!     cargo run --example visual_prompt [out.png]

use narrmine::eval::{draw_visual_prompt, stroke_thickness, RED};
use narrmine::synth::{FixtureRenderer, FixtureScript};

fn main() -> narrmine::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("narrmine_visual_prompt.png"));
    let renderer = FixtureRenderer::new(FixtureScript::bundled())?;
    let frame = renderer.frame(0);
    let bbox = [0.4, 0.3, 0.6, 0.7];
    let annotated = draw_visual_prompt(&frame, bbox)?;

    let changed = frame
        .to_rgb()
        .data
        .chunks(3)
        .zip(annotated.data.chunks(3))
        .filter(|(a, b)| a != b)
        .count();
    let red = annotated.data.chunks(3).filter(|p| *p == RED).count();
    println!(
        "{}x{} frame, stroke {} px, {changed} pixels changed, {red} pure red",
        frame.width,
        frame.height,
        stroke_thickness(frame.width, frame.height)
    );
    annotated.save_png(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
