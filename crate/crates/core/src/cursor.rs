//! Cursor isolation inside a stable chunk.
//!
//! The chunk's per-pixel median frame is the background estimate; each
//! frame's grayscale residual against it is thresholded, distractor regions
//! are masked, and the brightest remaining pixel is taken as the cursor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunk::StableChunk;
use crate::error::{Error, Result};
use crate::frame::{to_grayscale, Frame, Plane, ResidualMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CursorSample {
    pub t_ms: u64,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CursorTrace {
    pub chunk_id: String,
    pub samples: Vec<CursorSample>,
    pub active: bool,
}

/// Pixel rectangle, half-open: covers `x1..x2` × `y1..y2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl Rect {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Rect { x1, y1, x2, y2 }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x1..self.x2).contains(&x) && (self.y1..self.y2).contains(&y)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskRegion {
    pub rectangles: Vec<Rect>,
}

impl MaskRegion {
    pub fn none() -> Self {
        MaskRegion::default()
    }
}

/// Supplies distractor rectangles (faces, webcam overlays) per frame.
pub trait MaskProvider: Sync {
    fn mask_for(&self, frame: &Frame) -> std::result::Result<MaskRegion, String>;
}

/// Masks nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullMask;

impl MaskProvider for NullMask {
    fn mask_for(&self, _: &Frame) -> std::result::Result<MaskRegion, String> {
        Ok(MaskRegion::none())
    }
}

/// The same rectangles on every frame.
#[derive(Debug, Clone, Default)]
pub struct StaticMask(pub MaskRegion);

impl MaskProvider for StaticMask {
    fn mask_for(&self, _: &Frame) -> std::result::Result<MaskRegion, String> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    /// Residuals below this (8-bit gray units) are treated as noise.
    pub tau: u8,
    /// Minimum fraction of frames with a located cursor.
    pub min_active_fraction: f64,
    /// Minimum spatial extent (px, max of the x and y ranges) of the trace.
    pub min_extent_px: u32,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            tau: 30,
            min_active_fraction: 0.25,
            min_extent_px: 5,
        }
    }
}

/// Per-pixel, per-channel median. Even counts take the lower median.
pub fn median_frame(frames: &[Frame]) -> Result<Frame> {
    let first = frames.first().ok_or(Error::EmptyInput("median of no frames"))?;
    if let Some(bad) = frames.iter().find(|f| !f.same_shape(first)) {
        return Err(Error::Shape(format!(
            "frame {} is {}x{}x{}, expected {}x{}x{}",
            bad.index, bad.width, bad.height, bad.channels, first.width, first.height, first.channels
        )));
    }
    let n = frames.len();
    let rank = (n - 1) / 2;
    let len = first.data.len();
    let data: Vec<u8> = (0..len)
        .into_par_iter()
        .with_min_len(4096)
        .map_init(
            || vec![0u8; n],
            |buf, i| {
                for (slot, f) in buf.iter_mut().zip(frames) {
                    *slot = f.data[i];
                }
                *buf.select_nth_unstable(rank).1
            },
        )
        .collect();
    Ok(Frame {
        width: first.width,
        height: first.height,
        channels: first.channels,
        data,
        timestamp_ms: first.timestamp_ms,
        index: first.index,
    })
}

/// Grayscale |f − background|, zeroed below `tau` and inside the mask.
pub fn residual_map(
    f: &Frame,
    background: &Frame,
    tau: u8,
    mask: &MaskRegion,
) -> Result<ResidualMap> {
    if f.width != background.width || f.height != background.height {
        return Err(Error::Shape(format!(
            "frame {}x{} vs background {}x{}",
            f.width, f.height, background.width, background.height
        )));
    }
    let bg = to_grayscale(background).plane;
    Ok(residual_against(&to_grayscale(f).plane, &bg, tau, mask))
}

fn residual_against(gray: &Plane, bg: &Plane, tau: u8, mask: &MaskRegion) -> ResidualMap {
    let data = gray
        .data
        .iter()
        .zip(&bg.data)
        .map(|(&a, &b)| {
            let d = a.abs_diff(b);
            if d < tau {
                0
            } else {
                d
            }
        })
        .collect();
    let mut out = Plane {
        width: gray.width,
        height: gray.height,
        data,
    };
    for r in &mask.rectangles {
        let x2 = r.x2.min(out.width);
        let y2 = r.y2.min(out.height);
        for y in r.y1.min(y2)..y2 {
            let row = y as usize * out.width as usize;
            out.data[row + r.x1.min(x2) as usize..row + x2 as usize].fill(0);
        }
    }
    out
}

/// Coordinates of the maximum residual; row-major first on ties.
pub fn locate_cursor(r: &ResidualMap) -> Option<(u32, u32)> {
    let mut best: Option<(usize, u8)> = None;
    for (i, &v) in r.data.iter().enumerate() {
        if v > 0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| ((i % r.width as usize) as u32, (i / r.width as usize) as u32))
}

/// Recover the cursor trace of one chunk.
///
/// Computes and stores the chunk's median frame, localises the cursor on
/// every frame, and decides whether the trace shows active movement.
pub fn extract_trace(
    chunk: &mut StableChunk,
    frames: &[Frame],
    cfg: &TraceConfig,
    masks: &dyn MaskProvider,
) -> Result<CursorTrace> {
    if let Some(stray) = frames.iter().find(|f| !chunk.contains_frame(f.index)) {
        return Err(Error::Validation(format!(
            "frame {} is outside chunk {}",
            stray.index,
            chunk.id()
        )));
    }
    let background = median_frame(frames)?;
    let bg = to_grayscale(&background).plane;
    chunk.median_frame = Some(background);

    let located: Vec<Option<CursorSample>> = frames
        .par_iter()
        .map(|f| {
            let mask = masks.mask_for(f).map_err(|message| Error::Plugin {
                chunk_id: chunk.id(),
                message,
            })?;
            let residual = residual_against(&to_grayscale(f).plane, &bg, cfg.tau, &mask);
            Ok(locate_cursor(&residual).map(|(x, y)| CursorSample {
                t_ms: f.timestamp_ms,
                x,
                y,
            }))
        })
        .collect::<Result<_>>()?;

    let mut samples: Vec<CursorSample> = located.into_iter().flatten().collect();
    samples.sort_by_key(|s| s.t_ms);
    let active = is_active(&samples, frames.len(), cfg);
    if !active {
        samples.clear();
    }
    chunk.has_cursor = active;
    Ok(CursorTrace {
        chunk_id: chunk.id(),
        samples,
        active,
    })
}

fn is_active(samples: &[CursorSample], n_frames: usize, cfg: &TraceConfig) -> bool {
    if samples.is_empty() || n_frames == 0 {
        return false;
    }
    let fraction = samples.len() as f64 / n_frames as f64;
    let span = |f: fn(&CursorSample) -> u32| {
        let lo = samples.iter().map(f).min().unwrap_or(0);
        let hi = samples.iter().map(f).max().unwrap_or(0);
        hi - lo
    };
    let extent = span(|s| s.x).max(span(|s| s.y));
    fraction >= cfg.min_active_fraction && extent >= cfg.min_extent_px
}

/// One line of the trace JSONL output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub chunk_id: String,
    pub active: bool,
    pub samples: Vec<[u64; 3]>,
}

impl From<&CursorTrace> for TraceRecord {
    fn from(t: &CursorTrace) -> Self {
        TraceRecord {
            chunk_id: t.chunk_id.clone(),
            active: t.active,
            samples: t
                .samples
                .iter()
                .map(|s| [s.t_ms, s.x as u64, s.y as u64])
                .collect(),
        }
    }
}

impl From<TraceRecord> for CursorTrace {
    fn from(r: TraceRecord) -> Self {
        CursorTrace {
            chunk_id: r.chunk_id,
            active: r.active,
            samples: r
                .samples
                .into_iter()
                .map(|[t_ms, x, y]| CursorSample {
                    t_ms,
                    x: x as u32,
                    y: y as u32,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(w: u32, h: u32, v: u8) -> Frame {
        Frame::filled(w, h, &[v])
    }

    fn chunk(n: u64) -> StableChunk {
        StableChunk {
            video_id: "vid".into(),
            start_ms: 0,
            end_ms: n * 100,
            first_frame: 0,
            last_frame: n - 1,
            median_frame: None,
            has_cursor: false,
        }
    }

    #[test]
    fn median_cases() {
        let f = Frame::filled(3, 2, &[9, 8, 7]);
        assert_eq!(median_frame(&[f.clone(), f.clone(), f.clone()]).unwrap().data, f.data);
        let odd: Vec<Frame> = [1u8, 9, 2].iter().map(|&v| gray(1, 1, v)).collect();
        assert_eq!(median_frame(&odd).unwrap().data, vec![2]);
        let even: Vec<Frame> = [255u8, 0, 20, 10].iter().map(|&v| gray(1, 1, v)).collect();
        assert_eq!(median_frame(&even).unwrap().data, vec![10]);
        assert!(matches!(median_frame(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn residual_cases() {
        let bg = gray(8, 8, 100);
        let r = residual_map(&bg, &bg, 30, &MaskRegion::none()).unwrap();
        assert!(r.data.iter().all(|&v| v == 0));

        let mut f = bg.clone();
        f.data[3 * 8 + 4] = 255; // residual 155
        f.data[5 * 8 + 1] = 110; // residual 10, below tau
        let r = residual_map(&f, &bg, 30, &MaskRegion::none()).unwrap();
        assert_eq!(r.get(4, 3), 155);
        assert_eq!(r.data.iter().filter(|&&v| v > 0).count(), 1);

        let masked = MaskRegion {
            rectangles: vec![Rect::new(2, 2, 6, 6)],
        };
        let r = residual_map(&f, &bg, 30, &masked).unwrap();
        assert!(r.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn locate_cases() {
        assert_eq!(locate_cursor(&Plane::filled(5, 5, 0)), None);
        let mut r = Plane::filled(64, 32, 0);
        r.set(37, 12, 180);
        r.set(3, 3, 40);
        assert_eq!(locate_cursor(&r), Some((37, 12)));
        let mut tie = Plane::filled(16, 16, 0);
        tie.set(5, 5, 90);
        tie.set(9, 2, 90);
        assert_eq!(locate_cursor(&tie), Some((9, 2)));
    }

    fn dotted(bg: &Frame, x: u32, y: u32) -> Frame {
        let mut f = bg.clone();
        f.data[(y * bg.width + x) as usize] = 250;
        f
    }

    #[test]
    fn scripted_path_is_recovered() {
        let bg = gray(40, 30, 90);
        let n = 20u64;
        let path: Vec<(u32, u32)> = (0..n).map(|i| (2 + i as u32, 5 + (i as u32 / 2))).collect();
        let frames: Vec<Frame> = path
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| dotted(&bg, x, y).with_position(i as u64, i as u64 * 100))
            .collect();
        let mut c = chunk(n);
        let trace = extract_trace(&mut c, &frames, &TraceConfig::default(), &NullMask).unwrap();
        assert!(trace.active && c.has_cursor);
        assert_eq!(c.median_frame.as_ref().unwrap().data, bg.data);
        let got: Vec<(u32, u32)> = trace.samples.iter().map(|s| (s.x, s.y)).collect();
        assert_eq!(got, path);
        assert_eq!(trace.chunk_id, "vid_0");
    }

    #[test]
    fn pure_background_is_inactive() {
        let frames: Vec<Frame> = (0..10)
            .map(|i| gray(8, 8, 60).with_position(i, i * 100))
            .collect();
        let mut c = chunk(10);
        let trace = extract_trace(&mut c, &frames, &TraceConfig::default(), &NullMask).unwrap();
        assert!(!trace.active && trace.samples.is_empty());
    }

    #[test]
    fn sparse_cursor_is_inactive() {
        let bg = gray(40, 30, 90);
        // cursor on 2 of 20 frames: 10% < 25%
        let frames: Vec<Frame> = (0..20u64)
            .map(|i| {
                let f = if i == 3 || i == 11 {
                    dotted(&bg, 5 + i as u32 * 2, 9)
                } else {
                    bg.clone()
                };
                f.with_position(i, i * 100)
            })
            .collect();
        let mut c = chunk(20);
        let trace = extract_trace(&mut c, &frames, &TraceConfig::default(), &NullMask).unwrap();
        assert!(!trace.active);
        assert!(trace.samples.is_empty());
    }

    #[test]
    fn parked_cursor_is_inactive() {
        let bg = gray(40, 30, 90);
        let frames: Vec<Frame> = (0..20u64)
            .map(|i| {
                let f = if i < 8 { dotted(&bg, 10, 10) } else { bg.clone() };
                f.with_position(i, i * 100)
            })
            .collect();
        let mut c = chunk(20);
        let trace = extract_trace(&mut c, &frames, &TraceConfig::default(), &NullMask).unwrap();
        assert!(!trace.active);
    }

    struct Failing;
    impl MaskProvider for Failing {
        fn mask_for(&self, _: &Frame) -> std::result::Result<MaskRegion, String> {
            Err("detector offline".into())
        }
    }

    #[test]
    fn mask_failure_is_plugin_error() {
        let frames = vec![gray(4, 4, 1).with_position(0, 0)];
        let mut c = chunk(1);
        let err = extract_trace(&mut c, &frames, &TraceConfig::default(), &Failing).unwrap_err();
        assert!(matches!(err, Error::Plugin { .. }));
    }

    fn small_frame() -> impl Strategy<Value = Frame> {
        proptest::collection::vec(any::<u8>(), 3 * 6 * 5)
            .prop_map(|d| Frame::new(6, 5, 3, d).unwrap())
    }

    proptest! {
        #[test]
        fn median_is_permutation_invariant(
            frames in proptest::collection::vec(small_frame(), 1..6),
            seed in any::<u64>(),
        ) {
            let mut shuffled = frames.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(median_frame(&frames).unwrap().data, median_frame(&shuffled).unwrap().data);
        }

        #[test]
        fn mask_zeroes_residual(
            f in small_frame(), bg in small_frame(),
            x1 in 0u32..6, y1 in 0u32..5, w in 0u32..6, h in 0u32..5, tau in 0u8..80,
        ) {
            let rect = Rect::new(x1, y1, (x1 + w).min(6), (y1 + h).min(5));
            let r = residual_map(&f, &bg, tau, &MaskRegion { rectangles: vec![rect] }).unwrap();
            for y in 0..5 {
                for x in 0..6 {
                    if rect.contains(x, y) {
                        prop_assert_eq!(r.get(x, y), 0);
                    }
                }
            }
        }

        #[test]
        fn self_residual_has_no_cursor(f in small_frame(), tau in 1u8..=255) {
            let r = residual_map(&f, &f, tau, &MaskRegion::none()).unwrap();
            prop_assert_eq!(locate_cursor(&r), None);
        }
    }
}
