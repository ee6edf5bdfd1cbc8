//! Stable-chunk detection.
//!
//! Consecutive grayscale frames are differenced, the difference map is
//! binarised against a Gaussian-weighted local mean, and a frame counts as
//! static while the mean of the binary map stays below `mean_threshold`.
//! Static runs that last at least `min_duration_s` are then checked with
//! SSIM on randomly placed patches (each frame against the run's first
//! frame) and kept only if every sampled patch stays above
//! `ssim_threshold`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{to_grayscale, BinaryMap, DiffMap, Frame, FrameRate, FrameStream, Plane};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub mean_threshold: f64,
    pub min_duration_s: f64,
    pub gauss_block: u32,
    pub gauss_c: f64,
    pub ssim_threshold: f64,
    pub ssim_patches: u32,
    pub ssim_patch_size: u32,
    pub rng_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            mean_threshold: 10.0,
            min_duration_s: 3.0,
            gauss_block: 11,
            gauss_c: 2.0,
            ssim_threshold: 0.90,
            ssim_patches: 5,
            ssim_patch_size: 64,
            rng_seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_threshold > 0.0) {
            return Err(Error::Config("mean_threshold must be positive".into()));
        }
        if self.gauss_block < 3 || self.gauss_block % 2 == 0 {
            return Err(Error::Config(format!(
                "gauss_block must be odd and >= 3, got {}",
                self.gauss_block
            )));
        }
        if !(self.min_duration_s >= 0.0) {
            return Err(Error::Config("min_duration_s must be non-negative".into()));
        }
        if self.ssim_patch_size == 0 {
            return Err(Error::Config("ssim_patch_size must be positive".into()));
        }
        Ok(())
    }

    fn min_duration_ms(&self) -> u64 {
        (self.min_duration_s * 1000.0).round() as u64
    }
}

/// A static-background segment of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct StableChunk {
    pub video_id: String,
    pub start_ms: u64,
    /// Exclusive: the timestamp at which the frame after the last one starts.
    pub end_ms: u64,
    pub first_frame: u64,
    /// Inclusive.
    pub last_frame: u64,
    pub median_frame: Option<Frame>,
    pub has_cursor: bool,
}

impl StableChunk {
    pub fn id(&self) -> String {
        chunk_id(&self.video_id, self.start_ms)
    }

    pub fn n_frames(&self) -> u64 {
        self.last_frame - self.first_frame + 1
    }

    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }

    pub fn contains_frame(&self, index: u64) -> bool {
        (self.first_frame..=self.last_frame).contains(&index)
    }
}

pub fn chunk_id(video_id: &str, start_ms: u64) -> String {
    format!("{video_id}_{start_ms}")
}

/// Per-pixel |a − b|.
pub fn frame_abs_diff(a: &Plane, b: &Plane) -> Result<DiffMap> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "cannot difference {}x{} against {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x.abs_diff(y))
        .collect();
    Ok(Plane {
        width: a.width,
        height: a.height,
        data,
    })
}

/// Normalised 1-D Gaussian taps, sigma chosen from the block size the same
/// way OpenCV's adaptive threshold does.
fn gaussian_taps(block: u32) -> Vec<f32> {
    let sigma = 0.3 * ((block as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let r = (block / 2) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| (v / sum) as f32).collect()
}

/// Row-at-a-time Gaussian-weighted local mean with edge replication.
struct LocalMean<'a> {
    src: &'a Plane,
    taps: Vec<f32>,
    vert: Vec<f32>,
    padded: Vec<f32>,
    row: Vec<f32>,
}

impl<'a> LocalMean<'a> {
    fn new(src: &'a Plane, block: u32) -> Self {
        let taps = gaussian_taps(block);
        let w = src.width as usize;
        LocalMean {
            src,
            vert: vec![0.0; w],
            padded: vec![0.0; w + taps.len() - 1],
            row: vec![0.0; w],
            taps,
        }
    }

    fn row(&mut self, y: usize) -> &[f32] {
        let (w, h) = (self.src.width as usize, self.src.height as usize);
        let r = self.taps.len() / 2;
        self.vert.fill(0.0);
        for (k, &tap) in self.taps.iter().enumerate() {
            let sy = (y as isize + k as isize - r as isize).clamp(0, h as isize - 1) as usize;
            for (o, &p) in self.vert.iter_mut().zip(&self.src.data[sy * w..(sy + 1) * w]) {
                *o += tap * p as f32;
            }
        }
        for (i, p) in self.padded.iter_mut().enumerate() {
            *p = self.vert[(i as isize - r as isize).clamp(0, w as isize - 1) as usize];
        }
        self.row.fill(0.0);
        for (k, &tap) in self.taps.iter().enumerate() {
            for (o, &p) in self.row.iter_mut().zip(&self.padded[k..k + w]) {
                *o += tap * p;
            }
        }
        &self.row
    }
}

fn above_mean(v: u8, m: f32, c: f32) -> bool {
    v > 0 && v as f32 > m + c
}

/// Binarise a difference map: 255 where the pixel is non-zero and exceeds
/// its Gaussian-weighted neighbourhood mean by more than `gauss_c`.
pub fn adaptive_threshold(d: &DiffMap, cfg: &DetectorConfig) -> BinaryMap {
    let (w, h) = (d.width as usize, d.height as usize);
    let mut out = Plane::filled(d.width, d.height, 0);
    if d.data.iter().all(|&v| v == 0) {
        return out;
    }
    let c = cfg.gauss_c as f32;
    let mut mean = LocalMean::new(d, cfg.gauss_block);
    for y in 0..h {
        let m = mean.row(y);
        for ((o, &v), &m) in out.data[y * w..(y + 1) * w].iter_mut().zip(&d.data[y * w..(y + 1) * w]).zip(m) {
            if above_mean(v, m, c) {
                *o = 255;
            }
        }
    }
    out
}

/// Same answer as `mean_value(&adaptive_threshold(d, cfg)) < bound`, but
/// skips the local mean when too few pixels could qualify and stops as soon
/// as the count of set pixels reaches the bound.
pub fn threshold_mean_below(d: &DiffMap, cfg: &DetectorConfig, bound: f64) -> bool {
    let (w, h) = (d.width as usize, d.height as usize);
    let n = (w * h) as f64;
    let c = cfg.gauss_c as f32;
    let below = |count: usize| (count as f64 * 255.0) / n < bound;
    // m >= 0, so a set pixel needs v > c.
    let candidates = d.data.iter().filter(|&&v| above_mean(v, 0.0, c)).count();
    if below(candidates) {
        return true;
    }
    let mut mean = LocalMean::new(d, cfg.gauss_block);
    let mut count = 0;
    for y in 0..h {
        let m = mean.row(y);
        count += d.data[y * w..(y + 1) * w]
            .iter()
            .zip(m)
            .filter(|(&v, &m)| above_mean(v, m, c))
            .count();
        if !below(count) {
            return false;
        }
    }
    true
}

pub fn mean_value(m: &BinaryMap) -> f64 {
    let sum: u64 = m.data.iter().map(|&v| v as u64).sum();
    sum as f64 / m.data.len() as f64
}

pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Single-window SSIM over two equally sized square patches, population
/// (co)variances.
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    if !a.same_shape(b) || a.width != a.height || a.is_empty() {
        return Err(Error::Shape(format!(
            "ssim needs equal square patches, got {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = a.len() as f64;
    let (mut sa, mut sb) = (0u64, 0u64);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        sa += x as u64;
        sb += y as u64;
    }
    let (mu_a, mu_b) = (sa as f64 / n, sb as f64 / n);
    let (mut var_a, mut var_b, mut cov) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let dx = x as f64 - mu_a;
        let dy = y as f64 - mu_b;
        var_a += dx * dx;
        var_b += dy * dy;
        cov += dx * dy;
    }
    let (var_a, var_b, cov) = (var_a / n, var_b / n, cov / n);
    let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
    let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
    Ok(num / den)
}

struct Run {
    reference: Plane,
    first_frame: u64,
    last_frame: u64,
    ssim_ok: bool,
}

impl Run {
    fn extend(
        &mut self,
        frame: &Plane,
        index: u64,
        cfg: &DetectorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.last_frame = index;
        let size = cfg.ssim_patch_size;
        for _ in 0..cfg.ssim_patches {
            let x = rng.gen_range(0..=frame.width - size);
            let y = rng.gen_range(0..=frame.height - size);
            let value = ssim(&self.reference.patch(x, y, size), &frame.patch(x, y, size))?;
            if !(value > cfg.ssim_threshold) {
                self.ssim_ok = false;
            }
        }
        Ok(())
    }

    fn finish(self, video_id: &str, rate: FrameRate, min_ms: u64) -> Option<StableChunk> {
        let start_ms = rate.timestamp_ms(self.first_frame);
        let end_ms = rate.timestamp_ms(self.last_frame + 1);
        if end_ms - start_ms < min_ms {
            return None;
        }
        if !self.ssim_ok {
            log::debug!("run at {start_ms} ms rejected by ssim");
            return None;
        }
        Some(StableChunk {
            video_id: video_id.to_string(),
            start_ms,
            end_ms,
            first_frame: self.first_frame,
            last_frame: self.last_frame,
            median_frame: None,
            has_cursor: false,
        })
    }
}

/// Find static-background chunks in a frame stream.
///
/// Chunks come back sorted, disjoint, and without median frames; those are
/// filled in by [`crate::cursor::median_frame`] once the chunk's frames are
/// re-read.
pub fn detect_stable_chunks(
    stream: FrameStream,
    cfg: &DetectorConfig,
    video_id: &str,
) -> Result<Vec<StableChunk>> {
    cfg.validate()?;
    let rate = stream.frame_rate();
    let min_ms = cfg.min_duration_ms();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut chunks = Vec::new();
    let mut prev: Option<(Plane, u64)> = None;
    let mut run: Option<Run> = None;

    for frame in stream {
        let frame = frame?;
        let gray = to_grayscale(&frame).plane;
        if prev.is_none() && cfg.ssim_patch_size > gray.width.min(gray.height) {
            return Err(Error::Config(format!(
                "ssim_patch_size {} exceeds frame size {}x{}",
                cfg.ssim_patch_size, gray.width, gray.height
            )));
        }
        if let Some((prev_plane, prev_index)) = prev.take() {
            let diff = frame_abs_diff(&prev_plane, &gray)?;
            let static_frame = threshold_mean_below(&diff, cfg, cfg.mean_threshold);
            if static_frame {
                let current = run.get_or_insert_with(|| Run {
                    reference: prev_plane,
                    first_frame: prev_index,
                    last_frame: prev_index,
                    ssim_ok: true,
                });
                current.extend(&gray, frame.index, cfg, &mut rng)?;
            } else if let Some(done) = run.take() {
                chunks.extend(done.finish(video_id, rate, min_ms));
            }
        }
        prev = Some((gray, frame.index));
    }
    if let Some(done) = run {
        chunks.extend(done.finish(video_id, rate, min_ms));
    }
    if prev.is_none() {
        return Err(Error::EmptyInput("frame stream"));
    }
    Ok(chunks)
}

/// Predicate over a chunk's median frame, e.g. a histology classifier.
pub trait ContentFilter {
    fn keep(&self, median: &Frame) -> std::result::Result<bool, String>;
}

impl<F> ContentFilter for F
where
    F: Fn(&Frame) -> std::result::Result<bool, String>,
{
    fn keep(&self, median: &Frame) -> std::result::Result<bool, String> {
        self(median)
    }
}

/// Keeps chunks whose median frame has mean luma strictly above the bound.
#[derive(Debug, Clone, Copy)]
pub struct MeanLumaAbove(pub f64);

impl ContentFilter for MeanLumaAbove {
    fn keep(&self, median: &Frame) -> std::result::Result<bool, String> {
        let gray = to_grayscale(median).plane;
        Ok(mean_value(&gray) > self.0)
    }
}

pub fn filter_chunks(
    chunks: Vec<StableChunk>,
    keep: &dyn ContentFilter,
) -> Result<Vec<StableChunk>> {
    let mut out = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let Some(median) = chunk.median_frame.as_ref() else {
            return Err(Error::Plugin {
                chunk_id: chunk.id(),
                message: "median frame not computed".into(),
            });
        };
        match keep.keep(median) {
            Ok(true) => out.push(chunk),
            Ok(false) => {}
            Err(message) => {
                return Err(Error::Plugin {
                    chunk_id: chunk.id(),
                    message,
                })
            }
        }
    }
    Ok(out)
}

/// One line of the chunk JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub video_id: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub n_frames: u64,
    pub median_frame_path: String,
    pub has_cursor: bool,
}

impl ChunkRecord {
    pub fn from_chunk(chunk: &StableChunk, median_frame_path: impl Into<String>) -> Self {
        ChunkRecord {
            video_id: chunk.video_id.clone(),
            start_ms: chunk.start_ms,
            end_ms: chunk.end_ms,
            n_frames: chunk.n_frames(),
            median_frame_path: median_frame_path.into(),
            has_cursor: chunk.has_cursor,
        }
    }

    pub fn id(&self) -> String {
        chunk_id(&self.video_id, self.start_ms)
    }

    /// Rebuild the chunk's frame range; the first frame is the first one
    /// whose timestamp reaches `start_ms`.
    pub fn to_chunk(&self, rate: FrameRate) -> StableChunk {
        let first_frame = rate.index_at(self.start_ms);
        StableChunk {
            video_id: self.video_id.clone(),
            start_ms: self.start_ms,
            end_ms: self.end_ms,
            first_frame,
            last_frame: first_frame + self.n_frames.max(1) - 1,
            median_frame: None,
            has_cursor: self.has_cursor,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_small() -> DetectorConfig {
        DetectorConfig {
            ssim_patch_size: 8,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn abs_diff_cases() {
        let a = Plane::filled(4, 4, 100);
        assert!(frame_abs_diff(&a, &a).unwrap().data.iter().all(|&v| v == 0));
        let b = Plane::filled(4, 4, 90);
        assert!(frame_abs_diff(&a, &b).unwrap().data.iter().all(|&v| v == 10));
        let mut c = Plane::filled(4, 4, 0);
        c.set(2, 1, 255);
        let d = frame_abs_diff(&Plane::filled(4, 4, 0), &c).unwrap();
        assert_eq!(d.data.iter().filter(|&&v| v == 255).count(), 1);
        assert_eq!(d.get(2, 1), 255);
        assert!(matches!(
            frame_abs_diff(&a, &Plane::filled(3, 4, 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn threshold_zero_map_stays_zero() {
        let out = adaptive_threshold(&Plane::filled(16, 16, 0), &DetectorConfig::default());
        assert_eq!(mean_value(&out), 0.0);
    }

    #[test]
    fn threshold_uniform_map_stays_zero() {
        for v in [1u8, 7, 128, 255] {
            let out = adaptive_threshold(&Plane::filled(16, 16, v), &DetectorConfig::default());
            assert!(out.data.iter().all(|&p| p == 0), "v = {v}");
        }
    }

    #[test]
    fn threshold_isolated_spike() {
        let mut d = Plane::filled(21, 21, 0);
        d.set(10, 10, 200);
        let out = adaptive_threshold(&d, &DetectorConfig::default());
        assert_eq!(out.get(10, 10), 255);
        assert_eq!(out.data.iter().filter(|&&v| v == 255).count(), 1);
    }

    #[test]
    fn gaussian_taps_sum_to_one() {
        let taps = gaussian_taps(11);
        assert_eq!(taps.len(), 11);
        let sum: f32 = taps.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(taps[5] > taps[4] && taps[0] == taps[10]);
    }

    #[test]
    fn mean_value_cases() {
        assert_eq!(mean_value(&Plane::filled(10, 10, 0)), 0.0);
        let mut half = Plane::filled(10, 10, 0);
        half.data[..50].fill(255);
        assert_eq!(mean_value(&half), 127.5);
        let mut one = Plane::filled(10, 10, 0);
        one.data[3] = 255;
        assert!((mean_value(&one) - 2.55).abs() < 1e-12);
    }

    #[test]
    fn ssim_closed_forms() {
        let a = Plane::new(2, 2, vec![10, 200, 33, 90]).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let zero = Plane::filled(8, 8, 0);
        let full = Plane::filled(8, 8, 255);
        let expected = SSIM_C1 / (255.0 * 255.0 + SSIM_C1);
        assert!((ssim(&zero, &full).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.0003e-4).abs() < 1e-7);
        let mid = Plane::filled(8, 8, 77);
        assert_eq!(ssim(&mid, &mid).unwrap(), 1.0);
        assert!(matches!(
            ssim(&zero, &Plane::filled(4, 4, 0)),
            Err(Error::Shape(_))
        ));
    }

    fn textured(w: u32, h: u32, phase: u32) -> Frame {
        let data = (0..w * h)
            .map(|i| ((i * 37 + phase * 101) % 97 + 80) as u8)
            .collect();
        Frame::new(w, h, 1, data).unwrap()
    }

    fn noise(w: u32, h: u32, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(w, h, 1, (0..w * h).map(|_| rng.gen()).collect()).unwrap()
    }

    fn stream_of(frames: Vec<Frame>) -> FrameStream {
        FrameStream::from_frames(FrameRate::new(10, 1).unwrap(), frames)
    }

    #[test]
    fn fully_static_clip_is_one_chunk() {
        let frames = vec![textured(32, 24, 0); 50];
        let chunks = detect_stable_chunks(stream_of(frames), &cfg_small(), "v").unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!((chunks[0].start_ms, chunks[0].end_ms), (0, 5000));
        assert_eq!(chunks[0].n_frames(), 50);
    }

    #[test]
    fn scripted_static_motion_static() {
        // 4 s static, 1 s motion, 4 s static at 10 fps
        let mut frames = vec![textured(32, 24, 0); 40];
        frames.extend((0..10).map(|i| noise(32, 24, i)));
        frames.extend(vec![textured(32, 24, 5); 40]);
        let chunks = detect_stable_chunks(stream_of(frames), &cfg_small(), "v").unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!((chunks[0].first_frame, chunks[0].last_frame), (0, 39));
        assert_eq!((chunks[1].first_frame, chunks[1].last_frame), (50, 89));
        assert!(chunks[0].end_ms <= chunks[1].start_ms);
    }

    #[test]
    fn short_static_segment_is_dropped() {
        let mut frames: Vec<Frame> = (0..10).map(|i| noise(32, 24, i)).collect();
        frames.extend(vec![textured(32, 24, 1); 20]);
        frames.extend((10..20).map(|i| noise(32, 24, i)));
        let chunks = detect_stable_chunks(stream_of(frames), &cfg_small(), "v").unwrap();
        assert!(chunks.is_empty());
    }

    #[test]
    fn slow_drift_is_rejected_by_ssim() {
        // Each step changes a few pixels only (static by differencing), but
        // the frame drifts far from where the run started.
        let base = textured(16, 16, 0);
        let mut frames = Vec::new();
        let mut cur = base.clone();
        for i in 0..40u32 {
            let p = ((i * 7) % 256) as usize;
            cur.data[p] = 255 - cur.data[p];
            frames.push(cur.clone());
        }
        let cfg = DetectorConfig {
            ssim_patch_size: 16,
            ssim_threshold: 0.9,
            ..DetectorConfig::default()
        };
        let chunks = detect_stable_chunks(stream_of(frames.clone()), &cfg, "v").unwrap();
        assert!(chunks.is_empty());
        let lax = DetectorConfig {
            ssim_threshold: -1.0,
            ..cfg
        };
        assert_eq!(detect_stable_chunks(stream_of(frames), &lax, "v").unwrap().len(), 1);
    }

    #[test]
    fn oversized_patch_is_config_error() {
        let frames = vec![textured(16, 16, 0); 5];
        let err = detect_stable_chunks(stream_of(frames), &DetectorConfig::default(), "v");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn invalid_block_rejected() {
        let cfg = DetectorConfig {
            gauss_block: 10,
            ..DetectorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn chunk_with_median(start: u64, luma: u8) -> StableChunk {
        StableChunk {
            video_id: "v".into(),
            start_ms: start,
            end_ms: start + 3000,
            first_frame: 0,
            last_frame: 0,
            median_frame: Some(Frame::filled(4, 4, &[luma, luma, luma])),
            has_cursor: false,
        }
    }

    #[test]
    fn filter_predicates() {
        let chunks = vec![
            chunk_with_median(0, 200),
            chunk_with_median(5000, 40),
            chunk_with_median(9000, 129),
        ];
        let all = filter_chunks(chunks.clone(), &|_: &Frame| Ok(true)).unwrap();
        assert_eq!(all, chunks);
        assert!(filter_chunks(chunks.clone(), &|_: &Frame| Ok(false))
            .unwrap()
            .is_empty());
        let bright = filter_chunks(chunks.clone(), &MeanLumaAbove(128.0)).unwrap();
        let starts: Vec<u64> = bright.iter().map(|c| c.start_ms).collect();
        assert_eq!(starts, vec![0, 9000]);
        let err = filter_chunks(chunks, &|_: &Frame| Err("classifier down".to_string()));
        match err {
            Err(Error::Plugin { chunk_id, .. }) => assert_eq!(chunk_id, "v_0"),
            other => panic!("{other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn early_exit_matches_full_threshold(
            data in proptest::collection::vec(
                proptest::prop_oneof![3 => proptest::strategy::Just(0u8), 1 => 0u8..=255],
                24 * 18,
            ),
            bound in 0.5f64..128.0,
        ) {
            let d = Plane::new(24, 18, data).unwrap();
            let cfg = DetectorConfig::default();
            let full = mean_value(&adaptive_threshold(&d, &cfg)) < bound;
            proptest::prop_assert_eq!(threshold_mean_below(&d, &cfg, bound), full);
        }

        #[test]
        fn ssim_symmetric_and_reflexive(
            a in proptest::collection::vec(0u8..=255, 64),
            b in proptest::collection::vec(0u8..=255, 64),
        ) {
            let pa = Plane::new(8, 8, a).unwrap();
            let pb = Plane::new(8, 8, b).unwrap();
            let ab = ssim(&pa, &pb).unwrap();
            let ba = ssim(&pb, &pa).unwrap();
            proptest::prop_assert!((ab - ba).abs() < 1e-12);
            proptest::prop_assert!((ssim(&pa, &pa).unwrap() - 1.0).abs() < 1e-9);
            proptest::prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn abs_diff_symmetric_triangle(
            a in proptest::collection::vec(0u8..=255, 16),
            b in proptest::collection::vec(0u8..=255, 16),
            c in proptest::collection::vec(0u8..=255, 16),
        ) {
            let (pa, pb, pc) = (
                Plane::new(4, 4, a).unwrap(),
                Plane::new(4, 4, b).unwrap(),
                Plane::new(4, 4, c).unwrap(),
            );
            let ab = frame_abs_diff(&pa, &pb).unwrap();
            proptest::prop_assert_eq!(&ab, &frame_abs_diff(&pb, &pa).unwrap());
            let bc = frame_abs_diff(&pb, &pc).unwrap();
            let ac = frame_abs_diff(&pa, &pc).unwrap();
            for i in 0..16 {
                proptest::prop_assert!(ac.data[i] as u16 <= ab.data[i] as u16 + bc.data[i] as u16);
            }
        }

        #[test]
        fn detection_is_deterministic_and_well_formed(seed in 0u64..1000, cut in 5usize..30) {
            let mut frames = vec![textured(16, 16, 0); cut];
            frames.extend((0..3).map(|i| noise(16, 16, seed + i)));
            frames.extend(vec![textured(16, 16, 2); 40 - cut]);
            let cfg = DetectorConfig { ssim_patch_size: 8, rng_seed: seed, min_duration_s: 0.5, ..DetectorConfig::default() };
            let a = detect_stable_chunks(stream_of(frames.clone()), &cfg, "v").unwrap();
            let b = detect_stable_chunks(stream_of(frames), &cfg, "v").unwrap();
            proptest::prop_assert_eq!(&a, &b);
            for w in a.windows(2) {
                proptest::prop_assert!(w[0].end_ms <= w[1].start_ms);
            }
            for c in &a {
                proptest::prop_assert!(c.duration_ms() >= 500);
            }
        }
    }
}
