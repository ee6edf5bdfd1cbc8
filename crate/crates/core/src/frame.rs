//! Frame ingestion.
//!
//! Video decoding happens out of process: the toolkit reads either a
//! directory of pre-decoded images (`frame_%08d.png` / `.ppm` plus a
//! `meta.json` sidecar) or an uncompressed YUV4MPEG2 stream. Any external
//! decoder can produce those, e.g.
//!
//! ```text
//! ffmpeg -i talk.mp4 -vf fps=30 frames/frame_%08d.png
//! echo '{"fps": 30, "width": 1280, "height": 720}' > frames/meta.json
//! ```
//!
//! All downstream kernels work on [`Plane`]s (single 8-bit channel).

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoded raster with its position in the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    /// 1 (gray) or 3 (interleaved RGB).
    pub channels: u8,
    pub data: Vec<u8>,
    pub timestamp_ms: u64,
    pub index: u64,
}

impl Frame {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!("unsupported channel count {channels}")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "frame data has {} bytes, expected {expected} for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            channels,
            data,
            timestamp_ms: 0,
            index: 0,
        })
    }

    pub fn filled(width: u32, height: u32, pixel: &[u8]) -> Self {
        let channels = pixel.len() as u8;
        assert!(channels == 1 || channels == 3);
        let data = pixel
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * channels as usize)
            .collect();
        Frame {
            width,
            height,
            channels,
            data,
            timestamp_ms: 0,
            index: 0,
        }
    }

    pub fn with_position(mut self, index: u64, timestamp_ms: u64) -> Self {
        self.index = index;
        self.timestamp_ms = timestamp_ms;
        self
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let at = (y as usize * self.width as usize + x as usize) * c;
        &self.data[at..at + c]
    }

    pub fn to_rgb(&self) -> Frame {
        if self.channels == 3 {
            return self.clone();
        }
        Frame {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            timestamp_ms: self.timestamp_ms,
            index: self.index,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        image::save_buffer(path, &self.data, self.width, self.height, color)?;
        Ok(())
    }

    pub fn load_image(path: &Path) -> Result<Frame> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?;
        let (width, height) = (img.width(), img.height());
        let frame = if img.color().has_color() {
            Frame::new(width, height, 3, img.into_rgb8().into_raw())?
        } else {
            Frame::new(width, height, 1, img.into_luma8().into_raw())?
        };
        Ok(frame)
    }
}

/// Single 8-bit channel raster: grayscale frames, difference maps,
/// thresholded maps and cursor residuals all share this layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

pub type DiffMap = Plane;
pub type BinaryMap = Plane;
pub type ResidualMap = Plane;

impl Plane {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "plane data has {} bytes, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.data[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn same_shape(&self, other: &Plane) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Square `size`×`size` crop with top-left corner at (`x`, `y`).
    pub fn patch(&self, x: u32, y: u32, size: u32) -> Plane {
        assert!(x + size <= self.width && y + size <= self.height);
        let mut data = Vec::with_capacity(size as usize * size as usize);
        for row in y..y + size {
            let start = row as usize * self.width as usize + x as usize;
            data.extend_from_slice(&self.data[start..start + size as usize]);
        }
        Plane {
            width: size,
            height: size,
            data,
        }
    }
}

/// Grayscale view of a frame, keeping its stream position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    pub plane: Plane,
    pub timestamp_ms: u64,
    pub index: u64,
}

/// Rec.601 luma, rounded half-up. 1-channel frames pass through unchanged.
pub fn to_grayscale(f: &Frame) -> GrayFrame {
    let data = if f.channels == 1 {
        f.data.clone()
    } else {
        f.data
            .chunks_exact(3)
            .map(|p| {
                let y = 299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32;
                ((y + 500) / 1000) as u8
            })
            .collect()
    };
    GrayFrame {
        plane: Plane {
            width: f.width,
            height: f.height,
            data,
        },
        timestamp_ms: f.timestamp_ms,
        index: f.index,
    }
}

/// Exact rational frame rate so timestamps never drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRate {
    pub num: u64,
    pub den: u64,
}

impl FrameRate {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("invalid frame rate {num}/{den}")));
        }
        Ok(FrameRate { num, den })
    }

    pub fn from_fps(fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Config(format!("invalid fps {fps}")));
        }
        if fps.fract() == 0.0 {
            FrameRate::new(fps as u64, 1)
        } else {
            FrameRate::new((fps * 1000.0).round() as u64, 1000)
        }
    }

    pub fn fps(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// floor(index × 1000 / fps)
    pub fn timestamp_ms(&self, index: u64) -> u64 {
        ((index as u128 * 1000 * self.den as u128) / self.num as u128) as u64
    }

    /// Smallest frame index whose timestamp is at or after `ts_ms`.
    pub fn index_at(&self, ts_ms: u64) -> u64 {
        let scaled = ts_ms as u128 * self.num as u128;
        let per = 1000 * self.den as u128;
        scaled.div_ceil(per) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    ImageDirectory,
    RawStream,
}

impl SourceKind {
    /// Directories are image sequences; anything else is treated as a raw stream.
    pub fn infer(path: &Path) -> SourceKind {
        if path.is_dir() {
            SourceKind::ImageDirectory
        } else {
            SourceKind::RawStream
        }
    }
}

/// Sidecar record for image-directory sources.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrameMeta {
    pub fps: f64,
    pub width: u32,
    pub height: u32,
}

pub const META_FILE: &str = "meta.json";

pub fn frame_file_name(index: u64) -> String {
    format!("frame_{index:08}.png")
}

/// Sequential single-consumer frame iterator.
pub struct FrameStream {
    descriptor: String,
    frame_rate: FrameRate,
    position: u64,
    shape: Option<(u32, u32, u8)>,
    source: Box<dyn FrameSource>,
}

/// Anything that can produce raw frames in order. Positions and timestamps
/// are assigned by the [`FrameStream`].
pub trait FrameSource: Send {
    fn next_frame(&mut self) -> Option<Result<Frame>>;
}

impl<I> FrameSource for I
where
    I: Iterator<Item = Result<Frame>> + Send,
{
    fn next_frame(&mut self) -> Option<Result<Frame>> {
        self.next()
    }
}

impl std::fmt::Debug for FrameStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameStream")
            .field("descriptor", &self.descriptor)
            .field("frame_rate", &self.frame_rate)
            .field("position", &self.position)
            .finish()
    }
}

impl FrameStream {
    pub fn from_source(
        descriptor: impl Into<String>,
        frame_rate: FrameRate,
        source: impl FrameSource + 'static,
    ) -> Self {
        FrameStream {
            descriptor: descriptor.into(),
            frame_rate,
            position: 0,
            shape: None,
            source: Box::new(source),
        }
    }

    pub fn from_frames(frame_rate: FrameRate, frames: Vec<Frame>) -> Self {
        FrameStream::from_source("memory", frame_rate, frames.into_iter().map(Ok))
    }

    pub fn frame_rate(&self) -> FrameRate {
        self.frame_rate
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    /// Index of the next frame to be yielded.
    pub fn position(&self) -> u64 {
        self.position
    }
}

impl Iterator for FrameStream {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Result<Frame>> {
        let frame = match self.source.next_frame()? {
            Ok(f) => f,
            Err(e) => return Some(Err(e)),
        };
        let shape = (frame.width, frame.height, frame.channels);
        match self.shape {
            None => self.shape = Some(shape),
            Some(s) if s != shape => {
                return Some(Err(Error::Format(format!(
                    "frame {} is {}x{}x{}, stream started as {}x{}x{}",
                    self.position, shape.0, shape.1, shape.2, s.0, s.1, s.2
                ))))
            }
            Some(_) => {}
        }
        let index = self.position;
        self.position += 1;
        Some(Ok(frame.with_position(index, self.frame_rate.timestamp_ms(index))))
    }
}

pub fn open_frame_source(path: &Path, kind: SourceKind) -> Result<FrameStream> {
    match kind {
        SourceKind::ImageDirectory => open_image_directory(path),
        SourceKind::RawStream => open_y4m(path),
    }
}

pub fn read_frame_meta(dir: &Path) -> Result<FrameMeta> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!("missing {}", meta_path.display()))
        } else {
            Error::io(&meta_path, e)
        }
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad {}: {e}", meta_path.display())))
}

pub fn write_frame_meta(dir: &Path, meta: &FrameMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(META_FILE);
    fs::write(&path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&path, e))
}

/// Sorted `frame_%08d.{png,ppm}` files in a directory.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name
            .strip_suffix(".png")
            .or_else(|| name.strip_suffix(".ppm"))
        else {
            continue;
        };
        let digits = stem.strip_prefix("frame_").unwrap_or(stem);
        if digits.len() == 8 && digits.bytes().all(|b| b.is_ascii_digit()) {
            files.push((digits.parse().expect("8 ascii digits"), path));
        }
    }
    files.sort();
    for (expected, (found, path)) in files.iter().enumerate() {
        if *found != expected as u64 {
            return Err(Error::Format(format!(
                "frame sequence gap: expected index {expected}, found {}",
                path.display()
            )));
        }
    }
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

fn open_image_directory(dir: &Path) -> Result<FrameStream> {
    let meta = read_frame_meta(dir)?;
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::Format(format!("no frames in {}", dir.display())));
    }
    let frame_rate = FrameRate::from_fps(meta.fps)?;
    let source = ImageDirSource {
        files: files.into_iter(),
        meta,
    };
    Ok(FrameStream::from_source(
        dir.display().to_string(),
        frame_rate,
        source,
    ))
}

struct ImageDirSource {
    files: std::vec::IntoIter<PathBuf>,
    meta: FrameMeta,
}

impl FrameSource for ImageDirSource {
    fn next_frame(&mut self) -> Option<Result<Frame>> {
        let path = self.files.next()?;
        Some(Frame::load_image(&path).and_then(|f| {
            if f.width != self.meta.width || f.height != self.meta.height {
                Err(Error::Format(format!(
                    "{} is {}x{}, metadata says {}x{}",
                    path.display(),
                    f.width,
                    f.height,
                    self.meta.width,
                    self.meta.height
                )))
            } else {
                Ok(f)
            }
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Y4mColor {
    C420,
    C444,
    Mono,
    Rgb24,
}

#[derive(Debug, Clone, Copy)]
struct Y4mHeader {
    width: u32,
    height: u32,
    rate: FrameRate,
    color: Y4mColor,
}

impl Y4mHeader {
    fn parse(line: &str) -> Result<Self> {
        let mut tokens = line.split_ascii_whitespace();
        if tokens.next() != Some("YUV4MPEG2") {
            return Err(Error::Format("missing YUV4MPEG2 signature".into()));
        }
        let (mut width, mut height, mut rate) = (None, None, None);
        let mut color = Y4mColor::C420;
        for tok in tokens {
            let (tag, value) = tok.split_at(1);
            match tag {
                "W" => width = value.parse().ok(),
                "H" => height = value.parse().ok(),
                "F" => {
                    let (n, d) = value
                        .split_once(':')
                        .ok_or_else(|| Error::Format(format!("bad frame rate {value}")))?;
                    let parse = |s: &str| {
                        s.parse::<u64>()
                            .map_err(|_| Error::Format(format!("bad frame rate {value}")))
                    };
                    rate = Some(FrameRate::new(parse(n)?, parse(d)?)?);
                }
                "C" => {
                    color = match value {
                        v if v.starts_with("420") => Y4mColor::C420,
                        "444" => Y4mColor::C444,
                        "mono" => Y4mColor::Mono,
                        "RGB24" => Y4mColor::Rgb24,
                        other => {
                            return Err(Error::Format(format!("unsupported colorspace C{other}")))
                        }
                    }
                }
                _ => {}
            }
        }
        let rate = rate.ok_or_else(|| Error::Config("y4m header lacks frame rate".into()))?;
        match (width, height) {
            (Some(w), Some(h)) if w > 0 && h > 0 => Ok(Y4mHeader {
                width: w,
                height: h,
                rate,
                color,
            }),
            _ => Err(Error::Format("y4m header lacks dimensions".into())),
        }
    }

    fn frame_bytes(&self) -> usize {
        let luma = self.width as usize * self.height as usize;
        match self.color {
            Y4mColor::C420 => {
                luma + 2 * (self.width as usize).div_ceil(2) * (self.height as usize).div_ceil(2)
            }
            Y4mColor::C444 | Y4mColor::Rgb24 => 3 * luma,
            Y4mColor::Mono => luma,
        }
    }
}

fn open_y4m(path: &Path) -> Result<FrameStream> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    let header = Y4mHeader::parse(line.trim_end())?;
    let source = Y4mSource {
        reader: Box::new(reader),
        header,
        path: path.to_path_buf(),
        done: false,
    };
    Ok(FrameStream::from_source(
        path.display().to_string(),
        header.rate,
        source,
    ))
}

struct Y4mSource {
    reader: Box<dyn BufRead + Send>,
    header: Y4mHeader,
    path: PathBuf,
    done: bool,
}

impl Y4mSource {
    fn read_one(&mut self) -> Result<Option<Frame>> {
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .map_err(|e| Error::io(&self.path, e))?;
        if n == 0 {
            return Ok(None);
        }
        if !line.starts_with("FRAME") {
            return Err(Error::Format(format!("expected FRAME marker, got {line:?}")));
        }
        let mut buf = vec![0u8; self.header.frame_bytes()];
        self.reader.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format("truncated y4m frame".into())
            } else {
                Error::io(&self.path, e)
            }
        })?;
        let Y4mHeader { width, height, .. } = self.header;
        let frame = match self.header.color {
            Y4mColor::Mono => Frame::new(width, height, 1, buf)?,
            Y4mColor::Rgb24 => Frame::new(width, height, 3, buf)?,
            Y4mColor::C444 => {
                let n = width as usize * height as usize;
                let (y, rest) = buf.split_at(n);
                let (u, v) = rest.split_at(n);
                Frame::new(width, height, 3, yuv_to_rgb(y, u, v, width, height, 1))?
            }
            Y4mColor::C420 => {
                let n = width as usize * height as usize;
                let cw = (width as usize).div_ceil(2);
                let ch = (height as usize).div_ceil(2);
                let (y, rest) = buf.split_at(n);
                let (u, v) = rest.split_at(cw * ch);
                Frame::new(width, height, 3, yuv_to_rgb(y, u, v, width, height, 2))?
            }
        };
        Ok(Some(frame))
    }
}

impl FrameSource for Y4mSource {
    fn next_frame(&mut self) -> Option<Result<Frame>> {
        if self.done {
            return None;
        }
        match self.read_one() {
            Ok(Some(f)) => Some(Ok(f)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Full-range BT.601 YCbCr to RGB with nearest-neighbour chroma upsampling.
fn yuv_to_rgb(y: &[u8], u: &[u8], v: &[u8], width: u32, height: u32, sub: usize) -> Vec<u8> {
    let (w, h) = (width as usize, height as usize);
    let cw = w.div_ceil(sub);
    let mut out = Vec::with_capacity(w * h * 3);
    for row in 0..h {
        for col in 0..w {
            let luma = y[row * w + col] as f32;
            let ci = (row / sub) * cw + col / sub;
            let cb = u[ci] as f32 - 128.0;
            let cr = v[ci] as f32 - 128.0;
            let px = [
                luma + 1.402 * cr,
                luma - 0.344_136 * cb - 0.714_136 * cr,
                luma + 1.772 * cb,
            ];
            out.extend(px.map(|c| c.round().clamp(0.0, 255.0) as u8));
        }
    }
    out
}

/// Write frames as a raw `RGB24` YUV4MPEG2 stream.
pub fn write_rgb24_stream(path: &Path, rate: FrameRate, frames: &[Frame]) -> Result<()> {
    use std::io::Write;
    let first = frames.first().ok_or(Error::EmptyInput("frames"))?;
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(
        format!(
            "YUV4MPEG2 W{} H{} F{}:{} Ip A1:1 CRGB24\n",
            first.width, first.height, rate.num, rate.den
        )
        .as_bytes(),
    )?;
    for f in frames {
        write(b"FRAME\n")?;
        write(&f.to_rgb().data)?;
    }
    Ok(())
}
