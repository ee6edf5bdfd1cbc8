//! Command-line front end. Each subcommand reads the previous stage's files
//! and writes its own outputs under `--out`; progress goes to stderr.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::caption::{caption_for_chunk, caption_length_ok, word_timeline, CaptionRecord, Transcript};
use crate::chunk::{detect_stable_chunks, filter_chunks, ChunkRecord, MeanLumaAbove, StableChunk};
use crate::cluster::{ground_caption, BBox, GroundedCaption, TraceGeometry};
use crate::config::{FlagOverrides, PipelineConfig};
use crate::cursor::{extract_trace, median_frame, MaskRegion, Rect, StaticMask, TraceRecord};
use crate::error::{Error, Result};
use crate::eval::{draw_visual_prompt, evaluate, Prediction};
use crate::frame::{open_frame_source, Frame, FrameRate, FrameStream, SourceKind};
use crate::instruct::{extract_case_context, generate_records, CaseContext, InstructSource};
use crate::llm::{CompletionClient, HttpClient, StubClient};
use crate::synth::{
    render_fixture, verify_against_truth, FixtureScript, GroundTruth, ManifestEntry, PipelineOutputs,
};
use crate::vqa::{harvest_video, ChunkRef, QuestionAssignment, VqaPair};

pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const MEDIANS_DIR: &str = "medians";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const GROUNDED_FILE: &str = "grounded.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const INSTRUCT_FILE: &str = "instruct.jsonl";
pub const CONTEXTS_FILE: &str = "contexts.jsonl";
pub const GENERATION_REPORT_FILE: &str = "generation_report.json";
pub const VQA_FILE: &str = "vqa.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const VQA_REPORT_FILE: &str = "vqa_report.json";
pub const EVAL_REPORT_FILE: &str = "report.json";
pub const EVAL_CSV_FILE: &str = "report.csv";
pub const ANNOTATED_DIR: &str = "annotated";
pub const VERIFY_FILE: &str = "verify.json";
pub const CONFIG_DUMP_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "narrmine", version, about = "Mine narrated slide-review videos into grounded training data")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set detector.min_duration_s=4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical CPU count).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Only report warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClientKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum JudgeKind {
    None,
    Stub,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Bundled,
    Cursor,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Manifest (.jsonl), frame directory, or YUV4MPEG2 file.
    #[arg(long)]
    input: PathBuf,
    /// Video id when the input is a single frame source.
    #[arg(long)]
    video_id: Option<String>,
    /// Transcript JSON when the input is a single frame source.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic fixture with ground truth.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Built-in fixture to render.
        #[arg(long, value_enum, default_value = "bundled")]
        preset: Preset,
        /// Fixture script JSON; overrides --preset.
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Find static-background chunks and write their median frames.
    DetectChunks {
        #[command(flatten)]
        input: InputArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover cursor traces inside each chunk.
    ExtractTraces {
        #[command(flatten)]
        input: InputArgs,
        /// Chunk records (chunks.jsonl).
        #[arg(long)]
        chunks: PathBuf,
        /// Distractor rectangle `x1,y1,x2,y2` in pixels (repeatable).
        #[arg(long)]
        mask: Vec<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster active traces and ground caption words to regions.
    Cluster {
        #[command(flatten)]
        input: InputArgs,
        /// Chunk records (chunks.jsonl).
        #[arg(long)]
        chunks: PathBuf,
        /// Trace records (traces.jsonl).
        #[arg(long)]
        traces: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut per-chunk captions from the transcript and apply the length filter.
    AlignCaptions {
        #[command(flatten)]
        input: InputArgs,
        /// Chunk records (chunks.jsonl).
        #[arg(long)]
        chunks: PathBuf,
        /// Grounded captions (grounded.jsonl).
        #[arg(long)]
        grounded: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate instruction-tuning records from captions.
    GenInstruct {
        /// Caption records (captions.jsonl).
        #[arg(long)]
        captions: PathBuf,
        /// Manifest used for case-level context of reasoning types.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Language-model backend.
        #[arg(long, value_enum, default_value = "stub")]
        client: ClientKind,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Harvest narrator questions and answers as VQA pairs.
    ExtractVqa {
        #[command(flatten)]
        input: InputArgs,
        /// Chunk records (chunks.jsonl).
        #[arg(long)]
        chunks: PathBuf,
        /// Language-model backend.
        #[arg(long, value_enum, default_value = "stub")]
        client: ClientKind,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score model predictions against gold VQA pairs.
    Evaluate {
        /// Gold VQA pairs (JSONL).
        #[arg(long)]
        gold: PathBuf,
        /// Model responses keyed by question id (JSONL).
        #[arg(long)]
        predictions: PathBuf,
        /// Judge for open-ended answers.
        #[arg(long, value_enum, default_value = "none")]
        judge: JudgeKind,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw red-ellipse visual prompts.
    Annotate {
        /// Single image to annotate (with --bbox).
        #[arg(long, requires = "bbox")]
        image: Option<PathBuf>,
        /// Normalized box `x1,y1,x2,y2`.
        #[arg(long)]
        bbox: Option<String>,
        /// Grounded captions; every cluster box is drawn on its chunk's median frame.
        #[arg(long, requires = "chunks", conflicts_with = "image")]
        grounded: Option<PathBuf>,
        /// Chunk records (chunks.jsonl).
        #[arg(long)]
        chunks: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare stage outputs with a fixture's ground truth.
    Verify {
        /// Fixture ground truth (truth.json).
        #[arg(long)]
        truth: PathBuf,
        /// Chunk records (chunks.jsonl).
        #[arg(long)]
        chunks: Option<PathBuf>,
        /// Trace records (traces.jsonl).
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Grounded captions (grounded.jsonl).
        #[arg(long)]
        grounded: Option<PathBuf>,
        /// Question assignments (questions.jsonl).
        #[arg(long)]
        questions: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `argv` (including the program name), run the subcommand and return
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.global.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let flags = FlagOverrides {
        seed: cli.global.seed,
        jobs: cli.global.jobs,
    };
    let cfg = PipelineConfig::load(cli.global.config.as_deref(), &cli.global.sets, &flags)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_jobs())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| dispatch(cli.command, &cfg))
}

fn dispatch(command: Command, cfg: &PipelineConfig) -> Result<()> {
    match command {
        Command::Synth { out, preset, script } => cmd_synth(&out, preset, script.as_deref()),
        Command::DetectChunks { input, out } => cmd_detect(&input, &out, cfg),
        Command::ExtractTraces {
            input,
            chunks,
            mask,
            out,
        } => cmd_traces(&input, &chunks, &mask, &out, cfg),
        Command::Cluster {
            input,
            chunks,
            traces,
            out,
        } => cmd_cluster(&input, &chunks, &traces, &out, cfg),
        Command::AlignCaptions {
            input,
            chunks,
            grounded,
            out,
        } => cmd_align(&input, &chunks, grounded.as_deref(), &out, cfg),
        Command::GenInstruct {
            captions,
            input,
            client,
            out,
        } => cmd_gen_instruct(&captions, input.as_deref(), client, &out, cfg),
        Command::ExtractVqa {
            input,
            chunks,
            client,
            out,
        } => cmd_vqa(&input, &chunks, client, &out, cfg),
        Command::Evaluate {
            gold,
            predictions,
            judge,
            out,
        } => cmd_evaluate(&gold, &predictions, judge, &out, cfg),
        Command::Annotate {
            image,
            bbox,
            grounded,
            chunks,
            out,
        } => cmd_annotate(image.as_deref(), bbox.as_deref(), grounded.as_deref(), chunks.as_deref(), &out),
        Command::Verify {
            truth,
            chunks,
            traces,
            grounded,
            questions,
            out,
        } => cmd_verify(&truth, chunks, traces, grounded, questions, &out, cfg),
    }
}

// ---- file helpers ----

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn dump_config(out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let path = out.join(CONFIG_DUMP_FILE);
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

// ---- inputs ----

/// One video resolved from `--input`.
#[derive(Debug, Clone)]
struct Video {
    id: String,
    frames: PathBuf,
    transcript: Option<PathBuf>,
    single_wsi: bool,
}

impl Video {
    fn open(&self) -> Result<FrameStream> {
        open_frame_source(&self.frames, SourceKind::infer(&self.frames))
    }

    fn transcript(&self) -> Result<Transcript> {
        let path = self
            .transcript
            .as_ref()
            .ok_or_else(|| Error::Config(format!("no transcript for video {}", self.id)))?;
        read_json(path)
    }
}

fn is_manifest(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn read_manifest(path: &Path) -> Result<Vec<Video>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let entries: Vec<ManifestEntry> = read_jsonl(path)?;
    if entries.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    Ok(entries
        .into_iter()
        .map(|e| Video {
            id: e.video_id,
            frames: base.join(e.frames_dir),
            transcript: Some(base.join(e.transcript_path)),
            single_wsi: e.single_wsi,
        })
        .collect())
}

fn resolve_input(args: &InputArgs) -> Result<Vec<Video>> {
    let path = &args.input;
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut videos = if is_manifest(path) {
        read_manifest(path)?
    } else {
        let id = match &args.video_id {
            Some(id) => id.clone(),
            None => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| Error::Config(format!("cannot derive a video id from {}", path.display())))?,
        };
        vec![Video {
            id,
            frames: path.clone(),
            transcript: None,
            single_wsi: false,
        }]
    };
    if let Some(t) = &args.transcript {
        if videos.len() != 1 {
            return Err(Error::Config("--transcript needs a single-video input".into()));
        }
        videos[0].transcript = Some(t.clone());
    }
    Ok(videos)
}

/// Chunk records grouped by video, each group sorted by start time.
fn chunks_by_video(records: Vec<ChunkRecord>) -> BTreeMap<String, Vec<ChunkRecord>> {
    let mut map: BTreeMap<String, Vec<ChunkRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.video_id.clone()).or_default().push(r);
    }
    for v in map.values_mut() {
        v.sort_by_key(|r| r.start_ms);
    }
    map
}

fn find_video<'a>(videos: &'a [Video], id: &str) -> Result<&'a Video> {
    videos
        .iter()
        .find(|v| v.id == id)
        .ok_or_else(|| Error::Validation(format!("video {id} is not in the input")))
}

/// Read the stream once, handing each chunk its frames as soon as the chunk
/// is complete. Chunks must be sorted and disjoint.
fn for_each_chunk(
    stream: FrameStream,
    chunks: &[StableChunk],
    mut f: impl FnMut(usize, Vec<Frame>) -> Result<()>,
) -> Result<()> {
    let mut current = 0;
    let mut buffer = Vec::new();
    for frame in stream {
        if current >= chunks.len() {
            break;
        }
        let frame = frame?;
        let chunk = &chunks[current];
        if frame.index < chunk.first_frame {
            continue;
        }
        let index = frame.index;
        if chunk.contains_frame(index) {
            buffer.push(frame);
        }
        if index >= chunk.last_frame {
            f(current, std::mem::take(&mut buffer))?;
            current += 1;
            if current < chunks.len() && chunks[current].first_frame <= index {
                return Err(Error::Validation(format!("chunk {} overlaps its predecessor", chunks[current].id())));
            }
        }
    }
    if current < chunks.len() {
        return Err(Error::Validation(format!(
            "stream ended before chunk {} was complete",
            chunks[current].id()
        )));
    }
    Ok(())
}

fn parse_numbers<T: std::str::FromStr>(text: &str, what: &str) -> Result<[T; 4]> {
    let parts: Vec<T> = text
        .split(',')
        .map(|p| p.trim().parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad {what} {text:?}, expected four comma-separated numbers")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("bad {what} {text:?}, expected four comma-separated numbers")))
}

fn make_client(kind: ClientKind, cfg: &PipelineConfig) -> Result<Box<dyn CompletionClient>> {
    Ok(match kind {
        ClientKind::Stub => Box::new(StubClient::new(cfg.rng_seed)),
        ClientKind::Http => Box::new(HttpClient::from_env(cfg.client.clone())?),
    })
}

// ---- subcommands ----

fn cmd_synth(out: &Path, preset: Preset, script: Option<&Path>) -> Result<()> {
    create_out(out)?;
    let script = match script {
        Some(path) => read_json(path)?,
        None => match preset {
            Preset::Bundled => FixtureScript::bundled(),
            Preset::Cursor => FixtureScript::cursor_with_distractors(),
        },
    };
    log::info!("rendering fixture {} into {}", script.video_id, out.display());
    let rendered = render_fixture(&script, out)?;
    log::info!(
        "wrote {} truth chunks, manifest {}",
        rendered.truth.chunks.len(),
        rendered.manifest_path.display()
    );
    Ok(())
}

fn cmd_detect(input: &InputArgs, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let videos = resolve_input(input)?;
    create_out(out)?;
    let medians = out.join(MEDIANS_DIR);
    create_out(&medians)?;
    let per_video: Vec<Vec<ChunkRecord>> = videos
        .par_iter()
        .map(|video| {
            log::info!("detecting chunks in {}", video.id);
            let mut chunks = detect_stable_chunks(video.open()?, &cfg.detector, &video.id)?;
            for_each_chunk(video.open()?, &chunks.clone(), |i, frames| {
                chunks[i].median_frame = Some(median_frame(&frames)?);
                Ok(())
            })?;
            if let Some(bound) = cfg.io.min_mean_luma {
                chunks = filter_chunks(chunks, &MeanLumaAbove(bound))?;
            }
            let mut records = Vec::with_capacity(chunks.len());
            for chunk in &chunks {
                let path = medians.join(format!("{}.png", chunk.id()));
                if let Some(m) = &chunk.median_frame {
                    m.save_png(&path)?;
                }
                records.push(ChunkRecord::from_chunk(chunk, path.to_string_lossy()));
            }
            log::info!("{}: {} chunks", video.id, records.len());
            Ok(records)
        })
        .collect::<Result<_>>()?;
    let records: Vec<ChunkRecord> = per_video.into_iter().flatten().collect();
    write_jsonl(&out.join(CHUNKS_FILE), &records)?;
    dump_config(out, cfg)
}

fn cmd_traces(input: &InputArgs, chunks: &Path, mask: &[String], out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let videos = resolve_input(input)?;
    let mut rects = cfg.io.mask.clone();
    for m in mask {
        let [x1, y1, x2, y2] = parse_numbers::<u32>(m, "mask")?;
        rects.push(Rect::new(x1, y1, x2, y2));
    }
    let masks = StaticMask(MaskRegion { rectangles: rects });
    let grouped = chunks_by_video(read_jsonl(chunks)?);
    create_out(out)?;
    let results: Vec<(Vec<ChunkRecord>, Vec<TraceRecord>)> = grouped
        .par_iter()
        .map(|(video_id, records)| {
            let video = find_video(&videos, video_id)?;
            let stream = video.open()?;
            let rate = stream.frame_rate();
            let mut chunks: Vec<StableChunk> = records.iter().map(|r| r.to_chunk(rate)).collect();
            let mut traces = Vec::with_capacity(chunks.len());
            let targets = chunks.clone();
            for_each_chunk(stream, &targets, |i, frames| {
                traces.push(TraceRecord::from(&extract_trace(&mut chunks[i], &frames, &cfg.trace, &masks)?));
                Ok(())
            })?;
            let updated = records
                .iter()
                .zip(&chunks)
                .map(|(r, c)| ChunkRecord {
                    has_cursor: c.has_cursor,
                    ..r.clone()
                })
                .collect::<Vec<_>>();
            let active = traces.iter().filter(|t| t.active).count();
            log::info!("{video_id}: {active}/{} chunks with an active cursor", traces.len());
            Ok((updated, traces))
        })
        .collect::<Result<_>>()?;
    let (records, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    write_jsonl(&out.join(CHUNKS_FILE), &records.concat())?;
    write_jsonl(&out.join(TRACES_FILE), &traces.concat())?;
    dump_config(out, cfg)
}

fn frame_size(video: &Video) -> Result<(u32, u32, FrameRate)> {
    let mut stream = video.open()?;
    let rate = stream.frame_rate();
    let first = stream.next().ok_or(Error::EmptyInput("frame stream"))??;
    Ok((first.width, first.height, rate))
}

fn cmd_cluster(input: &InputArgs, chunks: &Path, traces: &Path, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let videos = resolve_input(input)?;
    let grouped = chunks_by_video(read_jsonl(chunks)?);
    let traces: HashMap<String, TraceRecord> = read_jsonl::<TraceRecord>(traces)?
        .into_iter()
        .map(|t| (t.chunk_id.clone(), t))
        .collect();
    create_out(out)?;
    let per_video: Vec<Vec<GroundedCaption>> = grouped
        .par_iter()
        .map(|(video_id, records)| {
            let video = find_video(&videos, video_id)?;
            let transcript = video.transcript()?;
            let (width, height, rate) = frame_size(video)?;
            records
                .par_iter()
                .filter_map(|r| traces.get(&r.id()).filter(|t| t.active).map(|t| (r, t)))
                .map(|(r, t)| {
                    let chunk = r.to_chunk(rate);
                    let words = caption_for_chunk(&transcript, &chunk).word_timeline;
                    let geometry = TraceGeometry {
                        width,
                        height,
                        start_ms: r.start_ms,
                        end_ms: r.end_ms,
                    };
                    ground_caption(&t.clone().into(), geometry, &words, &cfg.cluster)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let grounded: Vec<GroundedCaption> = per_video.into_iter().flatten().collect();
    log::info!("grounded {} captions", grounded.len());
    write_jsonl(&out.join(GROUNDED_FILE), &grounded)?;
    dump_config(out, cfg)
}

fn cmd_align(
    input: &InputArgs,
    chunks: &Path,
    grounded: Option<&Path>,
    out: &Path,
    cfg: &PipelineConfig,
) -> Result<()> {
    let videos = resolve_input(input)?;
    let grouped = chunks_by_video(read_jsonl(chunks)?);
    let grounded: HashMap<String, String> = match grounded {
        Some(p) => read_jsonl::<GroundedCaption>(p)?
            .into_iter()
            .map(|g| (g.chunk_id, g.grounded_caption))
            .collect(),
        None => HashMap::new(),
    };
    create_out(out)?;
    let mut captions = Vec::new();
    let mut dropped = 0;
    for (video_id, records) in &grouped {
        let video = find_video(&videos, video_id)?;
        let transcript = video.transcript()?;
        let rate = frame_size(video).map(|(_, _, r)| r)?;
        for r in records {
            let captioned = caption_for_chunk(&transcript, &r.to_chunk(rate));
            let n = captioned.word_count();
            if cfg.io.filter_captions && !caption_length_ok(n) {
                dropped += 1;
                continue;
            }
            captions.push(CaptionRecord {
                chunk_id: r.id(),
                video_id: r.video_id.clone(),
                image: r.median_frame_path.clone(),
                start_ms: r.start_ms,
                end_ms: r.end_ms,
                caption: captioned.caption,
                grounded_caption: grounded.get(&r.id()).cloned(),
                word_count: n,
            });
        }
    }
    log::info!("kept {} captions, dropped {dropped} by length", captions.len());
    write_jsonl(&out.join(CAPTIONS_FILE), &captions)?;
    dump_config(out, cfg)
}

fn cmd_gen_instruct(
    captions: &Path,
    input: Option<&Path>,
    client: ClientKind,
    out: &Path,
    cfg: &PipelineConfig,
) -> Result<()> {
    let captions: Vec<CaptionRecord> = read_jsonl(captions)?;
    let videos = match input {
        Some(p) if is_manifest(p) => read_manifest(p)?,
        Some(p) => return Err(Error::Config(format!("--input for gen-instruct must be a manifest, got {}", p.display()))),
        None => Vec::new(),
    };
    let client = make_client(client, cfg)?;
    let params = cfg.client.params();
    create_out(out)?;

    let mut contexts: Vec<CaseContext> = Vec::new();
    for video in videos.iter().filter(|v| v.single_wsi) {
        let transcript = video.transcript()?;
        let text = transcript
            .segments
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        match extract_case_context(&video.id, &text, true, client.as_ref(), &params) {
            Ok(ctx) => contexts.push(ctx),
            Err(Error::Client(e)) => return Err(Error::Client(e)),
            Err(e) => log::warn!("no case context for {}: {e}", video.id),
        }
    }
    contexts.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let by_video: HashMap<String, CaseContext> =
        contexts.iter().map(|c| (c.video_id.clone(), c.clone())).collect();

    let sources: Vec<InstructSource> = captions.iter().map(InstructSource::from).collect();
    let report = generate_records(
        &sources,
        &by_video,
        client.as_ref(),
        &params,
        &cfg.quotas,
        cfg.rng_seed,
        cfg.client.max_in_flight,
    )?;
    log::info!(
        "generated {} records, {} skipped, {} ineligible for reasoning types",
        report.records.len(),
        report.skipped.len(),
        report.ineligible
    );
    if !sources.is_empty() && report.records.is_empty() {
        if let Some(first) = report.skipped.first() {
            return Err(Error::Client(format!("every generation failed, first: {}", first.reason)));
        }
    }
    write_jsonl(&out.join(INSTRUCT_FILE), &report.records)?;
    write_jsonl(&out.join(CONTEXTS_FILE), &contexts)?;
    write_json(
        &out.join(GENERATION_REPORT_FILE),
        &serde_json::json!({
            "records": report.records.len(),
            "skipped": report.skipped,
            "ineligible": report.ineligible,
        }),
    )?;
    dump_config(out, cfg)
}

fn cmd_vqa(input: &InputArgs, chunks: &Path, client: ClientKind, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let videos = resolve_input(input)?;
    let grouped = chunks_by_video(read_jsonl(chunks)?);
    let client = make_client(client, cfg)?;
    let params = cfg.client.params();
    create_out(out)?;
    let mut assignments: Vec<QuestionAssignment> = Vec::new();
    let mut pairs: Vec<VqaPair> = Vec::new();
    let mut failed: Vec<String> = Vec::new();
    for (video_id, records) in &grouped {
        let video = find_video(&videos, video_id)?;
        let timeline = word_timeline(&video.transcript()?.segments);
        let refs: Vec<ChunkRef> = records
            .iter()
            .map(|r| ChunkRef {
                chunk_id: r.id(),
                image: r.median_frame_path.clone(),
                start_ms: r.start_ms,
                end_ms: r.end_ms,
            })
            .collect();
        let harvest = harvest_video(&timeline, &refs, client.as_ref(), &params);
        log::info!(
            "{video_id}: {} questions mapped, {} pairs",
            harvest.assignments.len(),
            harvest.pairs.len()
        );
        assignments.extend(harvest.assignments);
        pairs.extend(harvest.pairs);
        failed.extend(harvest.failed_chunks);
    }
    write_jsonl(&out.join(VQA_FILE), &pairs)?;
    write_jsonl(&out.join(QUESTIONS_FILE), &assignments)?;
    write_json(
        &out.join(VQA_REPORT_FILE),
        &serde_json::json!({
            "questions": assignments.len(),
            "pairs": pairs.len(),
            "failed_chunks": failed,
        }),
    )?;
    dump_config(out, cfg)
}

fn cmd_evaluate(gold: &Path, predictions: &Path, judge: JudgeKind, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let gold: Vec<VqaPair> = read_jsonl(gold)?;
    let predictions: Vec<Prediction> = read_jsonl(predictions)?;
    let client = match judge {
        JudgeKind::None => None,
        JudgeKind::Stub => Some(make_client(ClientKind::Stub, cfg)?),
        JudgeKind::Http => Some(make_client(ClientKind::Http, cfg)?),
    };
    create_out(out)?;
    let report = evaluate(&gold, &predictions, client.as_deref(), &cfg.client.params())?;
    let path = out.join(EVAL_CSV_FILE);
    fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    write_json(&out.join(EVAL_REPORT_FILE), &report)?;
    log::info!(
        "open recall {:?}, closed accuracy {:?}, relative score {:?}",
        report.open_recall_mean,
        report.closed_accuracy,
        report.relative_score_pct
    );
    Ok(())
}

fn cmd_annotate(
    image: Option<&Path>,
    bbox: Option<&str>,
    grounded: Option<&Path>,
    chunks: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let jobs: Vec<(PathBuf, BBox, PathBuf)> = match (image, bbox, grounded, chunks) {
        (Some(img), Some(b), _, _) => {
            let bbox = parse_numbers::<f64>(b, "bbox")?;
            let name = img
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            vec![(img.to_path_buf(), bbox, out.join(format!("{name}_annotated.png")))]
        }
        (None, _, Some(g), Some(c)) => {
            let medians: HashMap<String, String> = read_jsonl::<ChunkRecord>(c)?
                .into_iter()
                .map(|r| (r.id(), r.median_frame_path))
                .collect();
            let dir = out.join(ANNOTATED_DIR);
            let mut jobs = Vec::new();
            for g in read_jsonl::<GroundedCaption>(g)? {
                let median = medians
                    .get(&g.chunk_id)
                    .ok_or_else(|| Error::Validation(format!("no chunk record for {}", g.chunk_id)))?;
                for (i, cluster) in g.clusters.iter().enumerate() {
                    jobs.push((PathBuf::from(median), cluster.bbox, dir.join(format!("{}_{i}.png", g.chunk_id))));
                }
            }
            jobs
        }
        _ => {
            return Err(Error::Config(
                "annotate needs either --image with --bbox, or --grounded with --chunks".into(),
            ))
        }
    };
    for (_, _, dest) in &jobs {
        if let Some(parent) = dest.parent() {
            create_out(parent)?;
        }
    }
    jobs.par_iter().try_for_each(|(src, bbox, dest)| {
        draw_visual_prompt(&Frame::load_image(src)?, *bbox)?.save_png(dest)
    })?;
    log::info!("wrote {} annotated images", jobs.len());
    Ok(())
}

fn cmd_verify(
    truth: &Path,
    chunks: Option<PathBuf>,
    traces: Option<PathBuf>,
    grounded: Option<PathBuf>,
    questions: Option<PathBuf>,
    out: &Path,
    cfg: &PipelineConfig,
) -> Result<()> {
    let truth: GroundTruth = read_json(truth)?;
    let outputs = PipelineOutputs {
        chunks: chunks.as_deref().map(read_jsonl).transpose()?,
        traces: traces.as_deref().map(read_jsonl).transpose()?,
        grounded: grounded.as_deref().map(read_jsonl).transpose()?,
        questions: questions.as_deref().map(read_jsonl).transpose()?,
    };
    if outputs == PipelineOutputs::default() {
        return Err(Error::Config("verify needs at least one stage output".into()));
    }
    let report = verify_against_truth(&outputs, &truth, &cfg.verify)?;
    create_out(out)?;
    write_json(&out.join(VERIFY_FILE), &report)?;
    for c in &report.checks {
        if c.passed {
            log::info!("PASS {}: {}", c.name, c.detail);
        } else {
            log::warn!("FAIL {}: {}", c.name, c.detail);
        }
    }
    if report.passed() {
        log::info!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(Error::Validation(format!("{failed} of {} checks failed", report.checks.len())))
    }
}
