use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use egs_core::codec::{decode_stream, stream_report, EvolvingStream, SequenceEncoder, WarpHint};
use egs_core::config::Config;
use egs_core::io::dataset::{frame_file, Dataset};
use egs_core::io::{read_cameras, read_gaussian_ply, write_gaussian_ply, write_image, LoadOptions, Precision};
use egs_core::model::{CameraView, GaussianFrame};
use egs_core::pipeline::Tracker;
use egs_core::splatter::{render, RenderOptions};
use egs_core::testkit::{gen_scene, write_dataset, MotionKind, SceneSpec};
use egs_core::EgsError;

const EXIT_OTHER: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "egs", version, about = "Track, compress and render evolving Gaussian-splat sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    Gen(GenArgs),
    /// Track a frame range of a dataset, writing one point file per frame.
    Track(TrackArgs),
    /// Compress a directory of NNNN.ply frames into an .egs stream.
    Encode(EncodeArgs),
    /// Expand an .egs stream into NNNN.ply frames.
    Decode(DecodeArgs),
    /// Print per-frame sizes, per-group costs and the compression ratio.
    Stats(StatsArgs),
    /// Render frames from a directory or an .egs stream.
    Render(RenderArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Motion {
    Static,
    Rigid,
    Articulated,
    SlowDeform,
    Appear,
    Vanish,
}

impl From<Motion> for MotionKind {
    fn from(m: Motion) -> Self {
        match m {
            Motion::Static => MotionKind::Static,
            Motion::Rigid => MotionKind::Rigid,
            Motion::Articulated => MotionKind::Articulated,
            Motion::SlowDeform => MotionKind::SlowDeform,
            Motion::Appear => MotionKind::Appear,
            Motion::Vanish => MotionKind::Vanish,
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Motion::Rigid)]
    motion: Motion,
    #[arg(long, default_value_t = 1500)]
    points: usize,
    #[arg(long, default_value_t = 4)]
    cameras: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    sh_degree: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Inclusive frame range written `A..B`, or a single frame `A`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct FrameRange {
    first: u32,
    last: u32,
}

fn parse_range(s: &str) -> std::result::Result<FrameRange, String> {
    let (a, b) = s.split_once("..").unwrap_or((s, s));
    let b = b.strip_prefix('=').unwrap_or(b);
    let first = a.trim().parse::<u32>().map_err(|e| format!("bad first frame '{a}': {e}"))?;
    let last = b.trim().parse::<u32>().map_err(|e| format!("bad last frame '{b}': {e}"))?;
    if last < first {
        return Err(format!("range {first}..{last} is empty"));
    }
    Ok(FrameRange { first, last })
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Inclusive range, e.g. `0..29`.
    #[arg(long, value_parser = parse_range)]
    frames: FrameRange,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Ignore flow files and drop the flow term from the warp.
    #[arg(long)]
    no_flow: bool,
    #[arg(long)]
    no_warp: bool,
    #[arg(long)]
    no_refine: bool,
    /// Caps refinement iterations per frame.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Also write renders/<camera>/NNNN.png for every tracked frame.
    #[arg(long)]
    debug_renders: bool,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    frames_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    stream: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    stream: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// A directory of NNNN.ply frames or an .egs file.
    input: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    /// Render only this camera id.
    #[arg(long)]
    camera: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Track(a) => cmd_track(&a),
        Command::Encode(a) => cmd_encode(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::Render(a) => cmd_render(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<EgsError>()) {
        Some(EgsError::Diverged(_)) => EXIT_NUMERICAL,
        Some(
            EgsError::InvalidInput(_) | EgsError::Format(_) | EgsError::CorruptChunk(_) | EgsError::InvalidParameter(_) | EgsError::Io(_),
        ) => EXIT_INPUT,
        Some(EgsError::Contract(_) | EgsError::CorruptState(_)) => EXIT_OTHER,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => EXIT_INPUT,
        None => EXIT_OTHER,
    }
}

fn input_error(msg: String) -> anyhow::Error {
    EgsError::InvalidInput(msg).into()
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn warp_file(dir: &Path, frame: u32) -> PathBuf {
    dir.join(format!("{frame:04}.warp.json"))
}

fn write_warp(hint: &WarpHint, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(hint)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_warp(path: &Path) -> Result<WarpHint> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| EgsError::Format(format!("{}: {e}", path.display())).into())
}

/// Every `NNNN.ply` in `dir`, sorted by frame index.
fn list_frames(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    if !dir.is_dir() {
        return Err(input_error(format!("frame directory {} does not exist", dir.display())));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let index = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".ply"))
            .filter(|stem| stem.len() >= 4 && stem.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|stem| stem.parse::<u32>().ok());
        if let Some(i) = index {
            out.push((i, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(input_error(format!("no NNNN.ply frames in {}", dir.display())));
    }
    Ok(out)
}

fn read_frame(index: u32, path: &Path) -> Result<GaussianFrame> {
    let mut f = read_gaussian_ply(path)?;
    f.frame_index = index;
    Ok(f)
}

fn render_views(frame: &GaussianFrame, views: &[CameraView], out: &Path) -> Result<()> {
    for v in views {
        let dir = out.join(&v.view_id);
        create_dir(&dir)?;
        let r = render(frame, v, &RenderOptions::default())?;
        write_image(&r.image, &dir.join(format!("{:04}.png", frame.frame_index)))?;
    }
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let spec = SceneSpec {
        points: a.points,
        cameras: a.cameras,
        image_size: a.image_size,
        frames: a.frames,
        motion: a.motion.into(),
        sh_degree: a.sh_degree,
        seed: a.seed,
        ..SceneSpec::default()
    };
    let scene = gen_scene(&spec)?;
    let written = write_dataset(&scene, &a.out)?;
    info!("wrote {} files to {}", written.len(), a.out.display());
    Ok(())
}

fn cmd_track(a: &TrackArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.seed)?;
    if a.no_flow {
        cfg.warp.use_flow = false;
    }
    if a.no_warp {
        cfg.stages.warp = false;
    }
    if a.no_refine {
        cfg.stages.refine = false;
    }
    if let Some(n) = a.max_iters {
        cfg.refine.max_iterations = n;
    }
    cfg.validate()?;

    let ds = Dataset::open(&a.dataset)?;
    let opts = LoadOptions {
        image: true,
        mask: true,
        flow: !a.no_flow && cfg.stages.warp,
    };
    let FrameRange { first, last } = a.frames;
    let missing = ds.missing_inputs(first, last, opts);
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().take(10).map(|p| format!("  {}", p.display())).collect();
        return Err(input_error(format!(
            "{} input file(s) missing for frames {first}..{last}:\n{}{}",
            missing.len(),
            list.join("\n"),
            if missing.len() > 10 { "\n  ..." } else { "" }
        )));
    }
    if let Some(c) = ds.rig.cameras.iter().find(|c| c.image.is_none()) {
        return Err(input_error(format!("camera {} has no image template", c.id)));
    }

    create_dir(&a.out)?;
    let mut log_file = fs::File::create(a.out.join("stats.log")).context("creating stats.log")?;
    let initial = ds.initial_frame(first)?;
    write_gaussian_ply(&initial, &frame_file(&a.out, first), Precision::F64)?;
    let line = format!("frame={first} points={} passthrough=true", initial.len());
    writeln!(log_file, "{line}")?;
    info!("{line}");

    let renders = a.out.join("renders");
    if a.debug_renders {
        render_views(&initial, &ds.rig.views()?, &renders)?;
    }
    let mut tracker = Tracker::new(initial, cfg)?;
    for t in first + 1..=last {
        let views = ds.rig.load_frame(t, opts)?;
        let report = tracker.step(&views)?;
        let frame = tracker.current();
        write_gaussian_ply(frame, &frame_file(&a.out, t), Precision::F64)?;
        write_warp(&report.warp, &warp_file(&a.out, t))?;
        let line = report.to_record();
        writeln!(log_file, "{line}")?;
        info!("{line}");
        if a.debug_renders {
            render_views(frame, &views, &renders)?;
        }
    }
    Ok(())
}

fn cmd_encode(a: &EncodeArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let frames = list_frames(&a.frames_dir)?;
    let mut enc = SequenceEncoder::new(cfg.codec)?;
    for (i, (index, path)) in frames.iter().enumerate() {
        let frame = read_frame(*index, path)?;
        let hint_path = warp_file(&a.frames_dir, *index);
        let hint = if i > 0 && hint_path.exists() { Some(read_warp(&hint_path)?) } else { None };
        enc.push(&frame, hint.as_ref())?;
        if let Some(c) = enc.last_chunk() {
            info!("frame {index}: {} bytes", c.size_bytes());
        }
    }
    let stream = enc.finish();
    stream.write_file(&a.out)?;
    info!("wrote {} ({} bytes)", a.out.display(), stream.total_bytes());
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    let stream = EvolvingStream::read_file(&a.stream)?;
    let decoded = decode_stream(&stream)?;
    create_dir(&a.out)?;
    for d in &decoded {
        let index = d.frame.frame_index;
        write_gaussian_ply(&d.frame, &frame_file(&a.out, index), Precision::F64)?;
        if let Some(w) = &d.warp {
            write_warp(w, &warp_file(&a.out, index))?;
        }
    }
    info!("decoded {} frames into {}", decoded.len(), a.out.display());
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let stream = EvolvingStream::read_file(&a.stream)?;
    let report = stream_report(&stream)?;
    let mut stdout = std::io::stdout().lock();
    let (mut raw, mut coded) = (0usize, 0usize);
    for r in &report {
        raw += r.raw_bytes;
        coded += r.chunk.bytes;
        let groups: Vec<String> = r
            .chunk
            .groups
            .iter()
            .map(|g| format!("{}={}B/{:.3}bps", g.name, g.bytes, g.bits_per_symbol))
            .collect();
        writeln!(
            stdout,
            "frame={} kind={:?} points={} bytes={} raw_bytes={} ratio={:.2} cumulative_ratio={:.2} {}",
            r.chunk.frame_index,
            r.chunk.kind,
            r.points,
            r.chunk.bytes,
            r.raw_bytes,
            r.raw_bytes as f64 / r.chunk.bytes as f64,
            r.cumulative_ratio,
            groups.join(" ")
        )?;
    }
    let total = stream.total_bytes();
    writeln!(
        stdout,
        "total frames={} bytes={} chunk_bytes={} raw_bytes={} ratio={:.2}",
        report.len(),
        total,
        coded,
        raw,
        raw as f64 / total as f64
    )?;
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let rig = read_cameras(&a.cameras)?;
    let mut views = rig.views()?;
    if let Some(id) = &a.camera {
        views.retain(|v| &v.view_id == id);
        if views.is_empty() {
            bail!(input_error(format!("camera {id} not found in {}", a.cameras.display())));
        }
    }
    create_dir(&a.out)?;
    let is_stream = a.input.is_file() && a.input.extension().is_some_and(|e| e == "egs");
    if is_stream {
        let stream = EvolvingStream::read_file(&a.input)?;
        for d in decode_stream(&stream)? {
            render_views(&d.frame, &views, &a.out)?;
        }
    } else {
        for (index, path) in list_frames(&a.input)? {
            render_views(&read_frame(index, &path)?, &views, &a.out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_parse() {
        assert_eq!(parse_range("0..29"), Ok(FrameRange { first: 0, last: 29 }));
        assert_eq!(parse_range("3..=4"), Ok(FrameRange { first: 3, last: 4 }));
        assert_eq!(parse_range("7"), Ok(FrameRange { first: 7, last: 7 }));
        assert!(parse_range("5..2").is_err());
        assert!(parse_range("a..2").is_err());
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let code = |e: EgsError| exit_code(&anyhow::Error::from(e).context("while running"));
        assert_eq!(code(EgsError::Diverged("x".into())), EXIT_NUMERICAL);
        assert_eq!(code(EgsError::InvalidInput("x".into())), EXIT_INPUT);
        assert_eq!(code(EgsError::CorruptChunk("x".into())), EXIT_INPUT);
        assert_eq!(code(EgsError::Contract("x".into())), EXIT_OTHER);
    }
}
