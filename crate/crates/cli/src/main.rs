//! `tilescope`: ingest slides, serve them, index and search the library,
//! generate synthetic data and replay navigation traces.

mod failure;
mod replay;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tilescope_core::cbir::{self, IndexHandle, SearchConfig};
use tilescope_core::ingest::{self, IngestJob, IngestSource};
use tilescope_core::pyramid::Rect;
use tilescope_core::store::PyramidStore;
use tilescope_core::synth::SyntheticSlide;
use tilescope_core::trace::{pan_trace, NavTrace};
use tilescope_core::{raster, Error, TileCodec};
use tilescope_server::ServerConfig;

use failure::{exit, CliResult, Failure};
use replay::{ReplayOptions, DEFAULT_PARALLELISM};

/// Largest synthetic image `synth image` writes; bigger slides should be
/// generated straight into the store with `ingest --synthetic`, which
/// streams.
const MAX_SYNTH_IMAGE_PIXELS: u64 = 16384 * 16384;

#[derive(Parser)]
#[command(
    name = "tilescope",
    version,
    about = "Whole-slide image tile pyramids: ingest, serve, search, replay"
)]
struct Cli {
    /// Pyramid store root (overrides the config file and TILESCOPE_STORE).
    #[arg(long, global = true, value_name = "DIR")]
    store: Option<PathBuf>,

    /// Server configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a tile pyramid from an image file or a synthetic slide.
    Ingest(IngestArgs),
    /// Run the HTTP service until interrupted.
    Serve(ServeArgs),
    /// Rebuild the similarity index over every slide in the store.
    Index(OutputArgs),
    /// Find the slides most similar to a slide or one of its regions.
    Search(SearchArgs),
    /// Replay a navigation trace against a running server.
    Replay(ReplayArgs),
    /// Generate synthetic test data.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Args)]
struct OutputArgs {
    /// Print machine-readable JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum CodecArg {
    Png,
    Jpg,
}

impl From<CodecArg> for TileCodec {
    fn from(c: CodecArg) -> Self {
        match c {
            CodecArg::Png => TileCodec::Png,
            CodecArg::Jpg => TileCodec::Jpeg,
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Source image (PNG, JPEG or TIFF).
    #[arg(required_unless_present = "synthetic", conflicts_with = "synthetic")]
    source: Option<PathBuf>,
    /// Slide id: 1-64 characters from [a-z0-9_-].
    #[arg(long)]
    id: String,
    /// Generate a procedural slide of WIDTHxHEIGHT instead of reading a file.
    #[arg(long, value_name = "WxH", value_parser = parse_size)]
    synthetic: Option<(u64, u64)>,
    /// Seed for --synthetic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = tilescope_core::pyramid::DEFAULT_TILE_SIZE)]
    tile_size: u32,
    /// Microns per pixel at full resolution.
    #[arg(long)]
    mpp: Option<f64>,
    /// Tile codec; jpg is lossy.
    #[arg(long, value_enum, default_value = "png")]
    codec: CodecArg,
    /// Replace an existing slide with the same id.
    #[arg(long)]
    overwrite: bool,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address (overrides the config file and TILESCOPE_LISTEN).
    #[arg(long, value_name = "ADDR")]
    listen: Option<String>,
}

#[derive(Args)]
struct SearchArgs {
    slide_id: String,
    /// Number of results.
    #[arg(long, default_value_t = cbir::DEFAULT_K)]
    k: usize,
    /// Query region `level,x,y,w,h` instead of the whole slide.
    #[arg(long, value_parser = parse_region)]
    region: Option<Rect>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct ReplayArgs {
    /// Trace file: one `offset_ms level x y w h` record per line.
    trace: PathBuf,
    /// Server base URL.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    url: String,
    /// Slide to replay against (defaults to the trace's `# slide` header).
    #[arg(long)]
    slide: Option<String>,
    /// Concurrent tile requests.
    #[arg(long, default_value_t = DEFAULT_PARALLELISM)]
    parallelism: usize,
    /// Timestamp scale; 0 replays as fast as possible.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Send a prefetch hint with this ring width for every viewport.
    #[arg(long)]
    prefetch_ring: Option<u32>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Write a procedural slide image to a PNG file.
    Image {
        #[arg(long, value_name = "WxH", value_parser = parse_size)]
        size: (u64, u64),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a serpentine pan trace over a stored slide at full resolution,
    /// stepping a quarter viewport at a time.
    Trace {
        /// Slide in the store whose dimensions bound the trace.
        #[arg(long)]
        slide: String,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, value_name = "WxH", value_parser = parse_size, default_value = "1024x1024")]
        viewport: (u64, u64),
        #[arg(long, default_value_t = 50)]
        interval_ms: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<(u64, u64), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("'{s}' is not WIDTHxHEIGHT"))?;
    let num = |v: &str| {
        v.parse::<u64>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| format!("'{v}' is not a positive integer"))
    };
    Ok((num(w)?, num(h)?))
}

fn parse_region(s: &str) -> Result<Rect, String> {
    let parts: Vec<u64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| format!("'{p}' is not a non-negative integer"))
        })
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [level, x, y, w, h] => {
            let level = u32::try_from(level).map_err(|_| "level too large".to_string())?;
            Ok(Rect::new(level, x, y, w, h))
        }
        _ => Err(format!("'{s}' is not level,x,y,w,h")),
    }
}

fn init_logging(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_env("TILESCOPE_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn load_config(cli: &Cli) -> CliResult<ServerConfig> {
    let mut cfg = ServerConfig::load(cli.config.as_deref())?;
    if let Some(store) = &cli.store {
        cfg.store_root = store.clone();
    }
    Ok(cfg)
}

fn open_store(cfg: &ServerConfig) -> CliResult<PyramidStore> {
    Ok(PyramidStore::open(&cfg.store_root, cfg.cache)?)
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn runtime() -> CliResult<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::new("IO_ERROR", format!("cannot start async runtime: {e}")))
}

fn cmd_ingest(cli: &Cli, args: &IngestArgs) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let source = match (&args.source, args.synthetic) {
        (_, Some((width, height))) => IngestSource::Synthetic {
            width,
            height,
            seed: args.seed,
        },
        (Some(path), None) => IngestSource::File(path.clone()),
        (None, None) => return Err(Failure::invalid("give a source image or --synthetic WxH")),
    };
    let mut job = IngestJob::new(source, &args.id);
    job.tile_size = args.tile_size;
    job.mpp = args.mpp;
    job.codec = args.codec.into();
    job.overwrite = args.overwrite;
    std::fs::create_dir_all(&cfg.store_root).map_err(|e| Error::io(&cfg.store_root, e))?;
    let report = ingest::ingest(&cfg.store_root, &job)?;
    if args.out.json {
        print_json(&report);
    } else {
        println!(
            "ingested '{}': {}x{} px, {} levels, {} tiles, {} bytes in {:.2} s",
            report.slide_id,
            report.width_px,
            report.height_px,
            report.levels_written,
            report.tiles_written,
            report.bytes_written,
            report.wall_time.as_secs_f64()
        );
    }
    Ok(())
}

fn cmd_serve(cli: &Cli, args: &ServeArgs) -> CliResult<()> {
    let mut cfg = load_config(cli)?;
    if let Some(listen) = &args.listen {
        cfg.listen = listen.clone();
    }
    runtime()?.block_on(tilescope_server::serve(cfg, |addr| {
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
    }))?;
    Ok(())
}

fn cmd_index(cli: &Cli, out: &OutputArgs) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let store = open_store(&cfg)?;
    let index = cbir::index_library(&store)?;
    let path = store.layout().index_path();
    if out.json {
        print_json(&serde_json::json!({
            "indexed": index.len(),
            "dim": index.dim(),
            "path": path,
        }));
    } else {
        println!(
            "indexed {} slides ({}-dim descriptors) into {}",
            index.len(),
            index.dim(),
            path.display()
        );
    }
    Ok(())
}

fn cmd_search(cli: &Cli, args: &SearchArgs) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let store = open_store(&cfg)?;
    let search = SearchConfig { k: args.k };
    search.validate()?;
    store.open_slide(&args.slide_id)?;
    let index = IndexHandle::new(cfg.index_auto_refresh).fresh(&store)?;
    let result = cbir::search_slide(
        &store,
        &index,
        &args.slide_id,
        args.region,
        &search,
        cfg.region_limit_px,
    )?;
    if args.out.json {
        print_json(&result);
    } else {
        println!("rank  score     slide");
        for (i, hit) in result.hits.iter().enumerate() {
            let tag = if hit.slide_id == args.slide_id { "  (self)" } else { "" };
            println!("{:>4}  {:.6}  {}{tag}", i + 1, hit.score, hit.slide_id);
        }
    }
    Ok(())
}

fn cmd_replay(args: &ReplayArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.trace).map_err(|e| Error::io(&args.trace, e))?;
    let trace = NavTrace::parse(&text).map_err(|e| Failure::from(e).with_prefix(&args.trace))?;
    let opts = ReplayOptions {
        base_url: args.url.clone(),
        slide_id: args.slide.clone(),
        parallelism: args.parallelism,
        speed: args.speed,
        prefetch_ring: args.prefetch_ring,
    };
    let report = runtime()?.block_on(replay::replay(&trace, &opts))?;
    if args.out.json {
        print_json(&report);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, cmd: &SynthCommand) -> CliResult<()> {
    match cmd {
        SynthCommand::Image {
            size: (w, h),
            seed,
            out,
        } => {
            if w * h > MAX_SYNTH_IMAGE_PIXELS {
                return Err(Failure::invalid(format!(
                    "{w}x{h} is too large to write as one image; use `ingest --synthetic {w}x{h}` instead"
                )));
            }
            let slide = SyntheticSlide::new(*w, *h, *seed)?;
            let png = raster::encode(&slide.render(), TileCodec::Png)?;
            write_file(out, &png)?;
            println!("wrote {w}x{h} synthetic slide (seed {seed}) to {}", out.display());
        }
        SynthCommand::Trace {
            slide,
            steps,
            viewport: (vw, vh),
            interval_ms,
            out,
        } => {
            let cfg = load_config(cli)?;
            let store = open_store(&cfg)?;
            let meta = store.open_slide(slide)?.meta.clone();
            let trace = pan_trace(&meta, *vw, *vh, *steps, *interval_ms)?;
            match out {
                Some(path) => write_file(path, trace.to_text().as_bytes())?,
                None => print!("{}", trace.to_text()),
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(cli, a),
        Command::Serve(a) => cmd_serve(cli, a),
        Command::Index(o) => cmd_index(cli, o),
        Command::Search(a) => cmd_search(cli, a),
        Command::Replay(a) => cmd_replay(a),
        Command::Synth(c) => cmd_synth(cli, c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    init_logging(if matches!(cli.command, Command::Serve(_)) {
        "info"
    } else {
        "warn"
    });
    match run(&cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}
