//! The `promptlab` command line.
//!
//! Every failure prints exactly one line to stderr of the form
//! `promptlab: error[<kind>]: <message>`, where kind is `usage` (exit 2) or
//! `runtime` (exit 1).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bitstream::Stream;
use crate::eval::{self, FrameFormat, MetricReport};
use crate::inversion::{FitConfig, Precision};
use crate::netsim::{self, LinkConfig, DEFAULT_MTU};
use crate::receiver::{self, decode_session};
use crate::sender::{self, encode_ladder, stream_session, SenderConfig};
use crate::toygen::{GeneratorConfig, ImageFrame};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const THREADS_ENV: &str = "PROMPTLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "promptlab", version, about = "Prompt-inversion video coding on a toy generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a frame directory into one `.prms` stream per rank.
    Invert(InvertArgs),
    /// Decode a `.prms` stream into a frame directory.
    Generate(GenerateArgs),
    /// Stream a ladder over an emulated link and decode what arrives.
    Stream(StreamArgs),
    /// Per-frame metrics of a decoded directory against a reference.
    Eval(EvalArgs),
    /// Rate–quality sweep over ranks and keyframe intervals.
    Sweep(SweepArgs),
    /// Prompt-space vs latent-space interpolation on the same keyframes.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GeneratorKind {
    /// 4× upsampling, 16 basis maps.
    Default,
    /// 2× upsampling, one basis map per latent position.
    Compact,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Ppm,
    Raw,
}

impl From<FormatArg> for FrameFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Ppm => FrameFormat::Ppm,
            FormatArg::Raw => FrameFormat::RawF32,
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Seeds the generator weights, the fixed noise and factor initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    iters_first: usize,
    #[arg(long, default_value_t = 300)]
    iters_sub: usize,
    /// Factor precision during fitting: 8 or 32.
    #[arg(long, default_value_t = 8)]
    bits: u32,
    #[arg(long, value_enum, default_value_t = GeneratorKind::Default)]
    generator: GeneratorKind,
    /// Keyframe interval used when `--intervals` is not a sweep axis.
    #[arg(long, default_value_t = 4)]
    interval: usize,
    #[arg(long, default_value_t = 0.1)]
    scene_threshold: f32,
    #[arg(long, default_value_t = 30)]
    fps: u8,
}

#[derive(Debug, Args)]
struct InvertArgs {
    /// Directory of `.ppm` or `.f32` frames.
    #[arg(long)]
    input: PathBuf,
    /// Receives `rank_<r>.prms` and `recon_rank_<r>/`.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    ranks: Vec<usize>,
    /// Per-keyframe fit report.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// A `.prms` stream.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Raw)]
    format: FormatArg,
}

#[derive(Debug, Args)]
struct StreamArgs {
    /// Directory of `.prms` streams sharing one keyframe layout.
    #[arg(long)]
    input: PathBuf,
    /// Delivery-opportunity trace, one millisecond timestamp per line.
    #[arg(long)]
    trace: PathBuf,
    /// Receives the CSV logs and `frames/`.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 50)]
    delay_ms: u64,
    #[arg(long, default_value_t = netsim::DEFAULT_QUEUE_CAPACITY)]
    queue_cap: usize,
    #[arg(long, default_value_t = DEFAULT_MTU)]
    mtu: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Raw)]
    format: FormatArg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Reference frames.
    #[arg(long)]
    reference: PathBuf,
    /// Frames under test.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    intervals: Vec<usize>,
    /// Defaults to stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 8)]
    ranks: usize,
    #[arg(long, default_value_t = 8)]
    intervals: usize,
    /// Defaults to stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("promptlab: error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return EXIT_USAGE;
        }
    };
    match configure_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("promptlab: error[usage]: {}", one_line(&m));
            EXIT_USAGE
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("promptlab: error[runtime]: {}", one_line(&m));
            EXIT_RUNTIME
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // A pool already built by an earlier call in the same process is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Invert(a) => invert(a),
        Command::Generate(a) => generate(a),
        Command::Stream(a) => stream(a),
        Command::Eval(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn require_exists(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

fn load_frames(dir: &Path) -> CliResult<Vec<ImageFrame>> {
    require_exists(dir)?;
    eval::read_frames(dir).map_err(CliError::runtime)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn csv_sink(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> CliResult<()> {
    let err = |e: io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    f(&mut w).and_then(|_| w.flush()).map_err(err)
}

/// Generator config whose image size matches `frames`.
fn generator_for(frames: &[ImageFrame], kind: GeneratorKind, seed: u64) -> CliResult<GeneratorConfig> {
    let base = match kind {
        GeneratorKind::Default => GeneratorConfig::default(),
        GeneratorKind::Compact => GeneratorConfig::compact(),
    };
    let first = frames.first().ok_or_else(|| CliError::Usage("no frames".into()))?;
    let (fh, fw) = (first.height(), first.width());
    if fh % base.upsample != 0 || fw % base.upsample != 0 {
        return Err(CliError::Usage(format!(
            "frame size {fh}×{fw} is not a multiple of the upsampling factor {}",
            base.upsample
        )));
    }
    let (h, w) = (fh / base.upsample, fw / base.upsample);
    let n = match kind {
        GeneratorKind::Default => base.n,
        GeneratorKind::Compact => h * w,
    };
    let gen = GeneratorConfig {
        seed,
        h,
        w,
        n,
        ..base
    };
    gen.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(gen)
}

fn sender_config(fit: &FitArgs, ranks: Vec<usize>, interval: usize) -> CliResult<SenderConfig> {
    let precision = Precision::from_bits(fit.bits).ok_or_else(|| CliError::Usage(format!("--bits {} must be 8 or 32", fit.bits)))?;
    let cfg = SenderConfig {
        interval,
        scene_threshold: fit.scene_threshold,
        ranks,
        fps: fit.fps,
        noise_seed: fit.seed,
        fit: FitConfig {
            iterations_first: fit.iters_first,
            iterations_subsequent: fit.iters_sub,
            precision,
            seed: fit.seed,
            ..FitConfig::default()
        },
        ..SenderConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn invert(a: InvertArgs) -> CliResult<()> {
    let frames = load_frames(&a.input)?;
    let gen = generator_for(&frames, a.fit.generator, a.fit.seed)?;
    let mut ranks = a.ranks.clone();
    ranks.sort_unstable();
    ranks.dedup();
    let cfg = sender_config(&a.fit, ranks, a.fit.interval)?;
    let (plan, variants) = encode_ladder(&gen, &frames, &cfg).map_err(CliError::runtime)?;
    create_dir(&a.output)?;
    for v in &variants {
        let bytes = v.stream.to_bytes().map_err(CliError::runtime)?;
        let path = a.output.join(format!("rank_{}.prms", v.rank));
        fs::write(&path, &bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        eval::write_frames(&a.output.join(format!("recon_rank_{}", v.rank)), &v.reconstruction, FrameFormat::RawF32)
            .map_err(CliError::runtime)?;
        println!(
            "rank={} bytes={} bitrate_bps={:.0} keyframes={}",
            v.rank,
            bytes.len(),
            v.stream_bitrate(frames.len()),
            plan.keyframes.len()
        );
    }
    if let Some(p) = &a.csv {
        write_file(p, |w| {
            writeln!(w, "rank,keyframe_index,kind,iterations,initial_loss,final_loss,final_d")?;
            for v in &variants {
                for (idx, rep) in &v.reports {
                    let kind = plan.keyframes.iter().find(|k| k.0 == *idx).map_or("", |k| k.1.as_str());
                    let (i, f) = (rep.initial().unwrap_or_default(), rep.final_terms().unwrap_or_default());
                    writeln!(
                        w,
                        "{},{idx},{kind},{},{:.8},{:.8},{:.8}",
                        v.rank,
                        rep.iterations(),
                        i.total,
                        f.total,
                        f.fit
                    )?;
                }
            }
            Ok(())
        })?;
    }
    Ok(())
}

fn read_stream(path: &Path) -> CliResult<Vec<u8>> {
    require_exists(path)?;
    fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let bytes = read_stream(&a.input)?;
    let (_, frames) = receiver::decode_stream(&bytes).map_err(CliError::runtime)?;
    create_dir(&a.output)?;
    eval::write_frames(&a.output, &frames, a.format.into()).map_err(CliError::runtime)?;
    println!("frames={}", frames.len());
    Ok(())
}

fn stream(a: StreamArgs) -> CliResult<()> {
    require_exists(&a.input)?;
    require_exists(&a.trace)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.input)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "prms"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no .prms files in {}", a.input.display())));
    }
    let ladder = paths
        .iter()
        .map(|p| {
            let bytes = read_stream(p)?;
            Stream::from_bytes(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let trace = netsim::load_trace(&a.trace).map_err(CliError::runtime)?;
    let link = LinkConfig {
        delay_ms: a.delay_ms,
        queue_capacity: a.queue_cap,
        mtu: a.mtu,
    };
    let log = stream_session(&ladder, &trace, link, a.mtu).map_err(CliError::runtime)?;
    let out = decode_session(&log.link.arrivals, log.num_frames).map_err(CliError::runtime)?;

    create_dir(&a.output)?;
    write_file(&a.output.join("arrivals.csv"), |w| netsim::write_arrivals_csv(w, &log.link.arrivals))?;
    write_file(&a.output.join("drops.csv"), |w| netsim::write_drops_csv(w, &log.link.drops))?;
    write_file(&a.output.join("schedule.csv"), |w| sender::write_schedule_csv(w, &log.schedule))?;
    write_file(&a.output.join("ready.csv"), |w| receiver::write_ready_csv(w, &out.ready_ms))?;
    write_file(&a.output.join("choices.csv"), |w| {
        writeln!(w, "keyframe_index,rank,estimate_bps")?;
        for (idx, rank, est) in &log.choices {
            writeln!(w, "{idx},{rank},{}", est.map(|e| format!("{e:.0}")).unwrap_or_default())?;
        }
        Ok(())
    })?;
    eval::write_frames(&a.output.join("frames"), &out.frames, a.format.into()).map_err(CliError::runtime)?;
    println!(
        "frames={} decoded={} packets_sent={} delivered={} drops={} scene_errors={}",
        log.num_frames,
        out.decoded_count(),
        log.link.sent,
        log.link.arrivals.len(),
        log.link.drops.len(),
        out.scene_errors.len()
    );
    Ok(())
}

fn evaluate(a: EvalArgs) -> CliResult<()> {
    let reference = load_frames(&a.reference)?;
    let test = load_frames(&a.input)?;
    let report = MetricReport::compute(&reference, &test).map_err(CliError::runtime)?;
    let mut sink = csv_sink(a.csv.as_deref())?;
    report
        .write_csv(&mut sink)
        .and_then(|_| sink.flush())
        .map_err(CliError::runtime)
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let frames = load_frames(&a.input)?;
    let gen = generator_for(&frames, a.fit.generator, a.fit.seed)?;
    let cfg = sender_config(&a.fit, vec![a.ranks.iter().copied().min().unwrap_or(1)], a.fit.interval)?;
    let rows = eval::sweep(&frames, &gen, &a.ranks, &a.intervals, &cfg).map_err(CliError::runtime)?;
    let mut sink = csv_sink(a.csv.as_deref())?;
    eval::write_sweep_csv(&mut sink, &rows)
        .and_then(|_| sink.flush())
        .map_err(CliError::runtime)
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let frames = load_frames(&a.input)?;
    let gen = generator_for(&frames, a.fit.generator, a.fit.seed)?;
    let cfg = sender_config(&a.fit, vec![a.ranks], a.intervals)?;
    let report = eval::ablate_interpolation(&frames, &gen, a.ranks, a.intervals, &cfg).map_err(|e| match e {
        eval::EvalError::InvalidArgument(m) => CliError::Usage(m),
        other => CliError::runtime(other),
    })?;
    let mut sink = csv_sink(a.csv.as_deref())?;
    sink.write_all(report.to_csv().as_bytes())
        .and_then(|_| sink.flush())
        .map_err(CliError::runtime)
}
