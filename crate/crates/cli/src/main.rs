use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use centroid_mem::alloc_sim::{AllocConfig, SizeClassTable};
use centroid_mem::descriptor_store::{CacheGeometry, StoreConfig};
use centroid_mem::dgu::DguConfig;
use centroid_mem::harness::{self, ReplayConfig, Trace, WorkloadParams};
use centroid_mem::hex::parse_word;
use centroid_mem::multilevel::ParentScheme;
use centroid_mem::ptr_codec::{centroid_pair, CodecError, LinearAddress, Mode, TaggedWord};

const EXIT_STRICT: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;
const EXIT_IO: u8 = 74;

#[derive(Debug, Parser)]
#[command(
    name = "centroid-mem",
    version,
    about = "Tagged-word memory safety simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode a tagged word, or encode one from its fields.
    Inspect(InspectArgs),
    /// Generate a synthetic JSONL trace.
    Gen(GenArgs),
    /// Replay a trace and emit a report.
    Run(RunArgs),
    /// Replay a trace under the aligned, low-fat and centroid back-ends.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Aligned,
    Centroid,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Aligned => Mode::Aligned,
            ModeArg::Centroid => Mode::Centroid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Dualtag,
    Rangecache,
    Pte,
}

impl From<SchemeArg> for ParentScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Dualtag => ParentScheme::DualTag,
            SchemeArg::Rangecache => ParentScheme::RangeCache,
            SchemeArg::Pte => ParentScheme::Pte,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Human,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// 64-bit word, hex (0x...) or decimal.
    word: Option<String>,
    #[arg(long, value_enum, conflicts_with = "word", requires_all = ["n", "addr"])]
    mode: Option<ModeArg>,
    #[arg(long, conflicts_with = "word")]
    n: Option<u32>,
    #[arg(long, conflicts_with = "word", value_parser = parse_u64)]
    addr: Option<u64>,
    #[arg(long, value_enum, default_value = "human")]
    format: Format,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    allocs: usize,
    #[arg(long, default_value_t = 0.99)]
    p_small: f64,
    #[arg(long, default_value_t = 16)]
    small_min: u64,
    #[arg(long, default_value_t = 1024)]
    small_max: u64,
    #[arg(long, default_value_t = 64 * 1024)]
    large_min: u64,
    #[arg(long, default_value_t = 16 * 1024 * 1024)]
    large_max: u64,
    /// Mean lifetime of small objects, in later allocations (synthetic).
    #[arg(long, default_value_t = 8.0)]
    small_lifetime: f64,
    /// Mean lifetime of large objects, in later allocations (synthetic).
    #[arg(long, default_value_t = 64.0)]
    large_lifetime: f64,
    #[arg(long, default_value_t = 4)]
    accesses: u32,
    /// Force every allocation into one mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, default_value_t = 0.0)]
    spatial_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    temporal_rate: f64,
    #[arg(long, env = "CENTROID_MEM_SEED", default_value_t = 0)]
    seed: u64,
    /// Output path, `-` for stdout.
    #[arg(long, short, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Requests at or above this size use centroid mode.
    #[arg(long, default_value_t = 1024)]
    threshold: u64,
    /// Reuse freed ranges instead of handing out fresh addresses.
    #[arg(long)]
    reuse: bool,
    #[arg(long, default_value_t = 64)]
    cache_sets: usize,
    #[arg(long, default_value_t = 4)]
    cache_ways: usize,
    #[arg(long, default_value_t = 16)]
    range_capacity: usize,
    /// Size-class table: JSON, or text lines of `max_size exponent`.
    #[arg(long)]
    size_classes: Option<PathBuf>,
    /// Look up descriptors for aligned words too, so freed aligned objects fault.
    #[arg(long)]
    aligned_liveness: bool,
    /// Allow pointer arithmetic to land one byte past an object.
    #[arg(long)]
    cpp_oob_one_past: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Trace path, `-` for stdin.
    trace: PathBuf,
    #[command(flatten)]
    replay: ReplayArgs,
    #[arg(long, value_enum)]
    parent_scheme: Option<SchemeArg>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Print one verdict per access (human format; kept in json too).
    #[arg(long)]
    explain: bool,
    /// Exit with status 2 when any fault occurred.
    #[arg(long)]
    strict: bool,
    #[arg(long, short, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    trace: PathBuf,
    #[command(flatten)]
    replay: ReplayArgs,
    #[arg(long, value_enum, default_value = "human")]
    format: Format,
    #[arg(long, short, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Io(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn parse_u64(s: &str) -> Result<u64, String> {
    parse_word(s).ok_or_else(|| format!("invalid number {s:?}"))
}

fn is_stdio(p: &Path) -> bool {
    p.as_os_str() == "-"
}

fn read_input(path: &Path) -> CliResult<String> {
    let mut text = String::new();
    if is_stdio(path) {
        io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| CliError::Io(format!("stdin: {e}")))?;
    } else {
        text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(text)
}

fn check_output(path: &Path) -> CliResult<()> {
    if is_stdio(path) {
        return Ok(());
    }
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(CliError::Io(format!(
            "{}: no such directory",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

fn write_output(path: &Path, text: &str) -> CliResult<()> {
    if is_stdio(path) {
        let mut out = io::stdout().lock();
        out.write_all(text.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| CliError::Io(format!("stdout: {e}")))
    } else {
        fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

fn inspect(args: InspectArgs) -> CliResult<()> {
    let word = match (&args.word, args.mode, args.n, args.addr) {
        (Some(text), ..) => {
            let raw = parse_word(text)
                .ok_or_else(|| CliError::Usage(format!("malformed word {text:?}")))?;
            TaggedWord::decode(raw).map_err(|e| match e {
                CodecError::MalformedTag { .. } => CliError::Data(format!("MalformedTag: {e}")),
                other => CliError::Data(other.to_string()),
            })?
        }
        (None, Some(mode), Some(n), Some(addr)) => {
            let addr = LinearAddress::new(addr).map_err(|e| CliError::Usage(e.to_string()))?;
            TaggedWord::new(mode.into(), n, addr).map_err(|e| CliError::Usage(e.to_string()))?
        }
        _ => {
            return Err(CliError::Usage(
                "give a word or all of --mode, --n and --addr".into(),
            ))
        }
    };
    let slot = word.slot();
    let (low, high) = centroid_pair(slot);
    let text = match args.format {
        Format::Json => {
            let mut v = serde_json::json!({
                "word": format!("{:#x}", word.encode()),
                "mode": word.mode.to_string(),
                "exponent": word.exponent,
                "address": format!("{:#x}", word.address.get()),
                "slot": { "base": format!("{:#x}", slot.base().get()), "bound": format!("{:#x}", slot.bound().get()), "size": slot.size() },
            });
            match word.mode {
                Mode::Aligned => {
                    v["bounds"] = serde_json::json!([
                        format!("{:#x}", slot.base().get()),
                        format!("{:#x}", slot.bound().get())
                    ]);
                }
                Mode::Centroid => {
                    v["centroids"] = serde_json::json!({ "low": format!("{:#x}", low.get()), "high": format!("{:#x}", high.get()) });
                }
            }
            format!(
                "{}\n",
                serde_json::to_string_pretty(&v).expect("json value serializes")
            )
        }
        Format::Csv | Format::Human => {
            let mut s = format!(
                "word      {:#018x}\nmode      {}\nexponent  {}\naddress   {:#x}\nslot      [{:#x}, {:#x}] ({} bytes)\n",
                word.encode(),
                word.mode,
                word.exponent,
                word.address.get(),
                slot.base().get(),
                slot.bound().get(),
                slot.size()
            );
            match word.mode {
                Mode::Aligned => {
                    s += &format!(
                        "bounds    [{:#x}, {:#x}]\n",
                        slot.base().get(),
                        slot.bound().get()
                    )
                }
                Mode::Centroid => {
                    s += &format!("centroids L={:#x} H={:#x}\n", low.get(), high.get())
                }
            }
            s
        }
    };
    write_output(Path::new("-"), &text)
}

fn gen(args: GenArgs) -> CliResult<()> {
    check_output(&args.out)?;
    let params = WorkloadParams {
        allocs: args.allocs,
        p_small: args.p_small,
        small_min: args.small_min,
        small_max: args.small_max,
        large_min: args.large_min,
        large_max: args.large_max,
        small_lifetime: args.small_lifetime,
        large_lifetime: args.large_lifetime,
        accesses_per_object: args.accesses,
        mode_override: args.mode.map(Mode::from),
        spatial_rate: args.spatial_rate,
        temporal_rate: args.temporal_rate,
        seed: args.seed,
    };
    let trace = harness::generate(&params).map_err(|e| CliError::Usage(e.to_string()))?;
    write_output(&args.out, &trace.to_jsonl())
}

fn replay_config(args: &ReplayArgs) -> CliResult<ReplayConfig> {
    if args.cache_sets == 0 || args.cache_ways == 0 || args.range_capacity == 0 {
        return Err(CliError::Usage(
            "cache sets, ways and range capacity must be positive".into(),
        ));
    }
    let size_classes = match &args.size_classes {
        Some(path) => {
            let text = read_input(path)?;
            SizeClassTable::parse(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        None => SizeClassTable::default(),
    };
    Ok(ReplayConfig {
        alloc: AllocConfig {
            mode_threshold: args.threshold,
            size_classes,
            reuse: args.reuse,
            ..AllocConfig::default()
        },
        store: StoreConfig {
            cache: CacheGeometry {
                sets: args.cache_sets,
                ways: args.cache_ways,
            },
            range_capacity: args.range_capacity,
        },
        dgu: DguConfig {
            aligned_liveness: args.aligned_liveness,
            cpp_one_past: args.cpp_oob_one_past,
        },
        ..ReplayConfig::default()
    })
}

fn load_trace(path: &Path) -> CliResult<Trace> {
    let text = read_input(path)?;
    Trace::parse(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn run(args: RunArgs) -> CliResult<u8> {
    check_output(&args.out)?;
    let mut config = replay_config(&args.replay)?;
    config.parent_scheme = args.parent_scheme.map(ParentScheme::from);
    config.explain = args.explain;
    let trace = load_trace(&args.trace)?;
    let report = harness::replay(&trace, &config).map_err(|e| CliError::Data(e.to_string()))?;
    let text = match args.format {
        Format::Json => report.to_json(),
        Format::Csv => report.to_csv(),
        Format::Human => report.to_human(),
    };
    write_output(&args.out, &text)?;
    Ok(if args.strict && report.has_faults() {
        EXIT_STRICT
    } else {
        0
    })
}

fn compare(args: CompareArgs) -> CliResult<()> {
    check_output(&args.out)?;
    let config = replay_config(&args.replay)?;
    let trace = load_trace(&args.trace)?;
    let table = harness::compare(&trace, &config).map_err(|e| CliError::Data(e.to_string()))?;
    let text = match args.format {
        Format::Json => table.to_json(),
        Format::Csv => table.to_csv(),
        Format::Human => table.to_human(),
    };
    write_output(&args.out, &text)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Inspect(a) => inspect(a).map(|_| 0),
        Command::Gen(a) => gen(a).map(|_| 0),
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("centroid-mem: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
