//! Command-line front end. Exit codes: 0 success, 1 verification failure,
//! 2 usage, config or I/O error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, BenchConfig, Layout, RunRow, Submission};
use crate::blockdev::BLOCK_SIZE;
use crate::btree::{self, BuildOptions, TreeImage};
use crate::config::RunConfig;
use crate::iostack::{DispatchMode, StackConfig};
use crate::sfunc;
use crate::xcache::ExtentMap;

#[derive(Debug, Parser)]
#[command(name = "iochain", version, about = "Dependent-read offload simulator")]
pub struct Cli {
    /// Seed for workload generation (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config file whose sections are applied before any other config.
    #[arg(long, global = true, value_name = "PATH")]
    pub profile: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a B+-tree image.
    BuildTree(BuildTreeArgs),
    /// Verify a storage-function program (text or binary).
    Verify {
        /// Assembly text, or the binary encoding.
        program: PathBuf,
    },
    /// Run the benchmark cells described by a config file.
    Bench {
        /// INI run configuration.
        config: PathBuf,
        /// Append one row per run to this CSV file.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Regenerate the four throughput/latency sweeps as CSV.
    Figures {
        /// Directory for fig3a.csv .. fig3d.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Virtual run time of each cell.
        #[arg(long, default_value_t = 10)]
        duration_ms: u64,
    },
}

#[derive(Debug, Args)]
pub struct BuildTreeArgs {
    /// Number of keys (odd keys 1, 3, 5, ...).
    #[arg(long, conflicts_with = "depth", required_unless_present = "depth")]
    pub keys: Option<usize>,
    /// Build a full tree of fanout^depth keys.
    #[arg(long)]
    pub depth: Option<u32>,
    /// Children per internal node and pairs per leaf.
    #[arg(long, default_value_t = 31)]
    pub fanout: usize,
    #[arg(long, default_value_t = 512)]
    pub page_size: usize,
    /// Image file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Spread the image over this many discontiguous extents and write
    /// them to `OUT.extents`.
    #[arg(long)]
    pub scatter: Option<usize>,
}

/// Largest key count `build-tree --depth` will generate.
pub const MAX_GENERATED_KEYS: usize = 1 << 22;

struct Fail(i32, String);

impl Fail {
    fn usage(msg: impl Into<String>) -> Self {
        Fail(2, msg.into())
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(code) => code,
        Err(Fail(code, msg)) => {
            let _ = writeln!(err, "error: {msg}");
            code
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32, Fail> {
    match &cli.command {
        Command::BuildTree(a) => build_tree(a, out),
        Command::Verify { program } => verify(program, out),
        Command::Bench { config, csv } => bench_cmd(cli, config, csv.as_deref(), out),
        Command::Figures { out: dir, duration_ms } => figures(cli, dir, *duration_ms, out),
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Fail {
    Fail::usage(format!("{}: {e}", path.display()))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Fail> {
    out.write_all(text.as_bytes()).map_err(|e| Fail::usage(e.to_string()))
}

fn build_tree(a: &BuildTreeArgs, out: &mut dyn Write) -> Result<i32, Fail> {
    let n = match (a.keys, a.depth) {
        (Some(n), _) => n,
        (None, Some(d)) => a
            .fanout
            .checked_pow(d)
            .filter(|&n| n <= MAX_GENERATED_KEYS)
            .ok_or_else(|| Fail::usage(format!("a full depth-{d} tree is too large; pass --keys")))?,
        (None, None) => unreachable!("clap requires one of --keys/--depth"),
    };
    let opts = BuildOptions {
        fanout: a.fanout,
        depth: a.depth,
        page_size: a.page_size,
    };
    let img = btree::build(&btree::standard_pairs(n), opts).map_err(|e| Fail::usage(e.to_string()))?;
    std::fs::write(&a.out, &img.bytes).map_err(|e| io_fail(&a.out, e))?;
    let mut line = format!(
        "depth={} fanout={} pages={} root={} keys={} page_size={}",
        img.depth,
        img.fanout,
        img.pages(),
        img.root,
        img.keys,
        img.page_size
    );
    if let Some(e) = a.scatter {
        let map = btree::scatter_extents(img.bytes.len() as u64, e, img.page_size);
        let path = extents_path(&a.out);
        std::fs::write(&path, extents_fragment(&a.out, &map)).map_err(|e| io_fail(&path, e))?;
        let _ = write!(line, " extents={}", map.extents().len());
    }
    line.push('\n');
    emit(out, &line)?;
    Ok(0)
}

pub fn extents_path(image: &Path) -> PathBuf {
    let mut s = image.as_os_str().to_owned();
    s.push(".extents");
    PathBuf::from(s)
}

/// Config fragment declaring the image file and its extents.
pub fn extents_fragment(image: &Path, map: &ExtentMap) -> String {
    let stem = image.file_stem().map_or("tree".into(), |s| s.to_string_lossy().into_owned());
    let name = image.file_name().map_or("tree.btx".into(), |s| s.to_string_lossy().into_owned());
    let mut s = format!("[file.{stem}]\nimage = {name}\n");
    for e in map.extents() {
        let _ = writeln!(s, "extent = {},{},{}", e.file_off, e.pba, e.len);
    }
    s
}

fn verify(path: &Path, out: &mut dyn Write) -> Result<i32, Fail> {
    let bytes = std::fs::read(path).map_err(|e| io_fail(path, e))?;
    let prog = if bytes.starts_with(b"SFN1") {
        sfunc::decode(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Fail::usage("program is not utf-8 text"))?;
        sfunc::assemble(&text)
    }
    .map_err(|e| Fail::usage(format!("{}: {e}", path.display())))?;
    let errs = sfunc::verify_all(&prog);
    let mut s = String::new();
    if errs.is_empty() {
        let _ = writeln!(s, "ok: {} ({} instructions)", prog.name, prog.insns.len());
    } else {
        for e in &errs {
            let _ = writeln!(s, "{}: {} at instruction {}", prog.name, e.reason, e.index);
        }
    }
    emit(out, &s)?;
    Ok(if errs.is_empty() { 0 } else { 1 })
}

fn load_config(cli: &Cli, path: Option<&Path>) -> Result<RunConfig, Fail> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.profile {
        cfg.apply_file(p).map_err(|e| Fail::usage(format!("{}: {e}", p.display())))?;
    }
    if let Some(p) = path {
        cfg.apply_file(p).map_err(|e| Fail::usage(format!("{}: {e}", p.display())))?;
    }
    Ok(cfg)
}

fn base_config(cli: &Cli, cfg: &RunConfig) -> BenchConfig {
    BenchConfig {
        duration_ns: cfg.bench.duration_ms * 1_000_000,
        seed: cli.seed.or(cfg.bench.seed).unwrap_or(1),
        stack: StackConfig {
            profile: cfg.profile,
            device: cfg.device,
            cores: cfg.cores,
        },
        hop_limit: cfg.bench.hop_limit,
        invalidation_mean_s: cfg.bench.invalidation_interval_ms.map(|ms| ms as f64 / 1e3),
        ..BenchConfig::default()
    }
}

fn load_layout(cfg: &RunConfig) -> Result<Option<Arc<Layout>>, Fail> {
    let spec = match cfg.files.as_slice() {
        [] => return Ok(None),
        [one] => one,
        _ => return Err(Fail::usage("bench takes at most one [file.*] section")),
    };
    let path = spec
        .image
        .as_ref()
        .ok_or_else(|| Fail::usage(format!("[file.{}] has no image", spec.name)))?;
    let bytes = std::fs::read(path).map_err(|e| io_fail(path, e))?;
    let page_size = page_size_of(&bytes);
    let image = TreeImage::from_bytes(bytes, page_size).map_err(|e| Fail::usage(format!("{}: {e}", path.display())))?;
    let len = image.bytes.len() as u64;
    let map = if spec.extents.is_empty() {
        ExtentMap::contiguous(0, len)
    } else {
        ExtentMap::new(spec.extents.clone(), len).map_err(|e| Fail::usage(format!("[file.{}]: {e}", spec.name)))?
    };
    map.check_no_holes().map_err(|e| Fail::usage(format!("[file.{}]: {e}", spec.name)))?;
    Ok(Some(Arc::new(Layout { image, map })))
}

/// Page size of an image: the smallest multiple of the block size whose
/// second page (if any) starts with the page magic.
fn page_size_of(bytes: &[u8]) -> usize {
    let magic = btree::MAGIC.to_le_bytes();
    (1..=8)
        .map(|m| m * BLOCK_SIZE)
        .find(|&p| bytes.len() == p || bytes.get(p..p + 2) == Some(&magic[..]))
        .unwrap_or(BLOCK_SIZE)
}

fn bench_cmd(cli: &Cli, path: &Path, csv: Option<&Path>, out: &mut dyn Write) -> Result<i32, Fail> {
    let cfg = load_config(cli, Some(path))?;
    let layout = load_layout(&cfg)?;
    let base = base_config(cli, &cfg);
    let depths = match &layout {
        Some(l) if !cfg.bench_keys.contains("depth") => vec![l.image.depth],
        _ => cfg.bench.depths.clone(),
    };
    let submissions: Vec<Submission> = if cfg.bench.batches.is_empty() {
        vec![Submission::Sync]
    } else {
        cfg.bench.batches.iter().map(|&batch| Submission::Uring { batch }).collect()
    };
    let mut cells = Vec::new();
    for &mode in &cfg.bench.modes {
        for &depth in &depths {
            for &workers in &cfg.bench.workers {
                for &submission in &submissions {
                    let c = BenchConfig {
                        depth,
                        workers,
                        mode,
                        submission,
                        layout: layout.clone(),
                        ..base.clone()
                    };
                    c.validate().map_err(|e| Fail::usage(e.to_string()))?;
                    cells.push(c);
                }
            }
        }
    }
    let mut rows = Vec::new();
    let mut summary = String::new();
    for c in &cells {
        let m = bench::run(c).map_err(|e| Fail::usage(e.to_string()))?;
        let id = format!("run-{:04}", rows.len() + 1);
        let _ = writeln!(
            summary,
            "{id} mode={} depth={} workers={} batch={} lookups/s={:.0} mean={:.0}ns p99={}ns iops={:.0} cpu={:.3} splits={} aborts={}",
            c.mode,
            c.depth,
            c.workers,
            c.submission.batch(),
            m.lookups_per_sec,
            m.mean_lat_ns,
            m.p99_lat_ns,
            m.device_iops,
            m.cpu_util,
            m.split_hops,
            m.aborts_extent + m.aborts_bound + m.aborts_other
        );
        rows.push(RunRow::new(id, c, m));
    }
    if let Some(p) = csv {
        let fresh = std::fs::metadata(p).map_or(true, |m| m.len() == 0);
        let text = if fresh {
            bench::to_csv(&rows)
        } else {
            rows.iter().map(|r| r.csv_line() + "\n").collect()
        };
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| io_fail(p, e))?;
        f.write_all(text.as_bytes()).map_err(|e| io_fail(p, e))?;
    }
    emit(out, &summary)?;
    Ok(0)
}

/// Depths swept by the figures.
pub const FIGURE_DEPTHS: [u32; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
/// Batch sizes swept for the batched-submission figure.
pub const FIGURE_BATCHES: [usize; 4] = [1, 2, 4, 8];

fn figures(cli: &Cli, dir: &Path, duration_ms: u64, out: &mut dyn Write) -> Result<i32, Fail> {
    if duration_ms == 0 {
        return Err(Fail::usage("--duration-ms must be > 0"));
    }
    let cfg = load_config(cli, None)?;
    let base = BenchConfig {
        duration_ns: duration_ms * 1_000_000,
        ..base_config(cli, &cfg)
    };
    std::fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
    let fail = |e: bench::BenchError| Fail::usage(e.to_string());
    let depths = &FIGURE_DEPTHS;
    let a = bench::speedup_sweep(&base, depths, &bench::WORKER_SWEEP, DispatchMode::SyscallHook).map_err(fail)?;
    let b = bench::speedup_sweep(&base, depths, &bench::WORKER_SWEEP, DispatchMode::DriverHook).map_err(fail)?;
    let c = bench::latency_sweep(&base, depths).map_err(fail)?;
    let d = bench::uring_sweep(&base, depths, &FIGURE_BATCHES).map_err(fail)?;

    let c_rows: Vec<RunRow> = c
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let cfg = BenchConfig {
                depth: r.depth,
                mode: r.mode,
                workers: 1,
                ..base.clone()
            };
            RunRow::new(format!("fig3c-{:04}", i + 1), &cfg, r.metrics.clone())
        })
        .collect();
    let files = [
        ("fig3a.csv", bench::cell_rows("fig3a", &base, DispatchMode::SyscallHook, &a)),
        ("fig3b.csv", bench::cell_rows("fig3b", &base, DispatchMode::DriverHook, &b)),
        ("fig3c.csv", c_rows),
        ("fig3d.csv", bench::cell_rows("fig3d", &base, DispatchMode::DriverHook, &d)),
    ];
    for (name, rows) in &files {
        let p = dir.join(name);
        std::fs::write(&p, bench::to_csv(rows)).map_err(|e| io_fail(&p, e))?;
    }

    let best = |cells: &[bench::SweepCell]| {
        cells
            .iter()
            .max_by(|x, y| x.ratio().total_cmp(&y.ratio()))
            .map(|c| (c.ratio(), c.depth, c.workers, c.batch))
            .unwrap()
    };
    let mut s = String::new();
    let (r, dd, w, _) = best(&a);
    let _ = writeln!(s, "fig3a syscall hook: max speedup {r:.3}x (depth {dd}, {w} workers)");
    let (r, dd, w, _) = best(&b);
    let _ = writeln!(s, "fig3b driver hook: max speedup {r:.3}x (depth {dd}, {w} workers)");
    let base_lat = |d: u32| c.iter().find(|r| r.depth == d && r.mode == DispatchMode::Baseline).unwrap().metrics.mean_lat_ns;
    let (red, rd) = c
        .iter()
        .filter(|r| r.mode == DispatchMode::DriverHook)
        .map(|r| (1.0 - r.metrics.mean_lat_ns / base_lat(r.depth), r.depth))
        .max_by(|x, y| x.0.total_cmp(&y.0))
        .unwrap();
    let _ = writeln!(s, "fig3c driver hook: max latency reduction {:.1}% (depth {rd})", red * 100.0);
    let (r, dd, _, k) = best(&d);
    let _ = writeln!(s, "fig3d batched driver hook: max speedup {r:.3}x (depth {dd}, batch {k})");
    let _ = writeln!(
        s,
        "workers swept: {:?} (stand-in thread counts); figures written to {}",
        bench::WORKER_SWEEP,
        dir.display()
    );
    emit(out, &s)?;
    Ok(0)
}
