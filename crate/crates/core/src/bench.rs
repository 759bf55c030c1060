//! Map/touch/unlink/unmap timing across sizes and release policies, plus a
//! memset baseline and deferred-release accounting. Results go to CSV.

use std::ffi::CString;
use std::fmt;
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::arena::{free_bytes, Arena, ArenaAllocator, ArenaError, MapMode, ReleasePolicy};
use crate::keyval::fmt_real;

pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;
pub const CSV_HEADER: [&str; 8] = [
    "size_bytes",
    "policy",
    "rep",
    "map_s",
    "touch_s",
    "unlink_s",
    "unmap_s",
    "rate_bytes_per_s",
];
const TMPFS_MAGIC: i64 = 0x0102_1994;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench parameters: {0}")]
    Invalid(String),
    #[error("csv {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("csv {path} line {line}: {reason}")]
    BadRow {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// A release policy, or the memset baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchPolicy {
    Release(ReleasePolicy),
    /// Full-region byte fill of a private arena; the fill time is reported
    /// in the unmap column so the rate column reads as fill rate.
    Memset,
}

impl BenchPolicy {
    pub fn name(self) -> &'static str {
        match self {
            BenchPolicy::Release(p) => p.name(),
            BenchPolicy::Memset => "Memset",
        }
    }

    pub fn is_shared(self) -> bool {
        matches!(self, BenchPolicy::Release(p) if p != ReleasePolicy::PrivateFree)
    }
}

impl fmt::Display for BenchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("memset") {
            Ok(BenchPolicy::Memset)
        } else {
            s.parse().map(BenchPolicy::Release)
        }
    }
}

impl From<ReleasePolicy> for BenchPolicy {
    fn from(p: ReleasePolicy) -> Self {
        BenchPolicy::Release(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub size_bytes: u64,
    pub policy: BenchPolicy,
    pub rep: u32,
    pub map_s: f64,
    pub touch_s: f64,
    pub unlink_s: f64,
    pub unmap_s: f64,
}

impl BenchRow {
    /// Bytes per unmap second; `None` when nothing was timed.
    pub fn rate(&self) -> Option<f64> {
        (self.unmap_s > 0.0).then(|| self.size_bytes as f64 / self.unmap_s)
    }

    pub fn total_release_s(&self) -> f64 {
        self.unlink_s + self.unmap_s
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Directory for shared arenas; should be on tmpfs.
    pub dir: PathBuf,
    pub sizes: Vec<u64>,
    pub policies: Vec<BenchPolicy>,
    pub reps: u32,
    pub pinned: bool,
    /// Release through the background worker (not used for assertions).
    pub background: bool,
}

impl BenchConfig {
    pub fn new(dir: impl Into<PathBuf>, sizes: Vec<u64>, policies: Vec<BenchPolicy>, reps: u32) -> Self {
        Self {
            dir: dir.into(),
            sizes,
            policies,
            reps,
            pinned: true,
            background: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub notes: Vec<String>,
    pub pinned: bool,
}

/// 64 MiB to 4 GiB in powers of two, clipped to half of the free space
/// under `dir`.
pub fn default_sizes(dir: &Path) -> Vec<u64> {
    let limit = free_bytes(dir).map(|f| f / 2).unwrap_or(u64::MAX);
    (0..)
        .map(|k| (64 * MIB) << k)
        .take_while(|&s| s <= 4 * GIB)
        .filter(|&s| s <= limit)
        .collect()
}

pub fn is_tmpfs(dir: &Path) -> bool {
    let Ok(c) = CString::new(dir.as_os_str().as_bytes()) else {
        return false;
    };
    let mut st: libc::statfs = unsafe { std::mem::zeroed() };
    // SAFETY: valid C string and out-pointer.
    if unsafe { libc::statfs(c.as_ptr(), &mut st) } != 0 {
        return false;
    }
    st.f_type as i64 == TMPFS_MAGIC
}

/// `MemAvailable` from /proc/meminfo.
pub fn available_memory() -> Option<u64> {
    let text = fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

/// Pins the calling thread to the CPU it is running on; the previous
/// affinity is restored on drop.
pub struct Pin {
    previous: libc::cpu_set_t,
}

impl Pin {
    pub fn current_cpu() -> Option<Pin> {
        // SAFETY: plain syscalls on the calling thread with valid pointers.
        unsafe {
            let cpu = libc::sched_getcpu();
            if cpu < 0 {
                return None;
            }
            let mut previous: libc::cpu_set_t = std::mem::zeroed();
            let size = std::mem::size_of::<libc::cpu_set_t>();
            if libc::sched_getaffinity(0, size, &mut previous) != 0 {
                return None;
            }
            let mut one: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu as usize, &mut one);
            if libc::sched_setaffinity(0, size, &one) != 0 {
                return None;
            }
            Some(Pin { previous })
        }
    }
}

impl Drop for Pin {
    fn drop(&mut self) {
        // SAFETY: restoring a mask previously returned by the kernel.
        unsafe {
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &self.previous);
        }
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn fits_in_memory(size: u64) -> bool {
    available_memory().is_none_or(|avail| size <= avail / 10 * 9)
}

fn bench_path(dir: &Path, size: u64, rep: u32) -> PathBuf {
    dir.join(format!("shmstate_bench_{}_{size}_{rep}", std::process::id()))
}

fn fill(arena: &mut Arena) -> Result<Duration, ArenaError> {
    let bytes = arena.bytes_mut()?;
    let t = Instant::now();
    bytes.fill(0xA5);
    std::hint::black_box(&bytes[bytes.len() - 1]);
    Ok(t.elapsed())
}

fn measure_once(
    alloc: &ArenaAllocator,
    cfg: &BenchConfig,
    size: u64,
    policy: BenchPolicy,
    rep: u32,
) -> Result<BenchRow, ArenaError> {
    let path = bench_path(&cfg.dir, size, rep);
    let t = Instant::now();
    let mut arena = if policy.is_shared() {
        alloc.map_shared(&path, size, MapMode::CreateWrite)?
    } else {
        alloc.allocate_private(size)?
    };
    let map_s = secs(t.elapsed());
    let t = Instant::now();
    arena.touch_pages()?;
    let touch_s = secs(t.elapsed());
    let mut row = BenchRow {
        size_bytes: size,
        policy,
        rep,
        map_s,
        touch_s,
        unlink_s: 0.0,
        unmap_s: 0.0,
    };
    match policy {
        BenchPolicy::Memset => {
            row.unmap_s = secs(fill(&mut arena)?);
            alloc.release(arena, ReleasePolicy::PrivateFree)?;
        }
        BenchPolicy::Release(p) => {
            let timing = if cfg.background {
                alloc.release_in_background(arena, p).wait()?
            } else {
                alloc.release(arena, p)?
            };
            row.unlink_s = timing.unlink_seconds();
            row.unmap_s = timing.unmap_seconds();
            match p {
                ReleasePolicy::DeferUnmap => {
                    alloc.drain_deferred();
                }
                ReleasePolicy::UnmapKeepFile => {
                    let _ = fs::remove_file(&path);
                }
                _ => {}
            }
        }
    }
    Ok(row)
}

/// Runs every (size, policy, rep) in that nesting order. Sizes that do not
/// fit are skipped with a note; shared policies are skipped with a note when
/// `cfg.dir` is not on tmpfs.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.sizes.contains(&0) {
        return Err(BenchError::Invalid("sizes must be positive".into()));
    }
    let mut report = BenchReport::default();
    let _pin = if cfg.pinned {
        let pin = Pin::current_cpu();
        if pin.is_none() {
            report.notes.push("could not pin to a single cpu; running unpinned".into());
        }
        pin
    } else {
        None
    };
    report.pinned = _pin.is_some();
    let tmpfs = is_tmpfs(&cfg.dir);
    if !tmpfs && cfg.policies.iter().any(|p| p.is_shared()) {
        report.notes.push(format!(
            "{} is not tmpfs; shared policies skipped",
            cfg.dir.display()
        ));
    }
    let alloc = ArenaAllocator::new();
    for &size in &cfg.sizes {
        if !fits_in_memory(size) {
            report.notes.push(format!("size {size}: exceeds available memory, skipped"));
            continue;
        }
        'policy: for &policy in &cfg.policies {
            if policy.is_shared() && !tmpfs {
                continue;
            }
            for rep in 0..cfg.reps {
                match measure_once(&alloc, cfg, size, policy, rep) {
                    Ok(row) => report.rows.push(row),
                    Err(ArenaError::Exhausted { .. }) | Err(ArenaError::OutOfMemory { .. }) => {
                        report
                            .notes
                            .push(format!("size {size} {policy}: capacity exceeded, skipped"));
                        continue 'policy;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    Ok(report)
}

pub fn bench_memset(sizes: &[u64], reps: u32) -> Result<Vec<BenchRow>, BenchError> {
    let cfg = BenchConfig {
        pinned: false,
        ..BenchConfig::new(std::env::temp_dir(), sizes.to_vec(), vec![BenchPolicy::Memset], reps)
    };
    Ok(run_bench(&cfg)?.rows)
}

#[derive(Debug, Clone, Default)]
pub struct DeferredReport {
    pub arena_bytes: u64,
    /// One per arena: the `DeferUnmap` release call.
    pub per_release_seconds: Vec<f64>,
    /// Wall time of `drain_deferred`.
    pub drain_seconds: f64,
    /// Sum of `UnlinkThenUnmap` release totals for the same arenas.
    pub eager_seconds: f64,
}

fn make_touched(alloc: &ArenaAllocator, dir: &Path, size: u64, n: usize, tag: &str) -> Result<Vec<Arena>, BenchError> {
    (0..n)
        .map(|i| {
            let path = dir.join(format!("shmstate_{tag}_{}_{i}", std::process::id()));
            let mut a = alloc.map_shared(&path, size, MapMode::CreateWrite)?;
            a.touch_pages()?;
            Ok(a)
        })
        .collect()
}

/// Splits `total_bytes` over `n_arenas` touched shared arenas, releases them
/// with `DeferUnmap` and drains; then repeats with eager `UnlinkThenUnmap`.
pub fn bench_deferred(dir: &Path, total_bytes: u64, n_arenas: usize) -> Result<DeferredReport, BenchError> {
    if n_arenas == 0 {
        return Ok(DeferredReport::default());
    }
    let size = total_bytes / n_arenas as u64;
    if size == 0 {
        return Err(BenchError::Invalid("arena size rounds to zero".into()));
    }
    let mut report = DeferredReport {
        arena_bytes: size,
        ..Default::default()
    };
    let alloc = ArenaAllocator::new();

    for a in make_touched(&alloc, dir, size, n_arenas, "deferred")? {
        let t = Instant::now();
        alloc.release(a, ReleasePolicy::DeferUnmap)?;
        report.per_release_seconds.push(secs(t.elapsed()));
    }
    let t = Instant::now();
    alloc.drain_deferred();
    report.drain_seconds = secs(t.elapsed());

    for a in make_touched(&alloc, dir, size, n_arenas, "eager")? {
        report.eager_seconds += alloc.release(a, ReleasePolicy::UnlinkThenUnmap)?.total_seconds();
    }
    Ok(report)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Median of `f` over the rows with this size and policy.
pub fn median_of(rows: &[BenchRow], size: u64, policy: BenchPolicy, f: impl Fn(&BenchRow) -> f64) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.size_bytes == size && r.policy == policy)
        .map(f)
        .collect();
    median(&mut v)
}

/// Median unmap rate; reps with no timed unmap are left out.
pub fn median_rate(rows: &[BenchRow], size: u64, policy: BenchPolicy) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.size_bytes == size && r.policy == policy)
        .filter_map(BenchRow::rate)
        .collect();
    median(&mut v)
}

/// Population coefficient of variation.
pub fn coefficient_of_variation(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

pub fn write_csv<W: io::Write>(rows: &[BenchRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.size_bytes.to_string(),
            r.policy.name().to_string(),
            r.rep.to_string(),
            fmt_real(r.map_s),
            fmt_real(r.touch_s),
            fmt_real(r.unlink_s),
            fmt_real(r.unmap_s),
            r.rate().map(fmt_real).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(rows: &[BenchRow], out: &Path) -> Result<(), BenchError> {
    let file = fs::File::create(out).map_err(|source| BenchError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write_csv(rows, io::BufWriter::new(file)).map_err(|source| BenchError::Csv {
        path: out.to_path_buf(),
        source,
    })
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchRow>, BenchError> {
    let csv_err = |source| BenchError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(BenchError::BadRow {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: String| BenchError::BadRow {
            path: path.to_path_buf(),
            line,
            reason,
        };
        fn field<T: FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            rec[i]
                .parse()
                .map_err(|e: T::Err| format!("{}: {e}", CSV_HEADER[i]))
        }
        let row = BenchRow {
            size_bytes: field(&rec, 0).map_err(bad)?,
            policy: field(&rec, 1).map_err(bad)?,
            rep: field(&rec, 2).map_err(bad)?,
            map_s: field(&rec, 3).map_err(bad)?,
            touch_s: field(&rec, 4).map_err(bad)?,
            unlink_s: field(&rec, 5).map_err(bad)?,
            unmap_s: field(&rec, 6).map_err(bad)?,
        };
        rows.push(row);
    }
    Ok(rows)
}
