//! The top-level loop.
//!
//! A state root holds `read/` (the state at step t) and `write/` (where the
//! stepper puts step t+1). Each iteration may first copy `read/` to a
//! checkpoint, then runs one step (in-process or as a child `shmstate step`
//! process), then retires `write/` into `read/`.
//!
//! Retiring is crash-safe: a `retiring` sentinel is created first, `read/`
//! is deleted (its `meta` first, so a half-deleted directory is visibly
//! incomplete), `write/` is renamed to `read/`, the sentinel is removed and
//! a fresh `write/` is created. [`recover`] finishes an interrupted retire.

use std::fs;
use std::io;
use std::os::unix::fs::MetadataExt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::arena::ArenaAllocator;
use crate::checkpoint::{self, CheckpointError, CheckpointManifest, COMPLETE_MARKER, MANIFEST_FILE};
use crate::keyval::{fmt_real, KeyValDoc, KeyValError};
use crate::sim_kernel::{self, SimError, SimParams};
use crate::slab_buffer::{RamdiskConfig, SlabBuffer, RAMDISK_PREFIX_ENV};
use crate::state_format::{meta_path, read_metadata, FormatError, StateMetadata};

pub const READ_DIR: &str = "read";
pub const WRITE_DIR: &str = "write";
pub const SENTINEL: &str = "retiring";
pub const PARAMS_FILE: &str = "params";
const STAGING_DIR: &str = "restore.tmp";

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("bad state root layout: {0}")]
    Layout(String),
    #[error("no complete state under {0}")]
    NoCompleteState(PathBuf),
    #[error("write state {0} is incomplete (no meta); refusing to retire")]
    WriteIncomplete(PathBuf),
    #[error("{from} and {to} are on different file systems; put read/ and write/ on the same file system")]
    CrossDevice { from: PathBuf, to: PathBuf },
    #[error("injected crash at {0:?}")]
    InjectedCrash(RetirePoint),
    #[error("step from state {step} failed after {steps_done} completed steps: {message}")]
    StepFailed {
        step: u64,
        steps_done: u64,
        message: String,
    },
    #[error("checkpoint {dir} failed verification: {}", failures.join("; "))]
    CorruptCheckpoint { dir: PathBuf, failures: Vec<String> },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigSyntax(#[from] KeyValError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DriverError + '_ {
    move |source| DriverError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub state_root: PathBuf,
    pub steps: u64,
    pub params: SimParams,
    pub checkpoint_dest: PathBuf,
    /// 0 disables.
    pub checkpoint_every_steps: u64,
    /// 0 disables.
    pub checkpoint_every_seconds: f64,
    pub conditional_on_analysis: bool,
    pub copy_deadline_seconds: f64,
    pub copy_workers: usize,
    pub keep_k: usize,
    pub in_process: bool,
    /// Executable for child-process steps; defaults to the current one.
    pub step_exe: Option<PathBuf>,
    pub ramdisk: RamdiskConfig,
}

impl RunConfig {
    pub fn new(state_root: impl Into<PathBuf>, checkpoint_dest: impl Into<PathBuf>) -> Self {
        Self {
            state_root: state_root.into(),
            steps: 1,
            params: SimParams::default(),
            checkpoint_dest: checkpoint_dest.into(),
            checkpoint_every_steps: 0,
            checkpoint_every_seconds: 0.0,
            conditional_on_analysis: false,
            copy_deadline_seconds: 600.0,
            copy_workers: checkpoint::default_workers(),
            keep_k: 2,
            in_process: true,
            step_exe: None,
            ramdisk: RamdiskConfig::from_env(),
        }
    }

    pub fn validate(&self) -> Result<(), DriverError> {
        let bad = |m: &str| Err(DriverError::Config(m.to_string()));
        if self.steps < 1 {
            return bad("steps must be >= 1");
        }
        if !(self.checkpoint_every_seconds.is_finite() && self.checkpoint_every_seconds >= 0.0) {
            return bad("checkpoint_every_seconds must be >= 0");
        }
        if !(self.copy_deadline_seconds.is_finite() && self.copy_deadline_seconds > 0.0) {
            return bad("copy_deadline_seconds must be > 0");
        }
        if self.keep_k < 1 {
            return bad("keep_k must be >= 1");
        }
        self.params.validate()?;
        Ok(())
    }

    pub fn copy_deadline(&self) -> Duration {
        Duration::from_secs_f64(self.copy_deadline_seconds)
    }

    /// Reads a `key = value` config. Keys: `state_root`, `checkpoint_dest`
    /// (required), `steps`, `checkpoint_every_steps`,
    /// `checkpoint_every_seconds`, `conditional_on_analysis`,
    /// `copy_deadline_seconds`, `copy_workers`, `keep_k`, `in_process`,
    /// `step_exe`, plus the stepper keys `dt`, `g`, `softening`,
    /// `cutoff_cells`, `analysis_every`.
    pub fn from_text(text: &str) -> Result<Self, DriverError> {
        let doc = KeyValDoc::parse(text)?;
        doc.check_known(&[
            "state_root",
            "checkpoint_dest",
            "steps",
            "checkpoint_every_steps",
            "checkpoint_every_seconds",
            "conditional_on_analysis",
            "copy_deadline_seconds",
            "copy_workers",
            "keep_k",
            "in_process",
            "step_exe",
            "dt",
            "g",
            "softening",
            "cutoff_cells",
            "analysis_every",
        ])?;
        let mut cfg = RunConfig::new(
            doc.require("state_root")?.value.clone(),
            doc.require("checkpoint_dest")?.value.clone(),
        );
        cfg.params = SimParams::from_doc(&doc)?;
        if let Some(v) = doc.get_parsed("steps")? {
            cfg.steps = v;
        }
        if let Some(v) = doc.get_parsed("checkpoint_every_steps")? {
            cfg.checkpoint_every_steps = v;
        }
        if let Some(v) = doc.get_parsed("checkpoint_every_seconds")? {
            cfg.checkpoint_every_seconds = v;
        }
        if let Some(v) = doc.get_parsed("conditional_on_analysis")? {
            cfg.conditional_on_analysis = v;
        }
        if let Some(v) = doc.get_parsed("copy_deadline_seconds")? {
            cfg.copy_deadline_seconds = v;
        }
        if let Some(v) = doc.get_parsed("copy_workers")? {
            cfg.copy_workers = v;
        }
        if let Some(v) = doc.get_parsed("keep_k")? {
            cfg.keep_k = v;
        }
        if let Some(v) = doc.get_parsed("in_process")? {
            cfg.in_process = v;
        }
        if let Some(e) = doc.get("step_exe")? {
            cfg.step_exe = Some(PathBuf::from(&e.value));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut doc = KeyValDoc::new();
        doc.push("state_root", self.state_root.display());
        doc.push("checkpoint_dest", self.checkpoint_dest.display());
        doc.push("steps", self.steps);
        doc.push("checkpoint_every_steps", self.checkpoint_every_steps);
        doc.push("checkpoint_every_seconds", fmt_real(self.checkpoint_every_seconds));
        doc.push("conditional_on_analysis", self.conditional_on_analysis);
        doc.push("copy_deadline_seconds", fmt_real(self.copy_deadline_seconds));
        doc.push("copy_workers", self.copy_workers);
        doc.push("keep_k", self.keep_k);
        doc.push("in_process", self.in_process);
        if let Some(exe) = &self.step_exe {
            doc.push("step_exe", exe.display());
        }
        let mut text = doc.to_text();
        text.push_str(&self.params.to_text());
        text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointDecision {
    No,
    Timed,
    Conditional,
}

/// Whether to checkpoint the read state (at `step_index`) before stepping
/// it. Conditional wins over Timed when both apply.
pub fn should_checkpoint(
    step_index: u64,
    since_last_checkpoint: Duration,
    next_step_flagged: bool,
    cfg: &RunConfig,
) -> CheckpointDecision {
    if cfg.conditional_on_analysis && next_step_flagged {
        return CheckpointDecision::Conditional;
    }
    let by_steps = cfg.checkpoint_every_steps > 0 && step_index.is_multiple_of(cfg.checkpoint_every_steps);
    let by_time = cfg.checkpoint_every_seconds > 0.0
        && since_last_checkpoint.as_secs_f64() >= cfg.checkpoint_every_seconds;
    if step_index > 0 && (by_steps || by_time) {
        CheckpointDecision::Timed
    } else {
        CheckpointDecision::No
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub before_step: u64,
    pub decision: CheckpointDecision,
    pub dir: Option<PathBuf>,
    pub complete: bool,
    pub throughput: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub steps_done: u64,
    pub final_step: u64,
    pub checkpoints: Vec<CheckpointRecord>,
    pub step_seconds: Vec<f64>,
    pub retire_seconds: Vec<f64>,
}

pub fn read_dir(state_root: &Path) -> PathBuf {
    state_root.join(READ_DIR)
}

pub fn write_dir(state_root: &Path) -> PathBuf {
    state_root.join(WRITE_DIR)
}

fn is_complete(dir: &Path) -> bool {
    meta_path(dir).is_file()
}

fn ensure_dir(dir: &Path) -> Result<(), DriverError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Creates `read/` and `write/` under `state_root` (both empty).
pub fn create_layout(state_root: &Path) -> Result<(), DriverError> {
    ensure_dir(&read_dir(state_root))?;
    ensure_dir(&write_dir(state_root))
}

/// Fails unless `read/` and `write/` exist on the same file system.
pub fn check_layout(state_root: &Path) -> Result<(), DriverError> {
    let r = read_dir(state_root);
    let w = write_dir(state_root);
    let dev = |p: &Path| -> Result<u64, DriverError> {
        match fs::metadata(p) {
            Ok(m) if m.is_dir() => Ok(m.dev()),
            Ok(_) => Err(DriverError::Layout(format!("{} is not a directory", p.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(DriverError::Layout(format!("{} is missing", p.display())))
            }
            Err(e) => Err(io_err(p)(e)),
        }
    };
    if dev(&r)? != dev(&w)? {
        return Err(DriverError::CrossDevice { from: w, to: r });
    }
    Ok(())
}

/// Points in the retire sequence where a crash can be injected. A retire
/// stopped at a point has completed everything before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetirePoint {
    AfterSentinel,
    AfterReadMetaRemoved,
    AfterReadDeleted,
    AfterRename,
    AfterSentinelRemoved,
}

impl RetirePoint {
    pub const ALL: [RetirePoint; 5] = [
        RetirePoint::AfterSentinel,
        RetirePoint::AfterReadMetaRemoved,
        RetirePoint::AfterReadDeleted,
        RetirePoint::AfterRename,
        RetirePoint::AfterSentinelRemoved,
    ];
}

/// Replaces `read/` with the completed `write/` and recreates an empty
/// `write/`.
pub fn retire_state(state_root: &Path) -> Result<(), DriverError> {
    retire_state_until(state_root, None)
}

/// [`retire_state`] that stops with [`DriverError::InjectedCrash`] at
/// `crash_at`, leaving the state root as a real crash would.
pub fn retire_state_until(state_root: &Path, crash_at: Option<RetirePoint>) -> Result<(), DriverError> {
    let r = read_dir(state_root);
    let w = write_dir(state_root);
    let sentinel = state_root.join(SENTINEL);
    if !is_complete(&w) {
        return Err(DriverError::WriteIncomplete(w));
    }
    if !r.is_dir() {
        return Err(DriverError::Layout(format!("{} is missing", r.display())));
    }
    let checkpoint = |p: RetirePoint| -> Result<(), DriverError> {
        if crash_at == Some(p) {
            Err(DriverError::InjectedCrash(p))
        } else {
            Ok(())
        }
    };
    fs::File::create(&sentinel)
        .and_then(|f| f.sync_all())
        .map_err(io_err(&sentinel))?;
    checkpoint(RetirePoint::AfterSentinel)?;
    let r_meta = meta_path(&r);
    match fs::remove_file(&r_meta) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(io_err(&r_meta)(e)),
    }
    checkpoint(RetirePoint::AfterReadMetaRemoved)?;
    fs::remove_dir_all(&r).map_err(io_err(&r))?;
    checkpoint(RetirePoint::AfterReadDeleted)?;
    rename_dir(&w, &r)?;
    checkpoint(RetirePoint::AfterRename)?;
    fs::remove_file(&sentinel).map_err(io_err(&sentinel))?;
    checkpoint(RetirePoint::AfterSentinelRemoved)?;
    ensure_dir(&w)
}

fn rename_dir(from: &Path, to: &Path) -> Result<(), DriverError> {
    fs::rename(from, to).map_err(|e| {
        if e.raw_os_error() == Some(libc::EXDEV) {
            DriverError::CrossDevice {
                from: from.to_path_buf(),
                to: to.to_path_buf(),
            }
        } else {
            io_err(from)(e)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recovery {
    /// Nothing to do beyond (re)creating `write/`.
    Clean,
    /// An interrupted retire was completed.
    FinishedRetire,
}

/// Brings a state root back to "complete `read/`, existing `write/`" after
/// a crash anywhere in the retire sequence.
pub fn recover(state_root: &Path) -> Result<Recovery, DriverError> {
    let r = read_dir(state_root);
    let w = write_dir(state_root);
    let sentinel = state_root.join(SENTINEL);
    if sentinel.exists() {
        if is_complete(&w) {
            if r.exists() {
                fs::remove_dir_all(&r).map_err(io_err(&r))?;
            }
            rename_dir(&w, &r)?;
        } else if !is_complete(&r) {
            return Err(DriverError::NoCompleteState(state_root.to_path_buf()));
        }
        fs::remove_file(&sentinel).map_err(io_err(&sentinel))?;
        ensure_dir(&w)?;
        return Ok(Recovery::FinishedRetire);
    }
    if !is_complete(&r) {
        return Err(DriverError::NoCompleteState(state_root.to_path_buf()));
    }
    ensure_dir(&w)?;
    Ok(Recovery::Clean)
}

/// Runs one step from `read/` into `write/`, in-process or as a child.
pub fn run_step(cfg: &RunConfig, buf: &SlabBuffer) -> Result<StateMetadata, DriverError> {
    let root = &cfg.state_root;
    let r = read_dir(root);
    let w = write_dir(root);
    let before = read_metadata(&r)?;
    let fail = |message: String| DriverError::StepFailed {
        step: before.step,
        steps_done: 0,
        message,
    };
    if cfg.in_process {
        return sim_kernel::step(buf, &r, &w, &cfg.params).map_err(|e| fail(e.to_string()));
    }
    let params_path = root.join(PARAMS_FILE);
    cfg.params.write_file(&params_path)?;
    let exe = match &cfg.step_exe {
        Some(p) => p.clone(),
        None => std::env::current_exe().map_err(|e| fail(format!("locating executable: {e}")))?,
    };
    let output = Command::new(&exe)
        .arg("step")
        .arg("--read")
        .arg(&r)
        .arg("--write")
        .arg(&w)
        .arg("--params")
        .arg(&params_path)
        .env(RAMDISK_PREFIX_ENV, cfg.ramdisk.prefixes().join(":"))
        .output()
        .map_err(|e| fail(format!("spawning {}: {e}", exe.display())))?;
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        let last = stderr.lines().last().unwrap_or("").to_string();
        return Err(fail(format!("{} ({})", last, output.status)));
    }
    Ok(read_metadata(&w)?)
}

/// Copies `read/` to a new checkpoint and applies retention.
pub fn checkpoint_now(cfg: &RunConfig) -> Result<checkpoint::CopyOutcome, DriverError> {
    let r = read_dir(&cfg.state_root);
    let outcome = checkpoint::copy_state(&r, &cfg.checkpoint_dest, cfg.copy_deadline(), cfg.copy_workers)?;
    let deleted = checkpoint::apply_retention(&cfg.checkpoint_dest, cfg.keep_k)?;
    for d in deleted {
        log::info!("retention removed {}", d.display());
    }
    Ok(outcome)
}

/// The main loop. Stops at the first failing step with `read/` intact.
pub fn run(cfg: &RunConfig) -> Result<RunReport, DriverError> {
    cfg.validate()?;
    let root = &cfg.state_root;
    ensure_dir(&write_dir(root))?;
    if let Recovery::FinishedRetire = recover(root)? {
        log::warn!("finished an interrupted retire in {}", root.display());
    }
    check_layout(root)?;
    let buf = SlabBuffer::new(ArenaAllocator::new(), cfg.ramdisk.clone());
    let mut report = RunReport::default();
    let mut last_checkpoint = Instant::now();

    for _ in 0..cfg.steps {
        let r = read_dir(root);
        let meta = read_metadata(&r)?;
        let flagged = cfg.conditional_on_analysis && sim_kernel::analysis_marked(&r)?;
        let decision = should_checkpoint(meta.step, last_checkpoint.elapsed(), flagged, cfg);
        if decision != CheckpointDecision::No {
            let record = match checkpoint_now(cfg) {
                Ok(out) => {
                    if out.manifest.complete {
                        last_checkpoint = Instant::now();
                        log::info!(
                            "checkpoint {} ({:?}): {} bytes in {:.3} s, {:.3e} B/s",
                            out.dir.display(),
                            decision,
                            out.manifest.total_bytes,
                            out.manifest.copy_seconds,
                            out.manifest.throughput()
                        );
                    } else {
                        log::error!(
                            "checkpoint {} is partial: {}",
                            out.dir.display(),
                            out.failure.as_deref().unwrap_or("unknown")
                        );
                    }
                    CheckpointRecord {
                        before_step: meta.step,
                        decision,
                        throughput: out.manifest.throughput(),
                        complete: out.manifest.complete,
                        dir: Some(out.dir),
                        failure: out.failure,
                    }
                }
                Err(e) => {
                    log::error!("checkpoint before step {} failed: {e}", meta.step);
                    CheckpointRecord {
                        before_step: meta.step,
                        decision,
                        dir: None,
                        complete: false,
                        throughput: 0.0,
                        failure: Some(e.to_string()),
                    }
                }
            };
            report.checkpoints.push(record);
        }

        let t = Instant::now();
        if let Err(err) = run_step(cfg, &buf) {
            return Err(match err {
                DriverError::StepFailed { step, message, .. } => DriverError::StepFailed {
                    step,
                    steps_done: report.steps_done,
                    message,
                },
                other => other,
            });
        }
        report.step_seconds.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        retire_state(root)?;
        report.retire_seconds.push(t.elapsed().as_secs_f64());
        report.steps_done += 1;
    }
    report.final_step = read_metadata(&read_dir(root))?.step;
    Ok(report)
}

/// Replaces the state under `state_root` with a verified checkpoint.
pub fn restore(checkpoint_dir: &Path, state_root: &Path) -> Result<StateMetadata, DriverError> {
    let report = checkpoint::verify(checkpoint_dir);
    if !report.ok {
        return Err(DriverError::CorruptCheckpoint {
            dir: checkpoint_dir.to_path_buf(),
            failures: report
                .mismatches
                .iter()
                .map(|m| format!("{}: {}", m.rel_path, m.reason))
                .collect(),
        });
    }
    let manifest = CheckpointManifest::read(checkpoint_dir)?;
    ensure_dir(state_root)?;
    let staging = state_root.join(STAGING_DIR);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    ensure_dir(&staging)?;
    // Metadata last: a staged directory with `meta` is complete.
    let mut files: Vec<_> = manifest
        .files
        .iter()
        .filter(|f| f.rel_path != MANIFEST_FILE && f.rel_path != COMPLETE_MARKER)
        .collect();
    files.sort_by_key(|f| f.rel_path == crate::state_format::META_FILE);
    for f in files {
        let from = checkpoint_dir.join(&f.rel_path);
        let to = staging.join(&f.rel_path);
        fs::copy(&from, &to).map_err(io_err(&from))?;
        let (size, digest) = checkpoint::digest_file(&to).map_err(io_err(&to))?;
        if size != f.size || digest != f.digest {
            return Err(DriverError::CorruptCheckpoint {
                dir: checkpoint_dir.to_path_buf(),
                failures: vec![format!("{}: changed while restoring", f.rel_path)],
            });
        }
    }
    let r = read_dir(state_root);
    let w = write_dir(state_root);
    let sentinel = state_root.join(SENTINEL);
    if sentinel.exists() {
        fs::remove_file(&sentinel).map_err(io_err(&sentinel))?;
    }
    for d in [&r, &w] {
        if d.exists() {
            fs::remove_dir_all(d).map_err(io_err(d))?;
        }
    }
    rename_dir(&staging, &r)?;
    ensure_dir(&w)?;
    Ok(read_metadata(&r)?)
}
