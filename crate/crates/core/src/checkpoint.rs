//! Checkpoints are plain copies of a state directory.
//!
//! `copy_state` copies every file of the state into
//! `<dest_root>/ckpt_<step>_<timestamp>/` with a pool of workers, writes a
//! `manifest` listing sizes and xxHash64 digests, re-reads the copies, and
//! only then creates the empty `COMPLETE` marker. A checkpoint without the
//! marker is partial and must never be trusted or preferred.
//!
//! Retention never removes the newest complete checkpoint.

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;
use xxhash_rust::xxh64::{xxh64, Xxh64};

use crate::keyval::{fmt_real, KeyValDoc, KeyValError};
use crate::state_format::{read_metadata, FormatError};

pub const MANIFEST_FILE: &str = "manifest";
pub const COMPLETE_MARKER: &str = "COMPLETE";
pub const CHECKPOINT_PREFIX: &str = "ckpt_";
pub const CHUNK_SIZE: usize = 8 << 20;
pub const MAX_DEFAULT_WORKERS: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("source state: {0}")]
    Source(#[from] FormatError),
    #[error("manifest: {0}")]
    Manifest(#[from] KeyValError),
    #[error("manifest: {0}")]
    BadManifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestFile {
    pub rel_path: String,
    pub size: u64,
    pub digest: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    /// RFC 3339 / ISO 8601, UTC, nanoseconds.
    pub created_at: String,
    pub source_step: u64,
    pub files: Vec<ManifestFile>,
    pub total_bytes: u64,
    pub copy_seconds: f64,
    /// Whether the `COMPLETE` marker exists; not part of the manifest text.
    pub complete: bool,
}

impl CheckpointManifest {
    /// Bytes per second of the copy phase.
    pub fn throughput(&self) -> f64 {
        if self.copy_seconds > 0.0 {
            self.total_bytes as f64 / self.copy_seconds
        } else {
            0.0
        }
    }

    pub fn to_text(&self) -> String {
        let mut doc = KeyValDoc::new();
        doc.push("format_version", 1);
        doc.push("created_at", &self.created_at);
        doc.push("source_step", self.source_step);
        doc.push("total_bytes", self.total_bytes);
        doc.push("copy_seconds", fmt_real(self.copy_seconds));
        for f in &self.files {
            doc.push("file", format!("{} {:016x} {}", f.size, f.digest, f.rel_path));
        }
        let body = doc.to_text();
        let seal = seal_line(&body);
        body + &seal
    }

    /// Parses a manifest. The final `manifest_digest` line must match the
    /// text before it byte for byte, so any edit to the manifest is caught.
    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let start = match text.rfind(&format!("\n{SEAL_KEY} = ")) {
            Some(i) => i + 1,
            None if text.starts_with(SEAL_KEY) => 0,
            None => return Err(CheckpointError::BadManifest(format!("missing {SEAL_KEY}"))),
        };
        let (body, seal) = text.split_at(start);
        if seal != seal_line(body) {
            return Err(CheckpointError::BadManifest(format!(
                "{SEAL_KEY} does not match manifest contents"
            )));
        }
        let doc = KeyValDoc::parse(body)?;
        doc.check_known(&[
            "format_version",
            "created_at",
            "source_step",
            "total_bytes",
            "copy_seconds",
            "file",
        ])?;
        let version: u32 = doc.require_parsed("format_version")?;
        if version != 1 {
            return Err(CheckpointError::BadManifest(format!(
                "unknown format_version {version}"
            )));
        }
        let mut files = Vec::new();
        for e in doc.all("file") {
            let mut parts = e.value.splitn(3, ' ');
            let (Some(size), Some(digest), Some(rel)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(e.invalid("expected `<size> <digest> <relpath>`").into());
            };
            files.push(ManifestFile {
                rel_path: rel.to_string(),
                size: size.parse().map_err(|err| e.invalid(err))?,
                digest: u64::from_str_radix(digest, 16).map_err(|err| e.invalid(err))?,
            });
        }
        Ok(Self {
            created_at: doc.require("created_at")?.value.clone(),
            source_step: doc.require_parsed("source_step")?,
            total_bytes: doc.require_parsed("total_bytes")?,
            copy_seconds: doc.require_parsed("copy_seconds")?,
            files,
            complete: false,
        })
    }

    pub fn read(checkpoint_dir: &Path) -> Result<Self, CheckpointError> {
        let path = checkpoint_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut manifest = Self::from_text(&text)?;
        manifest.complete = checkpoint_dir.join(COMPLETE_MARKER).is_file();
        Ok(manifest)
    }
}

const SEAL_KEY: &str = "manifest_digest";

fn seal_line(body: &str) -> String {
    format!("{SEAL_KEY} = {:016x}\n", xxh64(body.as_bytes(), 0))
}

/// Size and xxHash64 (seed 0) of a file, streamed.
pub fn digest_file(path: &Path) -> io::Result<(u64, u64)> {
    let mut file = File::open(path)?;
    let mut hasher = Xxh64::new(0);
    let mut buf = vec![0u8; 1 << 20];
    let mut size = 0u64;
    loop {
        let n = match file.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        hasher.update(&buf[..n]);
        size += n as u64;
    }
    Ok((size, hasher.digest()))
}

pub fn default_workers() -> usize {
    thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(MAX_DEFAULT_WORKERS)
}

/// Result of [`copy_state`].
#[derive(Debug, Clone)]
pub struct CopyOutcome {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
    /// Why the checkpoint is partial, if it is.
    pub failure: Option<String>,
}

static LAST_STAMP: Mutex<Option<DateTime<Utc>>> = Mutex::new(None);

/// Wall-clock timestamp, strictly increasing within this process.
fn next_timestamp() -> DateTime<Utc> {
    let mut last = LAST_STAMP.lock().unwrap_or_else(|e| e.into_inner());
    let mut now = Utc::now();
    if let Some(prev) = *last {
        if now <= prev {
            now = prev + chrono::Duration::nanoseconds(1);
        }
    }
    *last = Some(now);
    now
}

/// `20261016T120304.123456789Z`: fixed width, so names sort by time.
fn dir_stamp(t: &DateTime<Utc>) -> String {
    t.format("%Y%m%dT%H%M%S%.9fZ").to_string()
}

fn list_source(src: &Path) -> Result<Vec<(String, u64)>, CheckpointError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(src).map_err(io_err(src))? {
        let entry = entry.map_err(io_err(src))?;
        let meta = entry.metadata().map_err(io_err(&entry.path()))?;
        if meta.is_file() {
            files.push((entry.file_name().to_string_lossy().into_owned(), meta.len()));
        }
    }
    files.sort();
    Ok(files)
}

enum CopyFail {
    Deadline,
    Io(String),
}

fn copy_one(
    src: &Path,
    dst: &Path,
    start: Instant,
    deadline: Duration,
    abort: &AtomicBool,
) -> Result<ManifestFile, CopyFail> {
    let io = |what: &str, p: &Path, e: io::Error| CopyFail::Io(format!("{what} {}: {e}", p.display()));
    let mut input = File::open(src).map_err(|e| io("open", src, e))?;
    let mut output = File::create(dst).map_err(|e| io("create", dst, e))?;
    let mut hasher = Xxh64::new(0);
    let mut buf = vec![0u8; CHUNK_SIZE];
    let mut size = 0u64;
    loop {
        if abort.load(Ordering::Relaxed) {
            return Err(CopyFail::Deadline);
        }
        if start.elapsed() >= deadline {
            return Err(CopyFail::Deadline);
        }
        // Fill a whole chunk (or hit EOF) before checking the clock again.
        let mut filled = 0;
        while filled < buf.len() {
            match input.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(io("read", src, e)),
            }
        }
        if filled == 0 {
            break;
        }
        hasher.update(&buf[..filled]);
        output
            .write_all(&buf[..filled])
            .map_err(|e| io("write", dst, e))?;
        size += filled as u64;
    }
    output.sync_all().map_err(|e| io("sync", dst, e))?;
    Ok(ManifestFile {
        rel_path: src.file_name().unwrap().to_string_lossy().into_owned(),
        size,
        digest: hasher.digest(),
    })
}

/// Copies the state in `src` to a new checkpoint directory under
/// `dest_root`.
///
/// Deadline overrun or a per-file I/O error yields a partial checkpoint
/// (`complete == false`, no marker) rather than an error. The deadline is
/// checked between chunks of [`CHUNK_SIZE`] bytes.
pub fn copy_state(
    src: &Path,
    dest_root: &Path,
    deadline: Duration,
    workers: usize,
) -> Result<CopyOutcome, CheckpointError> {
    let meta = read_metadata(src)?;
    let sources = list_source(src)?;
    fs::create_dir_all(dest_root).map_err(io_err(dest_root))?;
    let (created, dir) = loop {
        let t = next_timestamp();
        let dir = dest_root.join(format!("{CHECKPOINT_PREFIX}{}_{}", meta.step, dir_stamp(&t)));
        match fs::create_dir(&dir) {
            Ok(()) => break (t, dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    };

    let start = Instant::now();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let results: Mutex<Vec<Option<ManifestFile>>> = Mutex::new(vec![None; sources.len()]);
    let failure: Mutex<Option<String>> = Mutex::new(None);
    let workers = workers.clamp(1, sources.len().max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= sources.len() || abort.load(Ordering::Relaxed) {
                    break;
                }
                let name = &sources[i].0;
                match copy_one(&src.join(name), &dir.join(name), start, deadline, &abort) {
                    Ok(file) => results.lock().unwrap()[i] = Some(file),
                    Err(fail) => {
                        abort.store(true, Ordering::Relaxed);
                        let msg = match fail {
                            CopyFail::Deadline => {
                                format!("deadline of {:?} exceeded", deadline)
                            }
                            CopyFail::Io(msg) => msg,
                        };
                        failure.lock().unwrap().get_or_insert(msg);
                        break;
                    }
                }
            });
        }
    });
    let copy_seconds = start.elapsed().as_secs_f64();
    let mut failure = failure.into_inner().unwrap();
    if failure.is_none() && start.elapsed() >= deadline {
        failure = Some(format!("deadline of {deadline:?} exceeded"));
    }
    let files: Vec<ManifestFile> = results.into_inner().unwrap().into_iter().flatten().collect();
    let mut manifest = CheckpointManifest {
        created_at: created.to_rfc3339_opts(SecondsFormat::Nanos, true),
        source_step: meta.step,
        total_bytes: files.iter().map(|f| f.size).sum(),
        files,
        copy_seconds,
        complete: false,
    };

    if failure.is_none() {
        let report = verify_files(&dir, &manifest);
        if let Some(m) = report.first() {
            failure = Some(format!("verification failed: {}: {}", m.rel_path, m.reason));
        }
    }
    write_synced(&dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    if failure.is_none() {
        write_synced(&dir.join(COMPLETE_MARKER), b"")?;
        manifest.complete = true;
    }
    Ok(CopyOutcome {
        dir,
        manifest,
        failure,
    })
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub rel_path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub ok: bool,
    pub complete: bool,
    pub mismatches: Vec<Mismatch>,
}

fn verify_files(dir: &Path, manifest: &CheckpointManifest) -> Vec<Mismatch> {
    let mut out = Vec::new();
    for f in &manifest.files {
        let reason = match digest_file(&dir.join(&f.rel_path)) {
            Err(e) => Some(format!("unreadable: {e}")),
            Ok((size, _)) if size != f.size => Some(format!("size {size}, manifest says {}", f.size)),
            Ok((_, digest)) if digest != f.digest => Some(format!(
                "digest {digest:016x}, manifest says {:016x}",
                f.digest
            )),
            Ok(_) => None,
        };
        if let Some(reason) = reason {
            out.push(Mismatch {
                rel_path: f.rel_path.clone(),
                reason,
            });
        }
    }
    out
}

/// Recomputes every listed file's size and digest. Never fails: problems
/// are report entries.
pub fn verify(checkpoint_dir: &Path) -> VerifyReport {
    let complete = checkpoint_dir.join(COMPLETE_MARKER).is_file();
    let manifest = match CheckpointManifest::read(checkpoint_dir) {
        Ok(m) => m,
        Err(e) => {
            return VerifyReport {
                ok: false,
                complete,
                mismatches: vec![Mismatch {
                    rel_path: MANIFEST_FILE.into(),
                    reason: e.to_string(),
                }],
            }
        }
    };
    let mut mismatches = verify_files(checkpoint_dir, &manifest);
    let total: u64 = manifest.files.iter().map(|f| f.size).sum();
    if total != manifest.total_bytes {
        mismatches.push(Mismatch {
            rel_path: MANIFEST_FILE.into(),
            reason: format!("total_bytes {} but files sum to {total}", manifest.total_bytes),
        });
    }
    if !complete {
        mismatches.push(Mismatch {
            rel_path: COMPLETE_MARKER.into(),
            reason: "incomplete".into(),
        });
    }
    VerifyReport {
        ok: mismatches.is_empty(),
        complete,
        mismatches,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointEntry {
    pub dir: PathBuf,
    pub step: u64,
    pub stamp: String,
    pub complete: bool,
}

/// Checkpoint directories under `dest_root`, oldest first.
pub fn list_checkpoints(dest_root: &Path) -> Result<Vec<CheckpointEntry>, CheckpointError> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dest_root) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(io_err(dest_root)(e)),
    };
    for entry in entries {
        let entry = entry.map_err(io_err(dest_root))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some((step, stamp)) = name
            .strip_prefix(CHECKPOINT_PREFIX)
            .and_then(|rest| rest.split_once('_'))
        else {
            continue;
        };
        let Ok(step) = step.parse() else { continue };
        let dir = entry.path();
        if !dir.is_dir() {
            continue;
        }
        out.push(CheckpointEntry {
            complete: dir.join(COMPLETE_MARKER).is_file(),
            stamp: stamp.to_string(),
            step,
            dir,
        });
    }
    out.sort_by(|a, b| a.stamp.cmp(&b.stamp).then_with(|| a.dir.cmp(&b.dir)));
    Ok(out)
}

pub fn newest_complete(dest_root: &Path) -> Result<Option<CheckpointEntry>, CheckpointError> {
    Ok(list_checkpoints(dest_root)?
        .into_iter()
        .rev()
        .find(|c| c.complete))
}

/// Deletes partial checkpoints older than the newest complete one, and
/// complete checkpoints beyond the newest `keep_k`. With no complete
/// checkpoint nothing is deleted.
pub fn apply_retention(dest_root: &Path, keep_k: usize) -> Result<Vec<PathBuf>, CheckpointError> {
    let keep_k = keep_k.max(1);
    let all = list_checkpoints(dest_root)?;
    let Some(anchor) = all.iter().rposition(|c| c.complete) else {
        return Ok(vec![]);
    };
    let mut doomed = Vec::new();
    let mut complete_seen = 0;
    for (i, c) in all.iter().enumerate().rev() {
        if c.complete {
            complete_seen += 1;
            if complete_seen > keep_k {
                doomed.push(c.dir.clone());
            }
        } else if i < anchor {
            doomed.push(c.dir.clone());
        }
    }
    for dir in &doomed {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(doomed)
}
