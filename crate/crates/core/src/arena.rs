//! The arena allocator.
//!
//! Persistent allocations are files in a shared-memory (tmpfs) directory,
//! mapped into the address space rather than read: `open`, `ftruncate` when
//! creating, then `mmap(MAP_SHARED)`. Transient allocations come from
//! `malloc`. Every arena is tracked by the allocator's registry until it is
//! released.
//!
//! Releasing a shared arena on tmpfs is where the cost lives: the pages are
//! only returned to the kernel once both the file name and the last mapping
//! are gone, so whichever of `unlink`/`munmap` happens second pays for it.
//! [`ReleasePolicy`] selects the ordering, and every release is timed.

use std::collections::HashMap;
use std::ffi::CString;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::FileExt;
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};
use std::ptr::NonNull;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArenaError {
    #[error("arena length must be > 0")]
    ZeroLength,
    #[error("shared memory exhausted: cannot back {requested} bytes at {path} ({available} available)")]
    Exhausted {
        path: PathBuf,
        requested: u64,
        available: u64,
    },
    #[error("{path}: file is {actual} bytes, expected {expected}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("private allocation of {0} bytes failed")]
    OutOfMemory(usize),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("release result already consumed")]
    AlreadyConsumed,
    #[error("arena is mapped read-only")]
    ReadOnly,
    #[error("{op} {path}: {source}")]
    Io {
        op: &'static str,
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ArenaError {
    fn io(op: &'static str, path: &Path, source: io::Error) -> Self {
        ArenaError::Io {
            op,
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArenaId(u64);

impl fmt::Display for ArenaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "arena#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backing {
    SharedFile { path: PathBuf },
    Private,
}

impl Backing {
    pub fn is_shared(&self) -> bool {
        matches!(self, Backing::SharedFile { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArenaStatus {
    Mapped,
    Released,
    DeferredRelease,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    CreateWrite,
    ReadOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReleasePolicy {
    /// Remove the file name, then unmap. The unmap frees the pages.
    UnlinkThenUnmap,
    /// Unmap, then remove the file name. The unlink frees the pages.
    UnmapThenUnlink,
    /// Unmap only; the file outlives the arena (write-state slabs).
    UnmapKeepFile,
    /// Do nothing now; queue for [`ArenaAllocator::drain_deferred`].
    DeferUnmap,
    /// `free()` a private arena.
    PrivateFree,
}

impl ReleasePolicy {
    pub const ALL: [ReleasePolicy; 5] = [
        ReleasePolicy::UnlinkThenUnmap,
        ReleasePolicy::UnmapThenUnlink,
        ReleasePolicy::UnmapKeepFile,
        ReleasePolicy::DeferUnmap,
        ReleasePolicy::PrivateFree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReleasePolicy::UnlinkThenUnmap => "UnlinkThenUnmap",
            ReleasePolicy::UnmapThenUnlink => "UnmapThenUnlink",
            ReleasePolicy::UnmapKeepFile => "UnmapKeepFile",
            ReleasePolicy::DeferUnmap => "DeferUnmap",
            ReleasePolicy::PrivateFree => "PrivateFree",
        }
    }

    pub fn applies_to(self, backing: &Backing) -> bool {
        (self == ReleasePolicy::PrivateFree) != backing.is_shared()
    }
}

impl fmt::Display for ReleasePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ReleasePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReleasePolicy::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown release policy {s:?}"))
    }
}

/// Phase timings of one release, measured with a monotonic clock.
///
/// `*_start` fields are offsets from the beginning of the release; a phase
/// that did not run has zero duration and no start offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReleaseTiming {
    pub policy: ReleasePolicy,
    pub length: u64,
    pub unlink: Duration,
    pub unmap: Duration,
    pub total: Duration,
    pub unlink_start: Option<Duration>,
    pub unmap_start: Option<Duration>,
    pub outcome: ArenaStatus,
}

impl ReleaseTiming {
    fn new(policy: ReleasePolicy, length: u64) -> Self {
        Self {
            policy,
            length,
            unlink: Duration::ZERO,
            unmap: Duration::ZERO,
            total: Duration::ZERO,
            unlink_start: None,
            unmap_start: None,
            outcome: ArenaStatus::Released,
        }
    }

    pub fn unlink_seconds(&self) -> f64 {
        self.unlink.as_secs_f64()
    }

    pub fn unmap_seconds(&self) -> f64 {
        self.unmap.as_secs_f64()
    }

    pub fn total_seconds(&self) -> f64 {
        self.total.as_secs_f64()
    }
}

/// Snapshot of the registry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RegistryReport {
    pub live_arenas: usize,
    pub shared_bytes: u64,
    pub private_bytes: u64,
    /// Included in the live totals above.
    pub deferred_arenas: usize,
    pub deferred_bytes: u64,
}

impl RegistryReport {
    pub fn total_bytes(&self) -> u64 {
        self.shared_bytes + self.private_bytes
    }
}

pub fn page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    let n = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if n > 0 {
        n as usize
    } else {
        4096
    }
}

enum Region {
    Mapped {
        ptr: NonNull<u8>,
        len: usize,
        writable: bool,
    },
    Private {
        ptr: NonNull<u8>,
        len: usize,
    },
}

impl Region {
    fn ptr_len(&self) -> (NonNull<u8>, usize) {
        match *self {
            Region::Mapped { ptr, len, .. } | Region::Private { ptr, len } => (ptr, len),
        }
    }

    /// Returns the memory to the system.
    ///
    /// # Safety
    /// Must be called at most once; the region must not be used afterwards.
    unsafe fn free(&self) {
        match *self {
            Region::Mapped { ptr, len, .. } => {
                libc::munmap(ptr.as_ptr().cast(), len);
            }
            Region::Private { ptr, .. } => libc::free(ptr.as_ptr().cast()),
        }
    }
}

/// A live allocation. Releasing it consumes the value, so a released region
/// can never be touched again.
pub struct Arena {
    id: ArenaId,
    length: u64,
    backing: Backing,
    region: Region,
    owner: Arc<Shared>,
    freed: bool,
}

// SAFETY: the region is exclusively owned by the Arena; mutation requires
// `&mut self`.
unsafe impl Send for Arena {}
unsafe impl Sync for Arena {}

impl fmt::Debug for Arena {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Arena")
            .field("id", &self.id)
            .field("length", &self.length)
            .field("backing", &self.backing)
            .finish()
    }
}

impl Arena {
    pub fn id(&self) -> ArenaId {
        self.id
    }

    pub fn len(&self) -> u64 {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn backing(&self) -> &Backing {
        &self.backing
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.backing {
            Backing::SharedFile { path } => Some(path),
            Backing::Private => None,
        }
    }

    pub fn is_writable(&self) -> bool {
        match self.region {
            Region::Mapped { writable, .. } => writable,
            Region::Private { .. } => true,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        let (ptr, len) = self.region.ptr_len();
        // SAFETY: the region is valid for `len` bytes while the arena lives.
        unsafe { std::slice::from_raw_parts(ptr.as_ptr(), len) }
    }

    pub fn bytes_mut(&mut self) -> Result<&mut [u8], ArenaError> {
        if !self.is_writable() {
            return Err(ArenaError::ReadOnly);
        }
        let (ptr, len) = self.region.ptr_len();
        // SAFETY: writable region, exclusively borrowed.
        Ok(unsafe { std::slice::from_raw_parts_mut(ptr.as_ptr(), len) })
    }

    /// Writes one byte in every page so that all pages are populated.
    pub fn touch_pages(&mut self) -> Result<(), ArenaError> {
        let page = page_size();
        let bytes = self.bytes_mut()?;
        let mut off = 0;
        while off < bytes.len() {
            // SAFETY: in-bounds write; volatile so the fault is not elided.
            unsafe { std::ptr::write_volatile(bytes.as_mut_ptr().add(off), 1u8) };
            off += page;
        }
        Ok(())
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        // An arena dropped without an explicit release behaves like process
        // exit: memory is returned, files are left in place.
        if !self.freed {
            // SAFETY: not yet freed, and never used again.
            unsafe { self.region.free() };
            self.freed = true;
            self.owner.registry().forget(self.id);
        }
    }
}

struct DeferredEntry {
    id: ArenaId,
    length: u64,
    path: PathBuf,
    region: Region,
}

// SAFETY: the entry owns its region outright.
unsafe impl Send for DeferredEntry {}

impl Drop for DeferredEntry {
    fn drop(&mut self) {
        // SAFETY: entries are dropped exactly once, after draining or at
        // allocator teardown.
        unsafe { self.region.free() };
    }
}

#[derive(Default)]
struct Registry {
    live: HashMap<ArenaId, (u64, bool)>,
    deferred: Vec<DeferredEntry>,
}

impl Registry {
    fn forget(&mut self, id: ArenaId) {
        self.live.remove(&id);
    }
}

type Job = (Arena, ReleasePolicy, mpsc::Sender<Result<ReleaseTiming, ArenaError>>);

struct Shared {
    registry: Mutex<Registry>,
    worker: Mutex<Option<mpsc::Sender<Job>>>,
    next_id: AtomicU64,
}

impl Shared {
    fn registry(&self) -> MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Hands out arenas and tracks them. Cloning yields another handle to the
/// same registry.
#[derive(Clone)]
pub struct ArenaAllocator {
    shared: Arc<Shared>,
}

impl Default for ArenaAllocator {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for ArenaAllocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ArenaAllocator")
            .field("report", &self.registry_report())
            .finish()
    }
}

impl ArenaAllocator {
    pub fn new() -> Self {
        Self {
            shared: Arc::new(Shared {
                registry: Mutex::new(Registry::default()),
                worker: Mutex::new(None),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    fn register(&self, length: u64, backing: Backing, region: Region) -> Arena {
        let id = ArenaId(self.shared.next_id.fetch_add(1, Ordering::Relaxed));
        self.shared
            .registry()
            .live
            .insert(id, (length, backing.is_shared()));
        Arena {
            id,
            length,
            backing,
            region,
            owner: Arc::clone(&self.shared),
            freed: false,
        }
    }

    /// Maps a shared-memory file. `CreateWrite` creates (or truncates) the
    /// file and sizes it to exactly `length` bytes; `ReadOnly` requires the
    /// file to already have that size. No file data is copied.
    pub fn map_shared(
        &self,
        path: &Path,
        length: u64,
        mode: MapMode,
    ) -> Result<Arena, ArenaError> {
        if length == 0 {
            return Err(ArenaError::ZeroLength);
        }
        let len = usize::try_from(length).map_err(|_| ArenaError::OutOfMemory(usize::MAX))?;
        let (file, writable) = match mode {
            MapMode::CreateWrite => (create_sized(path, length)?, true),
            MapMode::ReadOnly => {
                let file = File::open(path).map_err(|e| ArenaError::io("open", path, e))?;
                let actual = file
                    .metadata()
                    .map_err(|e| ArenaError::io("stat", path, e))?
                    .len();
                if actual != length {
                    return Err(ArenaError::SizeMismatch {
                        path: path.to_path_buf(),
                        expected: length,
                        actual,
                    });
                }
                (file, false)
            }
        };
        let prot = if writable {
            libc::PROT_READ | libc::PROT_WRITE
        } else {
            libc::PROT_READ
        };
        // SAFETY: valid fd, nonzero length, kernel-chosen address.
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                prot,
                libc::MAP_SHARED,
                file.as_raw_fd(),
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            let err = io::Error::last_os_error();
            if mode == MapMode::CreateWrite {
                let _ = fs::remove_file(path);
            }
            return Err(ArenaError::io("mmap", path, err));
        }
        // The mapping keeps the pages alive; the descriptor is closed here.
        drop(file);
        let region = Region::Mapped {
            ptr: NonNull::new(ptr.cast()).expect("mmap returned null"),
            len,
            writable,
        };
        Ok(self.register(
            length,
            Backing::SharedFile {
                path: path.to_path_buf(),
            },
            region,
        ))
    }

    /// A `malloc` allocation. Contents are unspecified.
    pub fn allocate_private(&self, length: u64) -> Result<Arena, ArenaError> {
        if length == 0 {
            return Err(ArenaError::ZeroLength);
        }
        let len = usize::try_from(length).map_err(|_| ArenaError::OutOfMemory(usize::MAX))?;
        // SAFETY: plain allocation of a nonzero size.
        let ptr = unsafe { libc::malloc(len) };
        let ptr = NonNull::new(ptr.cast()).ok_or(ArenaError::OutOfMemory(len))?;
        Ok(self.register(length, Backing::Private, Region::Private { ptr, len }))
    }

    /// Releases `arena` according to `policy`, timing each phase.
    ///
    /// A policy that does not fit the backing is a usage error; the arena is
    /// then dropped (memory returned, file left in place).
    pub fn release(&self, arena: Arena, policy: ReleasePolicy) -> Result<ReleaseTiming, ArenaError> {
        release_arena(arena, policy)
    }

    /// Queues the release on the allocator's background worker. Releases are
    /// processed one at a time in submission order.
    pub fn release_in_background(&self, arena: Arena, policy: ReleasePolicy) -> ReleaseHandle {
        let (tx, rx) = mpsc::channel();
        let mut worker = self.shared.worker.lock().unwrap_or_else(|e| e.into_inner());
        let sender = worker.get_or_insert_with(spawn_release_worker);
        if let Err(mpsc::SendError((arena, policy, tx))) = sender.send((arena, policy, tx)) {
            // Worker gone (it panicked); release inline instead.
            let _ = tx.send(release_arena(arena, policy));
            *worker = None;
        }
        ReleaseHandle { rx: Some(rx) }
    }

    /// Fully releases (unlink, then unmap) every deferred arena.
    pub fn drain_deferred(&self) -> Vec<ReleaseTiming> {
        let pending = std::mem::take(&mut self.shared.registry().deferred);
        let mut timings = Vec::with_capacity(pending.len());
        for entry in pending {
            let mut timing = ReleaseTiming::new(ReleasePolicy::DeferUnmap, entry.length);
            let start = Instant::now();
            timing.unlink_start = Some(start.elapsed());
            let unlinked = fs::remove_file(&entry.path);
            timing.unlink = start.elapsed() - timing.unlink_start.unwrap();
            if let Err(err) = unlinked {
                log::warn!("drain: unlink {}: {err}", entry.path.display());
            }
            let unmap_start = start.elapsed();
            timing.unmap_start = Some(unmap_start);
            let id = entry.id;
            drop(entry);
            timing.unmap = start.elapsed() - unmap_start;
            timing.total = start.elapsed();
            self.shared.registry().forget(id);
            timings.push(timing);
        }
        timings
    }

    pub fn registry_report(&self) -> RegistryReport {
        let reg = self.shared.registry();
        let mut report = RegistryReport {
            live_arenas: reg.live.len(),
            ..Default::default()
        };
        for &(len, shared) in reg.live.values() {
            if shared {
                report.shared_bytes += len;
            } else {
                report.private_bytes += len;
            }
        }
        report.deferred_arenas = reg.deferred.len();
        report.deferred_bytes = reg.deferred.iter().map(|e| e.length).sum();
        report
    }
}

fn create_sized(path: &Path, length: u64) -> Result<File, ArenaError> {
    let file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(true)
        .open(path)
        .map_err(|e| ArenaError::io("open", path, e))?;
    let fail = |err: ArenaError| {
        let _ = fs::remove_file(path);
        err
    };
    if let Some(available) = free_bytes(path) {
        if available < length {
            return Err(fail(ArenaError::Exhausted {
                path: path.to_path_buf(),
                requested: length,
                available,
            }));
        }
    }
    file.set_len(length)
        .map_err(|e| fail(exhausted_or_io("ftruncate", path, length, e)))?;
    // tmpfs accepts any size at ftruncate time and fails only on first touch;
    // writing the last byte surfaces over-commit now.
    file.write_at(&[0], length - 1)
        .map_err(|e| fail(exhausted_or_io("probe write", path, length, e)))?;
    Ok(file)
}

fn exhausted_or_io(op: &'static str, path: &Path, requested: u64, err: io::Error) -> ArenaError {
    if matches!(err.raw_os_error(), Some(libc::ENOSPC) | Some(libc::EFBIG)) {
        ArenaError::Exhausted {
            path: path.to_path_buf(),
            requested,
            available: free_bytes(path).unwrap_or(0),
        }
    } else {
        ArenaError::io(op, path, err)
    }
}

/// Free bytes on the file system holding `path`, if it can be queried.
pub fn free_bytes(path: &Path) -> Option<u64> {
    let probe = if path.is_dir() {
        path
    } else {
        path.parent().filter(|p| !p.as_os_str().is_empty())?
    };
    let c = CString::new(probe.as_os_str().as_bytes()).ok()?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: valid C string and out-pointer.
    if unsafe { libc::statvfs(c.as_ptr(), &mut st) } != 0 {
        return None;
    }
    Some(st.f_bavail as u64 * st.f_frsize as u64)
}

fn release_arena(mut arena: Arena, policy: ReleasePolicy) -> Result<ReleaseTiming, ArenaError> {
    if !policy.applies_to(&arena.backing) {
        return Err(ArenaError::Usage(format!(
            "policy {policy} does not apply to {} arena {}",
            if arena.backing.is_shared() { "shared" } else { "private" },
            arena.id
        )));
    }
    let mut timing = ReleaseTiming::new(policy, arena.length);
    let path = arena.path().map(Path::to_path_buf);
    let start = Instant::now();
    let mut unlink_err = None;

    let mut unlink = |timing: &mut ReleaseTiming| {
        let at = start.elapsed();
        timing.unlink_start = Some(at);
        let path = path.as_deref().expect("shared arena has a path");
        if let Err(e) = fs::remove_file(path) {
            unlink_err = Some(ArenaError::io("unlink", path, e));
        }
        timing.unlink = start.elapsed() - at;
    };
    let unmap = |arena: &mut Arena, timing: &mut ReleaseTiming| {
        let at = start.elapsed();
        timing.unmap_start = Some(at);
        // SAFETY: first and only free; `freed` prevents the Drop path.
        unsafe { arena.region.free() };
        arena.freed = true;
        timing.unmap = start.elapsed() - at;
    };

    match policy {
        ReleasePolicy::UnlinkThenUnmap => {
            unlink(&mut timing);
            unmap(&mut arena, &mut timing);
        }
        ReleasePolicy::UnmapThenUnlink => {
            unmap(&mut arena, &mut timing);
            unlink(&mut timing);
        }
        ReleasePolicy::UnmapKeepFile | ReleasePolicy::PrivateFree => {
            unmap(&mut arena, &mut timing);
        }
        ReleasePolicy::DeferUnmap => {
            let region = std::mem::replace(
                &mut arena.region,
                Region::Private {
                    ptr: NonNull::dangling(),
                    len: 0,
                },
            );
            arena.freed = true;
            let entry = DeferredEntry {
                id: arena.id,
                length: arena.length,
                path: path.clone().expect("shared arena has a path"),
                region,
            };
            arena.owner.registry().deferred.push(entry);
            timing.outcome = ArenaStatus::DeferredRelease;
            timing.total = start.elapsed();
            return Ok(timing);
        }
    }
    timing.total = start.elapsed();
    arena.owner.registry().forget(arena.id);
    match unlink_err {
        Some(err) => Err(err),
        None => Ok(timing),
    }
}

fn spawn_release_worker() -> mpsc::Sender<Job> {
    let (tx, rx) = mpsc::channel::<Job>();
    thread::Builder::new()
        .name("arena-release".into())
        .spawn(move || {
            for (arena, policy, reply) in rx {
                let _ = reply.send(release_arena(arena, policy));
            }
        })
        .expect("spawn release worker");
    tx
}

/// Completion handle for a background release. Single consumer: the second
/// `wait` returns [`ArenaError::AlreadyConsumed`].
#[derive(Debug)]
pub struct ReleaseHandle {
    rx: Option<mpsc::Receiver<Result<ReleaseTiming, ArenaError>>>,
}

impl ReleaseHandle {
    pub fn wait(&mut self) -> Result<ReleaseTiming, ArenaError> {
        let rx = self.rx.take().ok_or(ArenaError::AlreadyConsumed)?;
        rx.recv()
            .unwrap_or_else(|_| Err(ArenaError::Usage("release worker exited".into())))
    }
}
