//! Routes slab requests to the arena allocator.
//!
//! A slab whose path lies on the ramdisk is mapped in place; anything else
//! gets a private arena filled by the I/O subsystem. Residency is decided by
//! comparing path prefixes as strings, never by asking the file system.

use std::env;
use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom};
use std::path::{Component, Path, PathBuf};

use thiserror::Error;

use crate::arena::{Arena, ArenaAllocator, ArenaError, MapMode, ReleasePolicy, ReleaseTiming};
use crate::io_subsystem::{self, IoError};
use crate::state_format::{
    self, decode_header, decode_slab, slab_path, FormatError, SlabId, SlabPayload, SlabType,
    HEADER_LEN,
};

pub const DEFAULT_RAMDISK_PREFIX: &str = "/dev/shm/";
pub const RAMDISK_PREFIX_ENV: &str = "SHMSTATE_RAMDISK_PREFIX";

#[derive(Debug, Error)]
pub enum SlabError {
    #[error("slab not found: {path}")]
    NotFound { path: PathBuf },
    #[error("corrupt slab {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Path prefixes that count as ramdisk. Every prefix ends with `/`, so
/// `/dev/shm/` does not match `/dev/shmfoo`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RamdiskConfig {
    prefixes: Vec<String>,
}

impl Default for RamdiskConfig {
    fn default() -> Self {
        Self::new([DEFAULT_RAMDISK_PREFIX])
    }
}

impl RamdiskConfig {
    pub fn new<I, S>(prefixes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let prefixes = prefixes
            .into_iter()
            .map(|p| p.as_ref().trim().to_string())
            .filter(|p| !p.is_empty())
            .map(|p| {
                let mut norm = normalize(Path::new(&p));
                if !norm.ends_with('/') {
                    norm.push('/');
                }
                norm
            })
            .collect();
        Self { prefixes }
    }

    /// Nothing is ramdisk; every slab takes the disk route.
    pub fn disk_only() -> Self {
        Self { prefixes: vec![] }
    }

    /// Default prefixes, overridden by a colon-separated
    /// `SHMSTATE_RAMDISK_PREFIX` when set.
    pub fn from_env() -> Self {
        match env::var(RAMDISK_PREFIX_ENV) {
            Ok(v) => Self::new(v.split(':')),
            Err(_) => Self::default(),
        }
    }

    pub fn prefixes(&self) -> &[String] {
        &self.prefixes
    }
}

/// Lexical normalization: collapses repeated separators and `.` components.
fn normalize(path: &Path) -> String {
    let mut out = String::new();
    for comp in path.components() {
        match comp {
            Component::RootDir => out.push('/'),
            Component::CurDir => {}
            other => {
                if !out.is_empty() && !out.ends_with('/') {
                    out.push('/');
                }
                out.push_str(&other.as_os_str().to_string_lossy());
            }
        }
    }
    out
}

pub fn is_ramdisk(path: &Path, cfg: &RamdiskConfig) -> bool {
    let mut norm = normalize(path);
    if !norm.ends_with('/') {
        norm.push('/');
    }
    cfg.prefixes.iter().any(|p| norm.starts_with(p.as_str()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlabOrigin {
    MappedShared,
    ReadFromDisk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HandleKind {
    Read,
    Write,
}

/// A requested or in-progress slab.
#[derive(Debug)]
pub struct SlabHandle {
    id: SlabId,
    path: PathBuf,
    origin: SlabOrigin,
    kind: HandleKind,
    arena: Option<Arena>,
}

impl SlabHandle {
    pub fn id(&self) -> SlabId {
        self.id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn origin(&self) -> SlabOrigin {
        self.origin
    }

    pub fn is_sealed(&self) -> bool {
        self.arena.is_none()
    }

    pub fn arena(&self) -> Option<&Arena> {
        self.arena.as_ref()
    }

    pub fn bytes(&self) -> &[u8] {
        self.arena.as_ref().map(Arena::bytes).unwrap_or(&[])
    }

    pub fn bytes_mut(&mut self) -> Result<&mut [u8], SlabError> {
        if self.kind != HandleKind::Write {
            return Err(SlabError::Usage("read slabs are immutable".into()));
        }
        let arena = self
            .arena
            .as_mut()
            .ok_or_else(|| SlabError::Usage("slab already sealed".into()))?;
        Ok(arena.bytes_mut()?)
    }

    pub fn decode(&self) -> Result<SlabPayload, SlabError> {
        decode_slab(self.bytes(), self.id.slab_type).map_err(|e| SlabError::Corrupt {
            path: self.path.clone(),
            reason: e.to_string(),
        })
    }
}

/// The slab buffer: one per process, sharing an arena allocator.
#[derive(Debug, Clone, Default)]
pub struct SlabBuffer {
    alloc: ArenaAllocator,
    cfg: RamdiskConfig,
}

impl SlabBuffer {
    pub fn new(alloc: ArenaAllocator, cfg: RamdiskConfig) -> Self {
        Self { alloc, cfg }
    }

    pub fn allocator(&self) -> &ArenaAllocator {
        &self.alloc
    }

    pub fn config(&self) -> &RamdiskConfig {
        &self.cfg
    }

    /// Loads one slab of the state in `state_dir`. Ramdisk slabs are mapped
    /// read-only; others are read into a private arena. The file size is
    /// checked against the state's metadata and cell index.
    pub fn request_slab(&self, state_dir: &Path, id: SlabId) -> Result<SlabHandle, SlabError> {
        let path = slab_path(state_dir, id)?;
        let file_len = match fs::metadata(&path) {
            Ok(m) => m.len(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(SlabError::NotFound { path })
            }
            Err(e) => {
                return Err(IoError::Io {
                    op: "stat",
                    path,
                    source: e,
                }
                .into())
            }
        };
        let expected = expected_elements(state_dir, id)?;
        let expected_len = state_format::encoded_len(expected as usize) as u64;
        if file_len != expected_len {
            return Err(SlabError::Corrupt {
                path,
                reason: format!("{file_len} bytes, expected {expected_len} for {expected} elements"),
            });
        }
        let (arena, origin) = if is_ramdisk(&path, &self.cfg) {
            let arena = self.alloc.map_shared(&path, file_len, MapMode::ReadOnly)?;
            (arena, SlabOrigin::MappedShared)
        } else {
            let mut arena = self.alloc.allocate_private(file_len)?;
            io_subsystem::read_into(&path, &mut arena)?;
            (arena, SlabOrigin::ReadFromDisk)
        };
        decode_header(arena.bytes()).map_err(|e| SlabError::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        Ok(SlabHandle {
            id,
            path,
            origin,
            kind: HandleKind::Read,
            arena: Some(arena),
        })
    }

    /// Releases a read slab. Mapped slabs keep their file: the read state is
    /// only deleted when the driver retires it.
    pub fn release_read_slab(&self, mut handle: SlabHandle) -> Result<Option<ReleaseTiming>, SlabError> {
        if handle.kind != HandleKind::Read {
            return Err(SlabError::Usage("not a read slab".into()));
        }
        let Some(arena) = handle.arena.take() else {
            return Ok(None);
        };
        let policy = match handle.origin {
            SlabOrigin::MappedShared => ReleasePolicy::UnmapKeepFile,
            SlabOrigin::ReadFromDisk => ReleasePolicy::PrivateFree,
        };
        Ok(Some(self.alloc.release(arena, policy)?))
    }

    /// Starts an output slab of exactly `length` bytes. On the ramdisk the
    /// file exists (at full size) as soon as this returns; elsewhere nothing
    /// is written until [`seal_write_slab`](Self::seal_write_slab).
    pub fn create_write_slab(
        &self,
        state_dir: &Path,
        id: SlabId,
        length: u64,
    ) -> Result<SlabHandle, SlabError> {
        if length == 0 {
            return Err(ArenaError::ZeroLength.into());
        }
        let path = slab_path(state_dir, id)?;
        let (arena, origin) = if is_ramdisk(&path, &self.cfg) {
            let arena = self.alloc.map_shared(&path, length, MapMode::CreateWrite)?;
            (arena, SlabOrigin::MappedShared)
        } else {
            (self.alloc.allocate_private(length)?, SlabOrigin::ReadFromDisk)
        };
        Ok(SlabHandle {
            id,
            path,
            origin,
            kind: HandleKind::Write,
            arena: Some(arena),
        })
    }

    /// Makes a write slab durable at its path and releases its arena.
    pub fn seal_write_slab(&self, handle: &mut SlabHandle) -> Result<(), SlabError> {
        if handle.kind != HandleKind::Write {
            return Err(SlabError::Usage("cannot seal a read slab".into()));
        }
        let arena = handle
            .arena
            .take()
            .ok_or_else(|| SlabError::Usage(format!("{} already sealed", handle.path.display())))?;
        match handle.origin {
            SlabOrigin::MappedShared => {
                self.alloc.release(arena, ReleasePolicy::UnmapKeepFile)?;
            }
            SlabOrigin::ReadFromDisk => {
                io_subsystem::write_from(&handle.path, &arena)?;
                self.alloc.release(arena, ReleasePolicy::PrivateFree)?;
            }
        }
        Ok(())
    }

    /// Convenience: encode `payload` into a new write slab and seal it.
    pub fn write_slab(&self, state_dir: &Path, index: u32, payload: &SlabPayload) -> Result<(), SlabError> {
        let id = SlabId::new(index, payload.slab_type());
        let mut handle = self.create_write_slab(state_dir, id, payload.encoded_len() as u64)?;
        state_format::encode_slab_into(payload, handle.bytes_mut()?);
        self.seal_write_slab(&mut handle)
    }

    /// Convenience: request, decode and release one slab.
    pub fn load_slab(&self, state_dir: &Path, id: SlabId) -> Result<SlabPayload, SlabError> {
        let handle = self.request_slab(state_dir, id)?;
        let payload = handle.decode()?;
        self.release_read_slab(handle)?;
        Ok(payload)
    }
}

/// Element count a slab file must hold, from the metadata (cell index) or
/// the last cell offset (particle fields).
fn expected_elements(state_dir: &Path, id: SlabId) -> Result<u64, SlabError> {
    if id.slab_type == SlabType::CellInfo {
        let meta = state_format::read_metadata(state_dir)?;
        if id.slab_index >= meta.n_slabs {
            return Err(SlabError::Usage(format!(
                "slab index {} out of range (n_slabs = {})",
                id.slab_index, meta.n_slabs
            )));
        }
        return Ok(u64::from(meta.cells_per_slab) + 1);
    }
    let cell_path = slab_path(state_dir, SlabId::new(id.slab_index, SlabType::CellInfo))?;
    let corrupt = |reason: String| SlabError::Corrupt {
        path: cell_path.clone(),
        reason,
    };
    let mut file = File::open(&cell_path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => SlabError::NotFound {
            path: cell_path.clone(),
        },
        _ => corrupt(e.to_string()),
    })?;
    let len = file.metadata().map_err(|e| corrupt(e.to_string()))?.len();
    if len < (HEADER_LEN + 8) as u64 {
        return Err(corrupt(format!("cell index too short ({len} bytes)")));
    }
    let mut last = [0u8; 8];
    file.seek(SeekFrom::End(-8))
        .and_then(|_| file.read_exact(&mut last))
        .map_err(|e| corrupt(e.to_string()))?;
    Ok(u64::from_le_bytes(last))
}
