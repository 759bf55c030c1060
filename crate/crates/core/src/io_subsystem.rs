//! Blocking file I/O for slabs that do not live on the ramdisk.

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::arena::{Arena, ArenaError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: file is {file_len} bytes but the arena holds {arena_len}")]
    SizeMismatch {
        path: PathBuf,
        file_len: u64,
        arena_len: u64,
    },
    #[error("{path}: not found")]
    NotFound { path: PathBuf },
    #[error("{path}: short read ({read} of {expected} bytes)")]
    ShortRead {
        path: PathBuf,
        read: u64,
        expected: u64,
    },
    #[error("{op} {path}: {source}")]
    Io {
        op: &'static str,
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Arena(#[from] ArenaError),
}

fn io_err<'a>(op: &'static str, path: &'a Path) -> impl FnOnce(io::Error) -> IoError + 'a {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            IoError::NotFound {
                path: path.to_path_buf(),
            }
        } else {
            IoError::Io {
                op,
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Reads the whole file into `arena`, which must be exactly the file's size.
pub fn read_into(path: &Path, arena: &mut Arena) -> Result<u64, IoError> {
    let mut file = File::open(path).map_err(io_err("open", path))?;
    let file_len = file.metadata().map_err(io_err("stat", path))?.len();
    if file_len != arena.len() {
        return Err(IoError::SizeMismatch {
            path: path.to_path_buf(),
            file_len,
            arena_len: arena.len(),
        });
    }
    let buf = arena.bytes_mut()?;
    let mut filled = 0;
    while filled < buf.len() {
        match file.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_err("read", path)(e)),
        }
    }
    if filled != buf.len() {
        return Err(IoError::ShortRead {
            path: path.to_path_buf(),
            read: filled as u64,
            expected: buf.len() as u64,
        });
    }
    Ok(filled as u64)
}

/// Writes the arena's bytes to `path` atomically: a sibling temp file is
/// written and synced, then renamed into place.
pub fn write_from(path: &Path, arena: &Arena) -> Result<u64, IoError> {
    write_bytes_atomic(path, arena.bytes(), false)
}

pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub(crate) fn write_bytes_atomic(
    path: &Path,
    bytes: &[u8],
    fail_before_rename: bool,
) -> Result<u64, IoError> {
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut file = File::create(&tmp).map_err(io_err("create", &tmp))?;
        file.write_all(bytes).map_err(io_err("write", &tmp))?;
        file.sync_data().map_err(io_err("sync", &tmp))?;
        if fail_before_rename {
            return Err(IoError::Io {
                op: "rename",
                path: path.to_path_buf(),
                source: io::Error::other("injected failure"),
            });
        }
        fs::rename(&tmp, path).map_err(io_err("rename", path))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map(|()| bytes.len() as u64)
}
